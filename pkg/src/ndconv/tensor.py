"""Dense 4-D tensors and their on-disk serialization.

Tensors are plain ``numpy.ndarray`` objects of shape ``(n, c, h, w)``.  On
disk a tensor is a one-line UTF-8 header ``"n c h w\\n"`` followed by
``n*c*h*w`` little-endian float32 values.
"""

from __future__ import annotations

import io
import os
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .errors import FormatError, ShapeError

_WIRE_DTYPE = np.dtype("<f4")
_MAX_HEADER = 128


def as_tensor(x, dtype=np.float64) -> np.ndarray:
    """Return ``x`` as a contiguous 4-D array, raising ``ShapeError`` otherwise."""
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(f"expected a 4-D tensor (n, c, h, w), got shape {arr.shape}")
    return arr


def write_tensor(stream: BinaryIO, t: np.ndarray) -> None:
    if t.ndim != 4:
        raise ShapeError(f"only 4-D tensors can be serialized, got shape {t.shape}")
    header = " ".join(str(int(s)) for s in t.shape) + "\n"
    stream.write(header.encode("utf-8"))
    stream.write(np.ascontiguousarray(t, dtype=_WIRE_DTYPE).tobytes())


def read_tensor(stream: BinaryIO, path="<stream>", base_offset: int = 0) -> np.ndarray:
    """Read one tensor from ``stream``; the result is float32.

    ``path`` and ``base_offset`` only feed error messages.
    """
    start = stream.tell() if stream.seekable() else 0
    line = stream.readline(_MAX_HEADER)
    if not line.endswith(b"\n"):
        raise FormatError(path, base_offset + start, "missing or overlong tensor header")
    try:
        dims = [int(tok) for tok in line.decode("utf-8").split()]
    except (UnicodeDecodeError, ValueError):
        raise FormatError(path, base_offset + start, f"bad tensor header {line!r}") from None
    if len(dims) != 4 or any(d < 0 for d in dims):
        raise FormatError(path, base_offset + start, f"tensor header needs 4 nonnegative ints, got {line!r}")
    count = int(np.prod(dims))
    payload_at = base_offset + start + len(line)
    raw = stream.read(count * _WIRE_DTYPE.itemsize)
    if len(raw) != count * _WIRE_DTYPE.itemsize:
        raise FormatError(
            path,
            payload_at + len(raw),
            f"truncated payload: expected {count * _WIRE_DTYPE.itemsize} bytes, got {len(raw)}",
        )
    return np.frombuffer(raw, dtype=_WIRE_DTYPE).astype(np.float32).reshape(dims)


def save_tensor(path: str | os.PathLike, t: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, t)


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    stream = io.BytesIO(data)
    t = read_tensor(stream, path=path)
    if stream.tell() != len(data):
        raise FormatError(path, stream.tell(), "trailing bytes after tensor payload")
    return t
