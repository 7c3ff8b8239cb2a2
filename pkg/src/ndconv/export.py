"""Static artifacts for inspecting a trained model: sampling positions,
16-bit PGM density maps and the uniformity report."""

from __future__ import annotations

import json
import re
from importlib import resources
from pathlib import Path

import numpy as np

from .deform import TAPS, GridGeometry, split_offsets
from .errors import FormatError

PGM_MAX = 65535
_PGM_COMMENT = re.compile(rb"# ndconv-density min=(\S+) max=(\S+)")


def offsets_schema() -> dict:
    return json.loads(resources.files("ndconv").joinpath("schemas/offsets.schema.json").read_text())


def sampling_positions(offsets: np.ndarray, geometry: GridGeometry, grid_step: int = 8,
                       batch_index: int = 0) -> dict:
    """Absolute (x, y) of the nine taps at every ``grid_step``-th output location.

    For a plain dilated layer pass an all-zero field.
    """
    _, _, h, w = offsets.shape
    dx, dy = split_offsets(np.asarray(offsets[batch_index : batch_index + 1], dtype=np.float64))
    base = geometry.base_points
    locations = []
    for y in range(0, h, grid_step):
        for x in range(0, w, grid_step):
            points = [[x + bx + float(dx[0, k, y, x]), y + by + float(dy[0, k, y, x])]
                      for k, (bx, by) in enumerate(base)]
            locations.append({"x": x, "y": y, "points": points})
    return {
        "v": 1,
        "geometry": geometry.to_dict(),
        "feature_size": {"h": h, "w": w},
        "grid_step": grid_step,
        "tap_order": list(TAPS),
        "locations": locations,
    }


def write_pgm(path, density: np.ndarray) -> tuple[float, float]:
    """Write a 16-bit binary PGM; the min/max used for scaling go in a header comment."""
    d = np.asarray(density, dtype=np.float64)
    if d.ndim != 2:
        raise ValueError(f"density map must be 2-D, got shape {d.shape}")
    lo, hi = float(d.min()), float(d.max())
    span = hi - lo
    q = np.zeros(d.shape) if span == 0 else np.rint((d - lo) / span * PGM_MAX)
    h, w = d.shape
    header = f"P5\n# ndconv-density min={lo!r} max={hi!r}\n{w} {h}\n{PGM_MAX}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(q.astype(">u2").tobytes())
    return lo, hi


def read_pgm(path) -> np.ndarray:
    """Read a PGM written by :func:`write_pgm` and undo the scaling."""
    path = Path(path)
    data = path.read_bytes()
    tokens, pos, lo, hi = [], 0, None, None
    while len(tokens) < 4:
        if pos >= len(data):
            raise FormatError(path, pos, "truncated PGM header")
        if data[pos : pos + 1] == b"#":
            end = data.index(b"\n", pos)
            m = _PGM_COMMENT.match(data[pos:end])
            if m:
                lo, hi = float(m.group(1)), float(m.group(2))
            pos = end + 1
        elif data[pos : pos + 1].isspace():
            pos += 1
        else:
            m = re.match(rb"\S+", data[pos:])
            tokens.append(m.group(0))
            pos += len(m.group(0))
    if tokens[0] != b"P5" or int(tokens[3]) != PGM_MAX:
        raise FormatError(path, 0, "expected a 16-bit binary PGM")
    if lo is None:
        raise FormatError(path, 0, "missing ndconv-density scaling comment")
    w, h = int(tokens[1]), int(tokens[2])
    pos += 1
    raw = data[pos : pos + 2 * w * h]
    if len(raw) != 2 * w * h:
        raise FormatError(path, pos + len(raw), "truncated PGM payload")
    q = np.frombuffer(raw, dtype=">u2").astype(np.float64).reshape(h, w)
    return lo + q / PGM_MAX * (hi - lo)
