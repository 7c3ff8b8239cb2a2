"""Bilinear sampling and unmodulated 3x3 deformable convolution.

Offsets are a ``(n, 18, h, w)`` tensor.  Taps are ordered a..i row-major over
the 3x3 window and channels ``2k, 2k+1`` hold ``(dx, dy)`` of tap ``k``.  A
tap of output pixel ``(y, x)`` samples the input at
``(x + base_x + dx, y + base_y + dy)``; samples outside the input read zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .ops import OpNode, _require_node, add_bias, project, project_backward

TAPS = "abcdefghi"
TAP_INDEX = {name: k for k, name in enumerate(TAPS)}
N_TAPS = 9


@dataclass(frozen=True)
class GridGeometry:
    """Fixed lattice of a 3x3 kernel with the given dilation."""

    dilation: int = 1
    kernel_size: int = 3

    def __post_init__(self):
        if self.kernel_size != 3:
            raise ShapeError(f"only 3x3 kernels are supported, got {self.kernel_size}")
        if int(self.dilation) != self.dilation or self.dilation < 1:
            raise ShapeError(f"dilation must be a positive integer, got {self.dilation}")

    @property
    def base_points(self) -> tuple[tuple[int, int], ...]:
        """(x, y) of taps a..i relative to the window centre."""
        d = self.dilation
        return tuple((kx * d, ky * d) for ky in (-1, 0, 1) for kx in (-1, 0, 1))

    def point(self, tap: str) -> np.ndarray:
        return np.array(self.base_points[TAP_INDEX[tap]], dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "kernel_size": self.kernel_size,
            "dilation": self.dilation,
            "taps": list(TAPS),
            "base_points": [list(p) for p in self.base_points],
        }


def check_offsets(offsets: np.ndarray, n=None, h=None, w=None) -> None:
    if offsets.ndim != 4 or offsets.shape[1] != 2 * N_TAPS:
        raise ShapeError(f"offset field must have shape (n, 18, h, w), got {offsets.shape}")
    expected = (n, h, w)
    actual = (offsets.shape[0], offsets.shape[2], offsets.shape[3])
    if any(e is not None and e != a for e, a in zip(expected, actual)):
        raise ShapeError(f"offset field batch/spatial dims {actual} do not match output {expected}")


def split_offsets(offsets: np.ndarray):
    """Views ``(dx, dy)``, each of shape ``(n, 9, h, w)``."""
    return offsets[:, 0::2], offsets[:, 1::2]


def merge_offsets(dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    n, k, h, w = dx.shape
    out = np.empty((n, 2 * k, h, w), dtype=np.result_type(dx, dy))
    out[:, 0::2] = dx
    out[:, 1::2] = dy
    return out


def bilinear_sample(plane, x: float, y: float) -> float:
    """Sample a 2-D array at real coordinates (column ``x``, row ``y``)."""
    plane = np.asarray(plane)
    h, w = plane.shape
    x0, y0 = math.floor(x), math.floor(y)
    lx, ly = x - x0, y - y0
    total = 0.0
    for yy, xx, wt in ((y0, x0, (1 - ly) * (1 - lx)), (y0, x0 + 1, (1 - ly) * lx),
                       (y0 + 1, x0, ly * (1 - lx)), (y0 + 1, x0 + 1, ly * lx)):
        if 0 <= yy < h and 0 <= xx < w:
            total += wt * float(plane[yy, xx])
    return total


def bilinear_sample_grad(plane, x: float, y: float):
    """Return ``(d_plane, d_x, d_y)`` of :func:`bilinear_sample`.

    At integer coordinates this is the one-sided derivative from the cell
    selected by ``floor``.
    """
    plane = np.asarray(plane)
    h, w = plane.shape
    x0, y0 = math.floor(x), math.floor(y)
    lx, ly = x - x0, y - y0
    d_plane = np.zeros(plane.shape, dtype=np.float64)
    d_x = d_y = 0.0
    corners = (
        (y0, x0, (1 - ly) * (1 - lx), -(1 - ly), -(1 - lx)),
        (y0, x0 + 1, (1 - ly) * lx, (1 - ly), -lx),
        (y0 + 1, x0, ly * (1 - lx), -ly, (1 - lx)),
        (y0 + 1, x0 + 1, ly * lx, ly, lx),
    )
    for yy, xx, wt, dwx, dwy in corners:
        if 0 <= yy < h and 0 <= xx < w:
            v = float(plane[yy, xx])
            d_plane[yy, xx] += wt
            d_x += dwx * v
            d_y += dwy * v
    return d_plane, d_x, d_y


class _Sampling:
    """Corner indices and bilinear weights for every (batch, tap, row, col) sample.

    Indices address rows of the projected maps laid out as ``(n, 9, h, w)``.
    """

    def __init__(self, offsets, geometry: GridGeometry, h: int, w: int, dtype):
        dx, dy = split_offsets(offsets)
        n = offsets.shape[0]
        base = np.array(geometry.base_points, dtype=dtype)
        gy, gx = np.meshgrid(np.arange(h, dtype=dtype), np.arange(w, dtype=dtype), indexing="ij")
        px = gx[None, None] + base[:, 0].reshape(1, N_TAPS, 1, 1) + dx.astype(dtype, copy=False)
        py = gy[None, None] + base[:, 1].reshape(1, N_TAPS, 1, 1) + dy.astype(dtype, copy=False)
        x0 = np.floor(px)
        y0 = np.floor(py)
        self.lx = px - x0
        self.ly = py - y0
        # NaN offsets cast to garbage indices; the NaN weights still poison the output
        with np.errstate(invalid="ignore"):
            x0 = x0.astype(np.int64)
            y0 = y0.astype(np.int64)
        plane = np.arange(n * N_TAPS, dtype=np.int64).reshape(n, N_TAPS, 1, 1)
        self.index = []
        self.valid = []
        for oy, ox in ((0, 0), (0, 1), (1, 0), (1, 1)):
            yy, xx = y0 + oy, x0 + ox
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            self.index.append((plane * h + np.clip(yy, 0, h - 1)) * w + np.clip(xx, 0, w - 1))
            self.valid.append(ok)

    def weights(self):
        lx, ly = self.lx, self.ly
        raw = ((1 - ly) * (1 - lx), (1 - ly) * lx, ly * (1 - lx), ly * lx)
        return [r * ok for r, ok in zip(raw, self.valid)]

    def gather(self, rows):
        """Masked corner values, each ``(n, 9, h, w, o)``."""
        return [rows[idx] * ok[..., None] for idx, ok in zip(self.index, self.valid)]


def _rows(z: np.ndarray) -> np.ndarray:
    """``(n, o, 9, h, w)`` projections -> ``(n*9*h*w, o)`` rows."""
    n, o, k, h, w = z.shape
    return np.ascontiguousarray(z.transpose(0, 2, 3, 4, 1)).reshape(n * k * h * w, o)


def deform_conv2d(x, offsets, weight, bias=None, geometry: GridGeometry = GridGeometry()):
    """Deformable 3x3 convolution, stride 1, spatial size preserved.

    Returns ``(output, node)``.  With all-zero offsets the output is
    bit-identical to ``conv2d(x, weight, bias, dilation=geometry.dilation)``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"deform_conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    if weight.shape[1:] != (c, 3, 3):
        raise ShapeError(f"weight must have shape (out_c, {c}, 3, 3), got {weight.shape}")
    if bias is not None and np.shape(bias) != (weight.shape[0],):
        raise ShapeError(f"bias shape {np.shape(bias)} does not match {weight.shape[0]} output channels")
    check_offsets(offsets, n, h, w)
    z = project(x, weight)
    samp = _Sampling(offsets, geometry, h, w, np.result_type(z, offsets))
    rows = _rows(z)
    vals = samp.gather(rows)
    wts = samp.weights()
    sampled = vals[0] * wts[0][..., None]
    for v, wt in zip(vals[1:], wts[1:]):
        sampled += v * wt[..., None]
    out = np.zeros((n, h, w, weight.shape[0]), dtype=sampled.dtype)
    for k in range(N_TAPS):
        out += sampled[:, k]
    out = add_bias(np.ascontiguousarray(out.transpose(0, 3, 1, 2)), bias)
    node = OpNode("deform_conv2d", {"x": x, "weight": weight, "rows": rows, "sampling": samp})
    return out, node


def deform_conv2d_backward(grad_out, node: OpNode):
    """Return ``(grad_input, grad_offsets, grad_weight, grad_bias)``."""
    x, weight, rows, samp = _require_node(node, "deform_conv2d").take(
        "deform_conv2d", "x", "weight", "rows", "sampling"
    )
    n, c, h, w = x.shape
    o = weight.shape[0]
    if grad_out.shape != (n, o, h, w):
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {(n, o, h, w)}")
    g = grad_out.transpose(0, 2, 3, 1)[:, None]  # (n, 1, h, w, o), broadcast over taps

    chan = np.arange(o, dtype=np.int64)
    keys = np.concatenate([(idx[..., None] * o + chan).ravel() for idx in samp.index])
    contribs = np.concatenate([np.broadcast_to(g * wt[..., None], wt.shape + (o,)).ravel()
                               for wt in samp.weights()])
    gz = np.bincount(keys, weights=contribs, minlength=rows.size)
    gz = gz.reshape(n, N_TAPS, h, w, o).transpose(0, 4, 1, 2, 3).astype(grad_out.dtype)
    grad_x, grad_w = project_backward(gz, x, weight)

    v00, v01, v10, v11 = samp.gather(rows)
    lx = samp.lx[..., None]
    ly = samp.ly[..., None]
    dval_dx = (1 - ly) * (v01 - v00) + ly * (v11 - v10)
    dval_dy = (1 - lx) * (v10 - v00) + lx * (v11 - v01)
    g_dx = np.einsum("nkhwo,nkhwo->nkhw", np.broadcast_to(g, dval_dx.shape), dval_dx)
    g_dy = np.einsum("nkhwo,nkhwo->nkhw", np.broadcast_to(g, dval_dy.shape), dval_dy)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return grad_x, merge_offsets(g_dx, g_dy).astype(grad_out.dtype, copy=False), grad_w, grad_b
