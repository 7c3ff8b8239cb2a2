"""Forward/backward pairs for the dense ops used by the counting network.

Every forward returns ``(output, node)``.  The :class:`OpNode` keeps exactly
the activations its backward needs; backward releases them, so each node can
be differentiated once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import ContractError, ShapeError


@dataclass
class OpNode:
    op: str
    saved: dict[str, Any] = field(default_factory=dict)

    def take(self, op: str, *keys: str) -> tuple:
        """Pop the named activations, failing loudly if any is gone."""
        if self.op != op:
            raise ContractError(f"{op} backward received a node saved by {self.op}")
        missing = [k for k in keys if k not in self.saved]
        if missing:
            raise ContractError(f"{op} backward: saved activations missing: {', '.join(missing)}")
        return tuple(self.saved.pop(k) for k in keys)


def _require_node(node, op):
    if node is None:
        raise ContractError(f"{op} backward called without a saved node")
    return node


def output_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def project(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Per-tap projections ``z[n, o, k] = sum_c weight[o, c, k] * x[n, c]``.

    Returns shape ``(n, o, kh*kw, h, w)``.  Both convolutions build their
    output by shifting (or sampling) these maps and adding taps in order
    ``k = 0..8``, which is what makes zero offsets reproduce the dense
    convolution bit for bit.
    """
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    wm = weight.transpose(0, 2, 3, 1).reshape(o * kh * kw, c)
    z = np.matmul(wm, x.reshape(n, c, h * w))
    return z.reshape(n, o, kh * kw, h, w)


def project_backward(grad_z: np.ndarray, x: np.ndarray, weight: np.ndarray):
    """Return ``(grad_x, grad_weight)`` for :func:`project`."""
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    gz = grad_z.reshape(n, o * kh * kw, h * w)
    wm = weight.transpose(0, 2, 3, 1).reshape(o * kh * kw, c)
    grad_x = np.matmul(wm.T, gz).reshape(x.shape)
    gw = np.tensordot(gz, x.reshape(n, c, h * w), axes=([0, 2], [0, 2]))
    return grad_x, np.ascontiguousarray(gw.reshape(o, kh, kw, c).transpose(0, 3, 1, 2))


def add_bias(out: np.ndarray, bias) -> np.ndarray:
    if bias is not None:
        out += np.asarray(bias, dtype=out.dtype).reshape(1, -1, 1, 1)
    return out


def _check_conv_shapes(x, weight, bias):
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    if weight.shape[1] != x.shape[1]:
        raise ShapeError(f"weight expects {weight.shape[1]} input channels, input has {x.shape[1]}")
    if weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"only square kernels are supported, got {weight.shape[2:]}")
    if bias is not None and np.shape(bias) != (weight.shape[0],):
        raise ShapeError(f"bias shape {np.shape(bias)} does not match {weight.shape[0]} output channels")


def _overlap(offset: int, n_in: int, n_out: int, stride: int):
    """Output/input slices where ``in = out * stride + offset`` lands inside ``[0, n_in)``."""
    lo = max(0, -(offset // stride))
    hi = min(n_out, (n_in - 1 - offset) // stride + 1)
    if hi <= lo:
        return None
    return slice(lo, hi), slice(lo * stride + offset, (hi - 1) * stride + offset + 1, stride)


def _tap_regions(k, stride, padding, dilation, h, w, ho, wo):
    """Per tap: (tap, out_y, out_x, in_y, in_x) slices of the non-padded overlap."""
    for ky in range(k):
        for kx in range(k):
            ry = _overlap(ky * dilation - padding, h, ho, stride)
            rx = _overlap(kx * dilation - padding, w, wo, stride)
            if ry is not None and rx is not None:
                yield ky * k + kx, ry[0], rx[0], ry[1], rx[1]


def conv2d(x, weight, bias=None, stride: int = 1, padding: int | None = None, dilation: int = 1):
    """2-D cross-correlation with zero padding.

    ``padding=None`` picks ``dilation * (k - 1) // 2``, which preserves the
    spatial size at stride 1.  Returns ``(output, node)``.
    """
    _check_conv_shapes(x, weight, bias)
    k = weight.shape[2]
    if padding is None:
        padding = dilation * (k - 1) // 2
    n, c, h, w = x.shape
    ho = output_size(h, k, stride, padding, dilation)
    wo = output_size(w, k, stride, padding, dilation)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"input {h}x{w} too small for kernel {k} with dilation {dilation}")
    z = project(x, weight)
    out = np.zeros((n, weight.shape[0], ho, wo), dtype=z.dtype)
    for tap, oy, ox, iy, ix in _tap_regions(k, stride, padding, dilation, h, w, ho, wo):
        out[:, :, oy, ox] += z[:, :, tap, iy, ix]
    add_bias(out, bias)
    node = OpNode("conv2d", {"x": x, "weight": weight, "stride": stride,
                             "padding": padding, "dilation": dilation})
    return out, node


def conv2d_backward(grad_out, node: OpNode):
    """Return ``(grad_input, grad_weight, grad_bias)``."""
    x, weight, stride, padding, dilation = _require_node(node, "conv2d").take(
        "conv2d", "x", "weight", "stride", "padding", "dilation"
    )
    n, _, h, w = x.shape
    o, _, k, _ = weight.shape
    ho = output_size(h, k, stride, padding, dilation)
    wo = output_size(w, k, stride, padding, dilation)
    if grad_out.shape != (n, o, ho, wo):
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {(n, o, ho, wo)}")
    gz = np.zeros((n, o, k * k, h, w), dtype=grad_out.dtype)
    for tap, oy, ox, iy, ix in _tap_regions(k, stride, padding, dilation, h, w, ho, wo):
        gz[:, :, tap, iy, ix] = grad_out[:, :, oy, ox]
    grad_x, grad_w = project_backward(gz, x, weight)
    return grad_x, grad_w, grad_out.sum(axis=(0, 2, 3))


def relu(x):
    mask = x > 0
    # np.maximum keeps NaN so a bad input surfaces as a non-finite loss
    return np.maximum(x, 0).astype(x.dtype, copy=False), OpNode("relu", {"mask": mask})


def relu_backward(grad_out, node: OpNode):
    # subgradient 0 at the kink
    (mask,) = _require_node(node, "relu").take("relu", "mask")
    if grad_out.shape != mask.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {mask.shape}")
    return np.where(mask, grad_out, 0).astype(grad_out.dtype, copy=False)


def mse_density_loss(pred, target):
    """Half squared error summed over pixels, averaged over the batch.

    Returns ``(loss, node)``.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"pred shape {pred.shape} != target shape {target.shape}")
    n = pred.shape[0]
    diff = pred - target
    loss = float(np.sum(diff.astype(np.float64) ** 2) / (2.0 * n))
    return loss, OpNode("mse_density_loss", {"diff": diff, "n": n})


def mse_density_loss_backward(node: OpNode, grad: float = 1.0):
    diff, n = _require_node(node, "mse_density_loss").take("mse_density_loss", "diff", "n")
    return diff * (grad / n)
