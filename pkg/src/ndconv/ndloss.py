"""Normed-deformable loss over a 3x3 offset field, and a uniformity diagnostic.

Per sampling window, with sampled positions ``P_t = t + dt`` for taps
``t in a..i``:

* centre:       ``|dE|^2``
* horizontal:   ``(dD_x + dF_x)^2 + dD_y^2 + dF_y^2``
* vertical:     ``(dB_y + dH_y)^2 + dB_x^2 + dH_x^2``
* corners:      ``|P_D + P_B - P_E - a|^2`` for A, and likewise C (F, B),
  G (D, H), I (F, H).

The corner-variant subtracts the *displaced* corner ``P_A`` instead of ``a``.
Every term is averaged over batch items and spatial locations; the total is
the sum of the seven averages.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .deform import TAP_INDEX, GridGeometry, check_offsets, merge_offsets, split_offsets

# corner tap -> (horizontal neighbour, vertical neighbour)
CORNERS = {"a": ("d", "b"), "c": ("f", "b"), "g": ("d", "h"), "i": ("f", "h")}


@dataclass(frozen=True)
class NdLossBreakdown:
    l_e: float
    l_hor: float
    l_vec: float
    l_A: float
    l_C: float
    l_G: float
    l_I: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class UniformityReport:
    mean_residual: float
    r_A: float
    r_C: float
    r_G: float
    r_I: float
    center_drift: float

    def to_dict(self) -> dict:
        return asdict(self)


def _positions(offsets, geometry):
    """Absolute window-relative positions ``(px, py)``, each ``(n, 9, h, w)``, float64."""
    dx, dy = split_offsets(np.asarray(offsets, dtype=np.float64))
    base = np.array(geometry.base_points, dtype=np.float64)
    return dx + base[:, 0, None, None], dy + base[:, 1, None, None]


def _corner_residuals(offsets, geometry, displaced: bool):
    """Residual vectors ``P_p + P_q - P_E - corner`` keyed by corner tap."""
    px, py = _positions(offsets, geometry)
    e = TAP_INDEX["e"]
    out = {}
    for corner, (p, q) in CORNERS.items():
        ip, iq, ic = TAP_INDEX[p], TAP_INDEX[q], TAP_INDEX[corner]
        if displaced:
            cx, cy = px[:, ic], py[:, ic]
        else:
            cx, cy = geometry.base_points[ic]
        out[corner] = (px[:, ip] + px[:, iq] - px[:, e] - cx,
                       py[:, ip] + py[:, iq] - py[:, e] - cy)
    return out


def nd_loss(offsets, geometry: GridGeometry = GridGeometry(), corner_variant: bool = False):
    """Return ``(total, NdLossBreakdown)`` for an ``(n, 18, h, w)`` offset field."""
    check_offsets(offsets)
    dx, dy = split_offsets(np.asarray(offsets, dtype=np.float64))
    t = TAP_INDEX
    l_e = np.mean(dx[:, t["e"]] ** 2 + dy[:, t["e"]] ** 2)
    l_hor = np.mean((dx[:, t["d"]] + dx[:, t["f"]]) ** 2 + dy[:, t["d"]] ** 2 + dy[:, t["f"]] ** 2)
    l_vec = np.mean((dy[:, t["b"]] + dy[:, t["h"]]) ** 2 + dx[:, t["b"]] ** 2 + dx[:, t["h"]] ** 2)
    res = _corner_residuals(offsets, geometry, displaced=corner_variant)
    corners = {k: float(np.mean(rx ** 2 + ry ** 2)) for k, (rx, ry) in res.items()}
    terms = [float(l_e), float(l_hor), float(l_vec), corners["a"], corners["c"], corners["g"], corners["i"]]
    total = 0.0
    for v in terms:
        total += v
    return total, NdLossBreakdown(*terms, total)


def nd_loss_backward(offsets, geometry: GridGeometry = GridGeometry(), corner_variant: bool = False,
                     grad: float = 1.0) -> np.ndarray:
    """Exact gradient of :func:`nd_loss` with respect to every offset channel."""
    check_offsets(offsets)
    off = np.asarray(offsets, dtype=np.float64)
    dx, dy = split_offsets(off)
    n, _, h, w = off.shape
    scale = 2.0 * grad / (n * h * w)
    gx = np.zeros(dx.shape)
    gy = np.zeros(dy.shape)
    t = TAP_INDEX
    e, d, f, b, hh = t["e"], t["d"], t["f"], t["b"], t["h"]

    gx[:, e] += dx[:, e]
    gy[:, e] += dy[:, e]

    s = dx[:, d] + dx[:, f]
    gx[:, d] += s
    gx[:, f] += s
    gy[:, d] += dy[:, d]
    gy[:, f] += dy[:, f]

    s = dy[:, b] + dy[:, hh]
    gy[:, b] += s
    gy[:, hh] += s
    gx[:, b] += dx[:, b]
    gx[:, hh] += dx[:, hh]

    for corner, (rx, ry) in _corner_residuals(off, geometry, displaced=corner_variant).items():
        p, q = CORNERS[corner]
        for tap, sign in ((p, 1.0), (q, 1.0), ("e", -1.0)):
            gx[:, t[tap]] += sign * rx
            gy[:, t[tap]] += sign * ry
        if corner_variant:
            gx[:, t[corner]] -= rx
            gy[:, t[corner]] -= ry
    return merge_offsets(gx * scale, gy * scale).astype(np.result_type(offsets, np.float32), copy=False)


def nd_loss_corner_variant(offsets, geometry: GridGeometry = GridGeometry()):
    return nd_loss(offsets, geometry, corner_variant=True)


def uniformity_report(offsets, geometry: GridGeometry = GridGeometry()) -> UniformityReport:
    """How far each displaced corner sits from the parallelogram its neighbours imply."""
    check_offsets(offsets)
    res = _corner_residuals(offsets, geometry, displaced=True)
    r = {k: float(np.mean(rx ** 2 + ry ** 2)) for k, (rx, ry) in res.items()}
    dx, dy = split_offsets(np.asarray(offsets, dtype=np.float64))
    drift = float(np.mean(np.sqrt(dx[:, TAP_INDEX["e"]] ** 2 + dy[:, TAP_INDEX["e"]] ** 2)))
    mean = (r["a"] + r["c"] + r["g"] + r["i"]) / 4.0
    return UniformityReport(mean, r["a"], r["c"], r["g"], r["i"], drift)
