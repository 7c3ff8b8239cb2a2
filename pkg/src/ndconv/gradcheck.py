"""Central finite differences and the gradient verification suite."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def finite_diff_grad(scalar_fn, at: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``scalar_fn`` at ``at`` (one element at a time)."""
    x = np.array(at, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = scalar_fn(x)
        flat[i] = orig - step
        fm = scalar_fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max|a - n| / max|n|``; absolute error when the reference is all zeros."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    err = float(np.max(np.abs(analytic - numeric), initial=0.0))
    scale = float(np.max(np.abs(numeric), initial=0.0))
    return err / scale if scale > 0 else err


@dataclass
class CheckResult:
    component: str
    path: str
    seed: int
    max_rel_error: float
    worst_index: tuple = field(default=())

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def compare(component, path, seed, analytic, numeric) -> CheckResult:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(analytic - numeric)
    worst = tuple(int(i) for i in np.unravel_index(int(np.argmax(diff)), diff.shape)) if diff.size else ()
    return CheckResult(component, path, seed, relative_error(analytic, numeric), worst)


def _projected(fn, proj):
    """Scalar ``sum(fn(...) * proj)``, so every output element gets its own weight."""
    return lambda *args: float(np.sum(fn(*args) * proj))


def check_conv(seed: int) -> list[CheckResult]:
    from .ops import conv2d, conv2d_backward

    rng = np.random.default_rng(seed)
    n, c, o = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 3))
    h, w = int(rng.integers(4, 7)), int(rng.integers(4, 7))
    dil = int(rng.integers(1, 3))
    x = rng.standard_normal((n, c, h, w))
    wt = rng.standard_normal((o, c, 3, 3))
    b = rng.standard_normal(o)
    out, node = conv2d(x, wt, b, dilation=dil)
    proj = rng.standard_normal(out.shape)
    gx, gw, gb = conv2d_backward(proj, node)
    f = _projected(lambda x_, w_, b_: conv2d(x_, w_, b_, dilation=dil)[0], proj)
    return [
        compare("conv", "input", seed, gx, finite_diff_grad(lambda v: f(v, wt, b), x)),
        compare("conv", "weight", seed, gw, finite_diff_grad(lambda v: f(x, v, b), wt)),
        compare("conv", "bias", seed, gb, finite_diff_grad(lambda v: f(x, wt, v), b)),
    ]


def random_fractional_offsets(rng, shape, lo=0.2, hi=0.8):
    """Integer shifts in [-2, 2] plus a fractional part in ``[lo, hi]`` (never near an integer)."""
    return rng.integers(-2, 3, size=shape) + rng.uniform(lo, hi, size=shape)


def check_dconv(seed: int) -> list[CheckResult]:
    from .deform import GridGeometry, deform_conv2d, deform_conv2d_backward

    rng = np.random.default_rng(seed)
    n, c, o = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 3))
    h, w = int(rng.integers(3, 6)), int(rng.integers(3, 6))
    geom = GridGeometry(int(rng.integers(1, 3)))
    x = rng.standard_normal((n, c, h, w))
    off = random_fractional_offsets(rng, (n, 18, h, w))
    wt = rng.standard_normal((o, c, 3, 3))
    b = rng.standard_normal(o)
    out, node = deform_conv2d(x, off, wt, b, geom)
    proj = rng.standard_normal(out.shape)
    gx, goff, gw, gb = deform_conv2d_backward(proj, node)
    f = _projected(lambda x_, o_, w_, b_: deform_conv2d(x_, o_, w_, b_, geom)[0], proj)
    return [
        compare("dconv", "input", seed, gx, finite_diff_grad(lambda v: f(v, off, wt, b), x)),
        compare("dconv", "offsets", seed, goff, finite_diff_grad(lambda v: f(x, v, wt, b), off)),
        compare("dconv", "weight", seed, gw, finite_diff_grad(lambda v: f(x, off, v, b), wt)),
        compare("dconv", "bias", seed, gb, finite_diff_grad(lambda v: f(x, off, wt, v), b)),
    ]


def check_ndloss(seed: int, corner_variant: bool = False) -> list[CheckResult]:
    from .deform import GridGeometry
    from .ndloss import nd_loss, nd_loss_backward

    rng = np.random.default_rng(seed)
    geom = GridGeometry(int(rng.integers(1, 4)))
    off = rng.standard_normal((int(rng.integers(1, 3)), 18, int(rng.integers(1, 4)), int(rng.integers(1, 4))))
    analytic = nd_loss_backward(off, geom, corner_variant)
    numeric = finite_diff_grad(lambda v: nd_loss(v, geom, corner_variant)[0], off)
    name = "ndloss-corner" if corner_variant else "ndloss"
    return [compare(name, "offsets", seed, analytic, numeric)]


def check_mse(seed: int) -> list[CheckResult]:
    from .ops import mse_density_loss, mse_density_loss_backward

    rng = np.random.default_rng(seed)
    shape = (int(rng.integers(1, 4)), 1, int(rng.integers(2, 6)), int(rng.integers(2, 6)))
    pred, target = rng.standard_normal(shape), rng.standard_normal(shape)
    _, node = mse_density_loss(pred, target)
    analytic = mse_density_loss_backward(node)
    numeric = finite_diff_grad(lambda v: mse_density_loss(v, target)[0], pred)
    return [compare("mse", "pred", seed, analytic, numeric)]


def check_relu(seed: int) -> list[CheckResult]:
    from .ops import relu, relu_backward

    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, 3, 3))
    x[np.abs(x) < 1e-3] = 0.5  # keep clear of the kink
    out, node = relu(x)
    proj = rng.standard_normal(out.shape)
    analytic = relu_backward(proj, node)
    numeric = finite_diff_grad(lambda v: float(np.sum(relu(v)[0] * proj)), x)
    return [compare("relu", "input", seed, analytic, numeric)]


SUITES = {
    "conv": [check_conv],
    "dconv": [check_dconv],
    "ndloss": [check_ndloss, lambda s: check_ndloss(s, corner_variant=True)],
    "mse": [check_mse],
    "relu": [check_relu],
}
SUITES["all"] = [fn for key in ("conv", "dconv", "ndloss", "mse", "relu") for fn in SUITES[key]]


def run_suite(component: str = "all", seeds=range(20)) -> list[CheckResult]:
    if component not in SUITES:
        raise KeyError(f"unknown component {component!r}; choose from {sorted(SUITES)}")
    return [r for seed in seeds for fn in SUITES[component] for r in fn(seed)]
