import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ndconv.deform import (
    GridGeometry, bilinear_sample, bilinear_sample_grad, deform_conv2d, deform_conv2d_backward,
)
from ndconv.errors import ContractError, ShapeError
from ndconv.gradcheck import check_dconv, finite_diff_grad, relative_error
from ndconv.ops import conv2d

from oracles import naive_bilinear, naive_deform_conv2d


def random_case(rng, max_n=2, max_c=3, max_hw=8):
    n = int(rng.integers(1, max_n + 1))
    c = int(rng.integers(1, max_c + 1))
    o = int(rng.integers(1, 4))
    h, w = int(rng.integers(3, max_hw + 1)), int(rng.integers(3, max_hw + 1))
    geom = GridGeometry(int(rng.integers(1, 3)))
    return (rng.standard_normal((n, c, h, w)), rng.standard_normal((o, c, 3, 3)),
            rng.standard_normal(o), geom)


# -- geometry ---------------------------------------------------------------

@pytest.mark.parametrize("d", [1, 2, 5])
def test_base_points_layout(d):
    g = GridGeometry(d)
    pts = np.array(g.base_points)
    assert pts.sum(axis=0).tolist() == [0, 0]
    assert tuple(pts[4]) == (0, 0)
    assert tuple(pts[0]) == (-d, -d) and tuple(pts[1]) == (0, -d) and tuple(pts[3]) == (-d, 0)
    assert tuple(pts[8]) == (d, d)


def test_geometry_rejects_other_kernels():
    with pytest.raises(ShapeError):
        GridGeometry(1, kernel_size=5)
    with pytest.raises(ShapeError):
        GridGeometry(0)


# -- bilinear ---------------------------------------------------------------

def test_bilinear_integer_coordinate_is_exact(rng):
    plane = rng.standard_normal((4, 5))
    assert bilinear_sample(plane, 3, 2) == plane[2, 3]


def test_bilinear_center_of_cell():
    assert bilinear_sample([[0, 1], [2, 3]], 0.5, 0.5) == 1.5


def test_bilinear_far_outside_is_zero(rng):
    assert bilinear_sample(rng.standard_normal((3, 3)), -5, -5) == 0.0


def test_bilinear_partial_overlap_uses_zero_neighbours():
    # half a pixel left of column 0: only the in-range neighbour counts
    assert bilinear_sample([[4.0]], -0.5, 0.0) == 2.0


@settings(max_examples=60, deadline=None)
@given(st.floats(-2, 6), st.floats(-2, 5))
def test_bilinear_gradient_matches_finite_differences(x, y):
    plane = np.arange(20, dtype=np.float64).reshape(4, 5) ** 1.5
    if min(abs(x - round(x)), abs(y - round(y))) < 1e-3:
        return
    d_plane, d_x, d_y = bilinear_sample_grad(plane, x, y)
    h = 1e-6
    assert d_x == pytest.approx((bilinear_sample(plane, x + h, y) - bilinear_sample(plane, x - h, y)) / (2 * h), abs=1e-5)
    assert d_y == pytest.approx((bilinear_sample(plane, x, y + h) - bilinear_sample(plane, x, y - h)) / (2 * h), abs=1e-5)
    np.testing.assert_allclose(np.sum(d_plane * plane), bilinear_sample(plane, x, y), atol=1e-12)


# -- forward ----------------------------------------------------------------

def test_zero_offsets_bit_equal_to_conv(rng):
    for _ in range(25):
        x, w, b, geom = random_case(rng)
        n, _, h, wd = x.shape
        a, _ = conv2d(x, w, b, dilation=geom.dilation)
        d, _ = deform_conv2d(x, np.zeros((n, 18, h, wd)), w, b, geom)
        assert np.array_equal(a, d)


def test_matches_naive_loop_reference(rng):
    for _ in range(10):
        x, w, b, geom = random_case(rng, max_hw=6)
        n, _, h, wd = x.shape
        off = rng.uniform(-3, 3, size=(n, 18, h, wd))
        out, _ = deform_conv2d(x, off, w, b, geom)
        np.testing.assert_allclose(out, naive_deform_conv2d(x, off, w, b, geom.dilation), rtol=0, atol=1e-12)


def test_single_channel_6x6_reference():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 1, 6, 6))
    w = rng.standard_normal((1, 1, 3, 3))
    off = rng.uniform(-1.5, 1.5, size=(1, 18, 6, 6))
    out, _ = deform_conv2d(x, off, w)
    np.testing.assert_allclose(out, naive_deform_conv2d(x, off, w), rtol=0, atol=1e-12)


@pytest.mark.parametrize("shift", [1, 2])
def test_constant_integer_offsets_shift_the_input(rng, shift):
    x = rng.standard_normal((1, 2, 10, 10))
    w = rng.standard_normal((2, 2, 3, 3))
    geom = GridGeometry(1)
    off = np.zeros((1, 18, 10, 10))
    off[:, 0::2] = shift
    moved, _ = deform_conv2d(x, off, w, None, geom)
    shifted = np.zeros_like(x)
    shifted[..., :-shift] = x[..., shift:]
    ref, _ = conv2d(shifted, w, None, dilation=1)
    inner = slice(2, -2 - shift)
    np.testing.assert_allclose(moved[..., 2:-2, inner], ref[..., 2:-2, inner], rtol=0, atol=1e-12)


def test_linear_in_input_and_weight(rng):
    x1, x2 = rng.standard_normal((2, 1, 2, 5, 5))
    w1, w2 = rng.standard_normal((2, 2, 2, 3, 3))
    off = rng.uniform(-1, 1, size=(1, 18, 5, 5))
    f = lambda x, w: deform_conv2d(x, off, w)[0]
    np.testing.assert_allclose(f(2 * x1 - 3 * x2, w1), 2 * f(x1, w1) - 3 * f(x2, w1), atol=1e-12)
    np.testing.assert_allclose(f(x1, 0.5 * w1 + w2), 0.5 * f(x1, w1) + f(x1, w2), atol=1e-12)


def test_offset_channel_count_checked(rng):
    x = rng.standard_normal((1, 1, 4, 4))
    with pytest.raises(ShapeError):
        deform_conv2d(x, np.zeros((1, 16, 4, 4)), rng.standard_normal((1, 1, 3, 3)))
    with pytest.raises(ShapeError):
        deform_conv2d(x, np.zeros((1, 18, 3, 4)), rng.standard_normal((1, 1, 3, 3)))


# -- backward ---------------------------------------------------------------

def test_offset_gradient_sum_loss_seed0():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((2, 2, 3, 3))
    off = rng.uniform(0.2, 0.4, size=(1, 18, 5, 5))
    out, node = deform_conv2d(x, off, w)
    _, goff, _, _ = deform_conv2d_backward(np.ones_like(out), node)
    numeric = finite_diff_grad(lambda v: deform_conv2d(x, v, w)[0].sum(), off)
    assert relative_error(goff, numeric) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_all_four_gradient_paths(seed):
    for r in check_dconv(seed):
        assert r.max_rel_error < 1e-4, r


def test_zero_grad_out_gives_zero_gradients(rng):
    off = rng.uniform(0.2, 0.4, size=(1, 18, 4, 4))
    out, node = deform_conv2d(rng.standard_normal((1, 2, 4, 4)), off, rng.standard_normal((1, 2, 3, 3)), np.ones(1))
    for g in deform_conv2d_backward(np.zeros_like(out), node):
        assert not g.any()


def test_zero_weight_kills_input_and_offset_gradients(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    off = rng.uniform(0.2, 0.4, size=(1, 18, 4, 4))
    out, node = deform_conv2d(x, off, np.zeros((1, 2, 3, 3)))
    gx, goff, gw, _ = deform_conv2d_backward(np.ones_like(out), node)
    assert not gx.any() and not goff.any()
    assert np.abs(gw).max() > 0


def test_backward_consumes_saved_state(rng):
    out, node = deform_conv2d(rng.standard_normal((1, 1, 3, 3)), np.zeros((1, 18, 3, 3)), rng.standard_normal((1, 1, 3, 3)))
    deform_conv2d_backward(np.ones_like(out), node)
    with pytest.raises(ContractError):
        deform_conv2d_backward(np.ones_like(out), node)


def test_naive_bilinear_oracle_agrees_with_library():
    plane = [[1.0, -2.0, 0.5], [3.0, 0.25, -1.0]]
    for x, y in [(0.3, 0.7), (-0.4, 0.2), (2.6, 1.5), (1.0, 1.0)]:
        assert naive_bilinear(plane, x, y) == pytest.approx(bilinear_sample(plane, x, y), abs=1e-15)
