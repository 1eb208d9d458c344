import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from geodrag.features import (FeatureExtractor, MaskedDifference, PatchBoundsError, PatchTerm,
                              box_extractor, detect_points, loss_gradient, patch_in_bounds,
                              patch_l1, random_conv_extractor, sample_field, scatter_patch)

small = st.floats(-10, 10, allow_nan=False)


@pytest.mark.parametrize("layers, size", [(1, 3), (2, 3), (1, 5)])
def test_conv_matches_nested_loops(layers, size):
    rng = np.random.default_rng(layers * 10 + size)
    z = rng.standard_normal((7, 9, 3))
    F = random_conv_extractor(3, 2, size=size, layers=layers, seed=1)
    want = z
    for K in F.kernels:
        want = oracles.conv_nested(want, K)
    assert np.allclose(F(z), want, atol=1e-12)


def test_box_extractor_is_local_mean():
    z = np.random.default_rng(0).standard_normal((6, 6, 2))
    f = box_extractor(2)(z)
    assert np.allclose(f[2, 3], z[1:4, 2:5].mean(axis=(0, 1)))
    assert np.allclose(f[0, 0], z[0:2, 0:2].sum(axis=(0, 1)) / 9)   # zero padding


def test_extractor_adjoint_dot_product():
    rng = np.random.default_rng(5)
    F = random_conv_extractor(4, 3, size=3, layers=2, seed=2)
    x, y = rng.standard_normal((8, 10, 4)), rng.standard_normal((8, 10, 3))
    assert np.isclose(np.vdot(F(x), y), np.vdot(x, F.adjoint(y)), rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 9), st.floats(0, 7), st.integers(0, 1))
def test_sampling_matches_scalar_bilinear(cx, cy, r):
    assume(patch_in_bounds((cx, cy), r, (8, 10)))
    f = np.random.default_rng(0).standard_normal((8, 10, 2))
    assert np.allclose(sample_field(f, (cx, cy), r), oracles.patch_nested(f, cx, cy, r), atol=1e-12)


def test_integral_centres_are_exact_including_far_edge():
    f = np.random.default_rng(1).standard_normal((8, 10, 3))
    assert np.array_equal(sample_field(f, (4, 3), 2), f[1:6, 2:7])
    assert np.array_equal(sample_field(f, (7, 5), 2), f[3:8, 5:10])


def test_out_of_bounds_patch_raises():
    f = np.zeros((8, 8, 1))
    for c in [(1.5, 4), (4, 6.01), (np.nan, 3)]:
        with pytest.raises(PatchBoundsError):
            sample_field(f, c, 2)


@settings(max_examples=40, deadline=None)
@given(st.floats(2, 7), st.floats(2, 5), st.integers(0, 2))
def test_scatter_is_adjoint_of_sample(cx, cy, r):
    assume(patch_in_bounds((cx, cy), r, (8, 10)))
    rng = np.random.default_rng(3)
    f, g = rng.standard_normal((8, 10, 2)), rng.standard_normal((2 * r + 1, 2 * r + 1, 2))
    out = np.zeros_like(f)
    scatter_patch(g, (cx, cy), r, out)
    assert np.isclose(np.vdot(sample_field(f, (cx, cy), r), g), np.vdot(f, out), rtol=1e-10, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(float, (3, 3, 2), elements=small), arrays(float, (3, 3, 2), elements=small),
       arrays(float, (3, 3, 2), elements=small))
def test_patch_l1_is_a_metric(a, b, c):
    assert patch_l1(a, a) == 0
    assert patch_l1(a, b) == patch_l1(b, a) >= 0
    assert patch_l1(a, c) <= patch_l1(a, b) + patch_l1(b, c) + 1e-9


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_features_are_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    F = random_conv_extractor(2, 3, seed=seed)
    x, y = rng.standard_normal((5, 5, 2)), rng.standard_normal((5, 5, 2))
    assert np.allclose(F(a * x + b * y), a * F(x) + b * F(y), atol=1e-10)


def test_loss_gradient_l1_subgradient_at_zero_is_zero():
    z = np.zeros((6, 6, 1))
    loss, g = loss_gradient(z, FeatureExtractor(), [PatchTerm((3, 3), 1, np.zeros((3, 3, 1)))])
    assert loss == 0 and not g.any()


def test_masked_difference_through_transform():
    rng = np.random.default_rng(0)
    z, ref = rng.standard_normal((5, 5, 2)), rng.standard_normal((5, 5, 2))
    keep = np.zeros((5, 5))
    keep[:, :2] = 1
    A = 0.5
    md = MaskedDifference(ref, keep, weight=2.0, transform=lambda v: A * v, adjoint=lambda v: A * v)
    loss, g = loss_gradient(z, FeatureExtractor(), masked=md)
    assert np.isclose(loss, 2.0 * np.abs((A * z - ref)[:, :2]).sum())
    assert np.allclose(g[:, :2], 2.0 * A * np.sign(A * z - ref)[:, :2]) and not g[:, 2:].any()


def test_grad_mask_zeroes_cells_but_not_loss():
    z = np.random.default_rng(0).standard_normal((8, 8, 1))
    term = [PatchTerm((4, 4), 2, np.zeros((5, 5, 1)))]
    m = np.ones((8, 8))
    m[3:6, 3:6] = 0
    l1, g1 = loss_gradient(z, FeatureExtractor(), term)
    l2, g2 = loss_gradient(z, FeatureExtractor(), term, grad_mask=m)
    assert l1 == l2
    assert not g2[3:6, 3:6].any() and np.array_equal(g2[m > 0], g1[m > 0])


# --- detection ------------------------------------------------------------------

@pytest.mark.parametrize("dx, dy", [(0, 0), (3, -2), (-5, 4), (7, 7)])
def test_detection_equivariant_to_translation(dx, dy):
    rng = np.random.default_rng(11)
    f = rng.standard_normal((24, 24, 6))
    moved = np.roll(f, (dy, dx), axis=(0, 1))
    pts = [(8, 9), (12.4, 11.6)]
    got = detect_points(f, moved, pts)
    assert [d.point for d in got] == [(8 + dx, 9 + dy), (12 + dx, 12 + dy)]
    assert all(np.isclose(d.similarity, 1.0) and d.ties == 1 for d in got)


def test_detection_tie_break_and_errors():
    f = np.ones((4, 5, 2))
    d = detect_points(f, f, [(3, 2)])[0]
    assert d.point == (0, 0) and d.ties == 20
    g = f.copy()
    g[0, 0] = 0
    assert detect_points(f, g, [(3, 2)])[0].point == (1, 0)   # zero vectors never win
    with pytest.raises(ValueError, match="zero-norm"):
        detect_points(g, f, [(0, 0)])
    with pytest.raises(PatchBoundsError):
        detect_points(f, f, [(9, 9)])
