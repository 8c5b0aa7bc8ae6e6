import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pmfn.errors import ValidationError
from pmfn.imgreg import RegParams
from pmfn.selffusion import (FusionParams, fusion_weights, neighbour_indices, patch_msd,
                             self_fuse, sobel_gradient)

from conftest import ramp, smooth_image

FAST = FusionParams(radius=2, reg=RegParams(pyramid_levels=2, iterations_per_level=10))


def test_radius_zero_returns_center_exactly(rng):
    stack = [rng.uniform(0, 1, (16, 16)) for _ in range(5)]
    out = self_fuse(stack, 2, FusionParams(radius=0))
    assert np.array_equal(out, stack[2])


def test_identical_slices_fuse_to_the_slice():
    img = smooth_image((24, 24), seed=1)
    out = self_fuse([img] * 5, 2, FAST)
    assert np.allclose(out, img, atol=1e-12)


def test_neighbours_truncate_at_volume_ends():
    assert neighbour_indices(10, 0, 3) == [0, 1, 2, 3]
    assert neighbour_indices(10, 9, 2) == [7, 8, 9]
    assert neighbour_indices(10, 5, 7) == list(range(10))
    assert neighbour_indices(10, 4, 0) == [4]


def test_equidistant_neighbour_swap_is_stable():
    base = smooth_image((24, 24), seed=3)
    a = smooth_image((24, 24), seed=4) * 0.2 + base
    b = smooth_image((24, 24), seed=5) * 0.2 + base
    stack1 = [a, base, base, base, b]
    stack2 = [b, base, base, base, a]
    out1 = self_fuse(stack1, 2, FAST)
    out2 = self_fuse(stack2, 2, FAST)
    assert np.allclose(out1, out2, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), k=st.integers(1, 6), p=st.integers(0, 3),
       h=st.one_of(st.none(), st.floats(1e-3, 10.0)))
def test_vote_stays_within_atlas_range_and_weights_positive(seed, k, p, h):
    rng = np.random.default_rng(seed)
    center = rng.uniform(0, 1, (10, 12))
    atlases = np.concatenate([center[None], rng.uniform(0, 1, (k, 10, 12))])
    params = FusionParams(patch_radius=p, similarity_bandwidth=h)
    w = fusion_weights(center, atlases, params)
    assert np.all(w.sum(axis=0) > 0)
    assert np.all(w[0] == 1.0)  # the centre matches itself exactly: the largest weight
    fused = (w * atlases).sum(axis=0) / w.sum(axis=0)
    assert np.all(fused >= atlases.min(axis=0) - 1e-12)
    assert np.all(fused <= atlases.max(axis=0) + 1e-12)


def test_self_fuse_output_within_range_of_inputs(rng):
    stack = [smooth_image((24, 24), seed=s) for s in range(5)]
    out = self_fuse(stack, 2, FAST)
    # warped values stay within each slice's own range (bilinear, clamped)
    lo = min(s.min() for s in stack)
    hi = max(s.max() for s in stack)
    assert lo - 1e-12 <= out.min() and out.max() <= hi + 1e-12


def test_weights_follow_patch_similarity():
    center = np.zeros((8, 8))
    close = np.full((8, 8), 0.05)
    far = np.full((8, 8), 0.5)
    w = fusion_weights(center, np.stack([close, far]), FusionParams(similarity_bandwidth=0.1))
    assert np.all(w[0] > w[1])
    # exp(-msd/(2h^2)) ratio, patch mean of a constant difference is that difference squared
    ratio = np.exp(-(0.05 ** 2) / 0.02) / np.exp(-(0.5 ** 2) / 0.02)
    assert np.allclose(w[0] / w[1], ratio)


def test_distance_taper_downweights_far_slices():
    c = np.zeros((6, 6))
    atlases = np.stack([c, c, c])
    w = fusion_weights(c, atlases, FusionParams(distance_sigma=1.0), offsets=[0, 1, 3])
    assert w[0, 0, 0] > w[1, 0, 0] > w[2, 0, 0]
    assert np.isclose(w[1, 0, 0] / w[0, 0, 0], np.exp(-0.5))


def test_patch_msd_is_mean_over_window():
    a = np.zeros((7, 7))
    b = np.zeros((7, 7))
    b[3, 3] = 3.0
    m = patch_msd(a, b, 1)
    assert np.isclose(m[3, 3], 9.0 / 9)
    assert np.isclose(m[0, 0], 0.0)


def test_errors():
    with pytest.raises(ValidationError):
        self_fuse([], 0)
    with pytest.raises(ValidationError):
        self_fuse([np.zeros((4, 4))], 1)
    with pytest.raises(ValidationError):
        self_fuse([np.zeros((4, 4))], 0, FusionParams(radius=0, include_center=False))
    with pytest.raises(ValidationError):
        FusionParams(radius=-1)
    with pytest.raises(ValidationError):
        FusionParams(similarity_bandwidth=0.0)


# ---------------------------------------------------------------- Sobel

def test_sobel_constant_is_zero():
    assert np.array_equal(sobel_gradient(np.full((5, 6), 3.0)), np.zeros((5, 6)))


def test_sobel_unit_ramp_gives_eight():
    g = sobel_gradient(ramp(9, 9, 1.0, 0.0))
    assert np.allclose(g[1:-1, 1:-1], 8.0)


def test_sobel_step_edge():
    img = np.zeros((9, 10))
    img[:, 5:] = 1.0
    g = sobel_gradient(img)
    assert np.allclose(g[:, 4], 4.0) and np.allclose(g[:, 5], 4.0)
    assert np.all(g[:, :3] == 0) and np.all(g[:, 7:] == 0)
    assert g.max() == 4.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), alpha=st.floats(1e-3, 1e3))
def test_sobel_positive_homogeneity(seed, alpha):
    img = np.random.default_rng(seed).standard_normal((8, 9))
    assert np.allclose(sobel_gradient(alpha * img), alpha * sobel_gradient(img), rtol=1e-10)


def test_sobel_nonnegative_and_size_check(rng):
    assert np.all(sobel_gradient(rng.standard_normal((6, 6))) >= 0)
    with pytest.raises(ValidationError):
        sobel_gradient(np.zeros((2, 5)))
