import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bocf.evaluate import rae
from bocf.statistical import (
    FrameworkParams,
    NoEvidenceError,
    estimate_framework,
    general_gray_world,
    get_method,
    gray_edge,
    gray_world,
    minkowski_norms,
    shades_of_gray,
    white_patch,
)
from bocf.synth import SceneSpec, generate_synthetic_scene

from oracles import naive_minkowski

small_images = arrays(
    np.float64,
    st.tuples(st.integers(2, 8), st.integers(2, 8), st.just(3)),
    elements=st.floats(0.0, 1.0, allow_nan=False),
)


def uniform(color, size=6):
    return np.broadcast_to(np.asarray(color, float), (size, size, 3)).copy()


def test_gray_world_is_normalized_mean():
    img = np.random.default_rng(0).random((5, 7, 3))
    mean = img.reshape(-1, 3).mean(axis=0)
    np.testing.assert_allclose(gray_world(img), mean / mean.sum(), rtol=1e-13)


def test_white_patch_recovers_illuminant():
    illum = np.array([0.7, 0.9, 0.4])
    img, _ = generate_synthetic_scene(SceneSpec(9, white_patch=True, seed=3), illum, 32)
    np.testing.assert_allclose(white_patch(img), illum / illum.sum(), rtol=1e-14)


def test_uniform_image_gray_world():
    c = np.array([0.2, 0.5, 0.1])
    np.testing.assert_allclose(gray_world(uniform(c)), c / c.sum(), rtol=1e-14)


def test_gray_edge_uniform_has_no_evidence():
    with pytest.raises(NoEvidenceError):
        gray_edge(uniform([0.3, 0.3, 0.3]), 1, 0)
    with pytest.raises(NoEvidenceError):
        gray_edge(uniform([0.3, 0.3, 0.3]), 2, 1.0)


def test_zero_image_has_no_evidence():
    with pytest.raises(NoEvidenceError):
        gray_world(np.zeros((4, 4, 3)))


def test_four_by_four_first_order_l2():
    img = np.random.default_rng(11).random((4, 4, 3))
    expected = naive_minkowski(img, 1, 2.0)
    got = estimate_framework(img, FrameworkParams(1, 2.0, 0.0))
    np.testing.assert_allclose(got, expected / expected.sum(), rtol=1e-12)


def test_shades_of_gray_p1_is_gray_world():
    img = np.random.default_rng(1).random((9, 9, 3))
    assert np.array_equal(shades_of_gray(img, 1), gray_world(img))


def test_power_means_increase_toward_max():
    rng = np.random.default_rng(2)
    ps = (1, 2, 8, 32, 128, 1024)
    for _ in range(20):
        img = rng.random((16, 16, 3))
        norms = [minkowski_norms(img, FrameworkParams(0, p, 0.0)) for p in ps]
        for lo, hi in zip(norms, norms[1:]):
            assert np.all(hi >= lo * (1 - 1e-12))
        peak = img.reshape(-1, 3).max(axis=0)
        np.testing.assert_allclose(norms[-1], peak, rtol=1e-2)
        assert rae(white_patch(img), shades_of_gray(img, 1024)) < rae(white_patch(img), gray_world(img)) + 1e-12


@pytest.mark.parametrize("n", [0, 1, 2])
@pytest.mark.parametrize("p", [1.0, 2.0, 6.5, math.inf])
def test_matches_double_loop(n, p):
    rng = np.random.default_rng(n * 10 + int(min(p, 99)))
    img = rng.random((6, 5, 3))
    np.testing.assert_allclose(minkowski_norms(img, FrameworkParams(n, p, 0.0)),
                               naive_minkowski(img, n, p), rtol=1e-10)


@settings(max_examples=40, deadline=None)
@given(small_images, st.floats(0.01, 100.0))
def test_scale_invariance(img, c):
    params = FrameworkParams(0, 3.0, 0.0)
    try:
        base = estimate_framework(img, params)
    except NoEvidenceError:
        return
    np.testing.assert_allclose(estimate_framework(c * img, params), base, rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(small_images, st.permutations([0, 1, 2]), st.sampled_from([(0, 1.0), (1, 2.0), (2, 4.0)]))
def test_channel_equivariance(img, perm, np_):
    params = FrameworkParams(np_[0], np_[1], 0.0)
    try:
        base = estimate_framework(img, params)
    except NoEvidenceError:
        return
    np.testing.assert_allclose(estimate_framework(img[:, :, perm], params), base[perm], rtol=1e-12)


def test_gaussian_smoothing_paths():
    img = np.random.default_rng(5).random((20, 20, 3))
    for fn in (lambda i: general_gray_world(i, 2, 1.5), lambda i: gray_edge(i, 2, 1.0)):
        est = fn(img)
        assert est.shape == (3,) and abs(est.sum() - 1) < 1e-12 and np.all(est > 0)


def test_params_validation():
    with pytest.raises(ValueError):
        FrameworkParams(3, 1, 0)
    with pytest.raises(ValueError):
        FrameworkParams(0, 0, 0)
    with pytest.raises(ValueError):
        FrameworkParams(0, 1, -1)


def test_get_method():
    img = np.random.default_rng(6).random((8, 8, 3))
    assert np.array_equal(get_method("gray-world")(img), gray_world(img))
    assert np.array_equal(get_method("gray-edge", 2, 1)(img), gray_edge(img, 2, 1))
    with pytest.raises(ValueError, match="requires --p"):
        get_method("shades-of-gray")
    with pytest.raises(ValueError, match="unknown"):
        get_method("bright-pixels")
