"""The numba kernels and their numpy fallbacks must agree exactly."""

import numpy as np
import pytest

from adapterforge import kernels

pytestmark = pytest.mark.skipif(not kernels._HAVE_NUMBA,
                                reason="numba backend unavailable")


def _rand(shape, seed):
    return np.random.default_rng(seed).standard_normal(shape).astype(np.float32)


@pytest.mark.parametrize("k,stride", [(1, 1), (3, 1), (3, 2), (1, 2)])
def test_im2col_matches(k, stride):
    xp = _rand((2, 3, 10, 10), 0)
    assert np.array_equal(kernels._np_im2col(xp, k, stride),
                          kernels._nb_im2col(xp, k, stride))


@pytest.mark.parametrize("k,stride", [(1, 1), (3, 1), (3, 2)])
def test_col2im_matches(k, stride):
    n, c, hp, wp = 2, 3, 9, 9
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    dcols = _rand((n * ho * wo, c * k * k), 1)
    assert np.array_equal(kernels._np_col2im(dcols, n, c, hp, wp, k, stride),
                          kernels._nb_col2im(dcols, n, c, hp, wp, k, stride))


def test_maxpool_matches_including_ties():
    x = _rand((2, 2, 8, 8), 2)
    x[0, 0, 0, 0] = x[0, 0, 0, 1] = 7.0  # tie: first in window order must win
    y1, i1 = kernels._np_maxpool2x2(x)
    y2, i2 = kernels._nb_maxpool2x2(x)
    assert np.array_equal(y1, y2)
    assert np.array_equal(i1, i2)
    g = _rand((2, 2, 4, 4), 3)
    assert np.array_equal(kernels._np_maxpool2x2_grad(g, i1),
                          kernels._nb_maxpool2x2_grad(g, i2))


def test_nms_matches():
    rng = np.random.default_rng(4)
    mag = np.abs(rng.standard_normal((20, 20))).astype(np.float32)
    dirbin = rng.integers(0, 4, size=(20, 20)).astype(np.uint8)
    assert np.array_equal(kernels._np_nms(mag, dirbin), kernels._nb_nms(mag, dirbin))


def test_hysteresis_matches():
    rng = np.random.default_rng(5)
    weak = rng.random((30, 30)) < 0.3
    strong = weak & (rng.random((30, 30)) < 0.2)
    assert np.array_equal(kernels._np_hysteresis(strong, weak),
                          kernels._nb_hysteresis(strong, weak))


def test_hysteresis_isolated_weak_dropped():
    weak = np.zeros((5, 5), bool)
    weak[0, 0] = True   # no strong seed anywhere nearby
    weak[2, 2] = True
    strong = np.zeros((5, 5), bool)
    strong[2, 2] = True
    for impl in (kernels._np_hysteresis, kernels._nb_hysteresis):
        out = impl(strong, weak)
        assert out[2, 2] and not out[0, 0]
