import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from thzlab.metrics import gaussian_window, psnr, ssim


def test_psnr_examples(rng):
    x = rng.uniform(size=(16, 16))
    assert psnr(x, x) == math.inf
    y = np.zeros((4, 4))
    assert psnr(y, y + 0.1) == pytest.approx(20.0)
    with pytest.raises(ValueError):
        psnr(np.zeros((3, 3)), np.zeros((3, 4)))


@given(st.integers(0, 2 ** 31))
def test_psnr_formula_and_symmetry(seed):
    a, b = np.random.default_rng(seed).uniform(size=(2, 9, 7))
    mse = sum((a.ravel()[i] - b.ravel()[i]) ** 2 for i in range(a.size)) / a.size
    assert abs(psnr(a, b) - 10 * math.log10(1 / mse)) <= 1e-10
    assert psnr(a, b) == psnr(b, a)


def test_window_normalized():
    w = gaussian_window()
    assert w.shape == (11, 11) and w.sum() == pytest.approx(1.0)
    assert np.allclose(w, w.T)


def test_ssim_identical_is_one(rng):
    x = rng.uniform(size=(1, 20, 24))
    assert ssim(x, x) == 1.0


def test_ssim_anticorrelated_binary(rng):
    x = (rng.uniform(size=(32, 32)) > 0.5).astype(float)
    assert ssim(x, 1 - x) < 0


def test_ssim_constant_images_closed_form():
    a, b = 0.5, 0.5 + 1e-3
    c1 = 0.01 ** 2
    expect = (2 * a * b + c1) / (a * a + b * b + c1)
    assert ssim(np.full((16, 16), a), np.full((16, 16), b)) == pytest.approx(expect, abs=1e-12)


@given(st.integers(0, 2 ** 31))
def test_ssim_symmetric_and_bounded(seed):
    a, b = np.random.default_rng(seed).uniform(size=(2, 13, 15))
    s = ssim(a, b)
    assert s == pytest.approx(ssim(b, a), abs=1e-15)
    assert -1 <= s <= 1


def test_ssim_too_small():
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 12)), np.zeros((10, 12)))
