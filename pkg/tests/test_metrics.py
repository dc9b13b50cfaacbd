import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from _oracles import probe_fd, ssim_loop
from adlift.metrics import linf, psnr, ssim, ssim_with_grad
from adlift.render import render
from adlift.scene import bundled_cameras, bundled_scene


def test_psnr_identical_is_capped():
    a = np.random.default_rng(0).uniform(size=(16, 16, 3))
    assert psnr(a, a) == 99.0


def test_psnr_uniform_residual():
    a = np.full((16, 16, 3), 0.5)
    assert psnr(a + 8 / 255, a) == pytest.approx(20 * math.log10(255 / 8), abs=1e-9)
    assert psnr(a + 8 / 255, a) == pytest.approx(30.07, abs=0.01)


def test_ssim_identical_is_one():
    a = np.random.default_rng(1).uniform(size=(24, 20, 3))
    assert abs(ssim(a, a) - 1.0) < 1e-12


def test_ssim_checkerboard_anticorrelated():
    y, x = np.mgrid[:16, :16]
    a = np.repeat(((x + y) % 2).astype(float)[:, :, None], 3, axis=2)
    assert ssim(a, 1 - a) < 0


def test_ssim_constant_offset_on_bundled_render():
    img = render(bundled_scene(), bundled_cameras()[0])
    assert ssim(np.clip(img + 0.01, 0, 1), img) > 0.99


@pytest.mark.parametrize("seed", range(3))
def test_ssim_matches_direct_loop(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=(14, 17, 3))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    assert ssim(a, b) == pytest.approx(ssim_loop(a, b), abs=1e-12)


def test_ssim_gradient_finite_differences():
    rng = np.random.default_rng(4)
    a = rng.uniform(size=(16, 16, 3))
    b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
    _, g = ssim_with_grad(a, b)
    assert probe_fd(lambda x: ssim(x, b), a, g, n_probe=20) < 1e-5


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6))
def test_ssim_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(2, 12, 12, 3))
    s = ssim(a, b)
    assert s == pytest.approx(ssim(b, a), abs=1e-12)
    assert -1.0 <= s <= 1.0


def test_small_or_mismatched_inputs_rejected():
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))
    with pytest.raises(ValueError):
        psnr(np.zeros((8, 8, 3)), np.zeros((8, 9, 3)))


def test_linf():
    a = np.zeros((4, 4, 3))
    b = a.copy()
    b[1, 2, 0] = -0.25
    assert linf(a, b) == 0.25
