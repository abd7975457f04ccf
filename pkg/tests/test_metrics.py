import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from texgs.metrics import C1, PSNR_CAP, MetricReport, gaussian_window, psnr, ssim, ssim_map


def sk_ssim(a, b):
    return structural_similarity(a, b, data_range=1.0, channel_axis=-1, gaussian_weights=True,
                                 sigma=1.5, use_sample_covariance=False)


def test_psnr_identical_is_capped():
    a = np.random.default_rng(0).random((8, 8, 3))
    assert psnr(a, a) == PSNR_CAP == 99.0


def test_psnr_mse_point_one_squared():
    a = np.zeros((10, 10, 3))
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)


def test_psnr_symmetric(rng):
    a, b = rng.random((2, 9, 7, 3))
    assert psnr(a, b) == psnr(b, a)


def test_psnr_decreases_with_noise(rng):
    a = rng.random((16, 16, 3))
    n = rng.normal(size=a.shape)
    vals = [psnr(a, a + s * n) for s in (0.01, 0.02, 0.05, 0.1, 0.3)]
    assert all(x > y for x, y in zip(vals, vals[1:]))


def test_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def test_window_normalized():
    w = gaussian_window()
    assert w.size == 11 and w.sum() == pytest.approx(1.0) and w.argmax() == 5


def test_ssim_self_is_one(rng):
    a = rng.random((16, 16, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_constant_images_closed_form():
    # flat images: the structure term is C2/C2 and only luminance remains
    a = np.full((12, 12, 3), 0.5)
    b = np.full((12, 12, 3), 0.25)
    want = (2 * 0.5 * 0.25 + C1) / (0.5**2 + 0.25**2 + C1)
    assert ssim(a, b) == pytest.approx(want, rel=1e-12)


@pytest.mark.parametrize("shape", [(11, 11, 3), (16, 20, 3), (33, 17, 1)])
def test_ssim_matches_skimage(rng, shape):
    a = rng.random(shape)
    b = np.clip(a + rng.normal(scale=0.1, size=shape), 0, 1)
    assert ssim(a, b) == pytest.approx(sk_ssim(a, b), abs=1e-10)


def test_ssim_symmetric(rng):
    a, b = rng.random((2, 14, 14, 3))
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-14)


def test_ssim_bounded_over_random_pairs(rng):
    for _ in range(1000):
        a, b = rng.random((2, 11, 11, 1))
        assert -1.0 <= ssim(a, b) <= 1.0


def test_ssim_too_small():
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 12, 3)), np.zeros((10, 12, 3)))


def test_ssim_grad_matches_finite_differences(rng):
    a = rng.random((13, 14, 2))
    b = rng.random((13, 14, 2))
    S, back = ssim_map(a, b, return_grad=True)
    gS = rng.normal(size=S.shape)
    g = back(gS)
    h = 1e-6
    for _ in range(30):
        idx = tuple(rng.integers(0, s) for s in a.shape)
        ap, am = a.copy(), a.copy()
        ap[idx] += h
        am[idx] -= h
        fd = (np.sum(gS * ssim_map(ap, b)) - np.sum(gS * ssim_map(am, b))) / (2 * h)
        assert g[idx] == pytest.approx(fd, rel=1e-5, abs=1e-8)


@settings(max_examples=25)
@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_psnr_of_uniform_offset(x, d):
    a = np.full((4, 4, 3), x)
    b = a + d
    if d == 0:
        assert psnr(a, b) == PSNR_CAP
    else:
        assert psnr(a, b) == pytest.approx(min(PSNR_CAP, -20 * np.log10(d)), abs=1e-7)


def test_report_summary(rng):
    rep = MetricReport(n_gaussians=3, texel_count=48, bytes=100)
    a = rng.random((12, 12, 3))
    rep.add("x", a, a)
    s = rep.summary()
    assert s["psnr_mean"] == PSNR_CAP and s["ssim_mean"] == pytest.approx(1.0)
    assert rep.rows()[0][0] == "x"
