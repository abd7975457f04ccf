import numpy as np
import pytest

from texgs.loss import LossWeights, photometric_loss


def test_identical_images(rng):
    a = rng.random((16, 16, 3))
    loss, grad = photometric_loss(a, a)
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.abs(grad).max() < 1e-12


def test_pure_l1_offset():
    a = np.zeros((12, 12, 3))
    loss, grad = photometric_loss(a + 0.1, a, LossWeights(lam=1.0))
    assert loss == pytest.approx(0.1)
    np.testing.assert_allclose(grad, 1.0 / a.size)


def test_lambda_validated():
    with pytest.raises(ValueError):
        LossWeights(lam=1.5)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        photometric_loss(np.zeros((12, 12, 3)), np.zeros((12, 13, 3)))


@pytest.mark.parametrize("lam", [0.0, 0.8])
def test_gradient_matches_finite_differences(rng, lam):
    r = rng.random((16, 16, 3))
    g = rng.random((16, 16, 3))
    w = LossWeights(lam=lam)
    _, grad = photometric_loss(r, g, w)
    h = 1e-6
    for _ in range(40):
        idx = tuple(rng.integers(0, s) for s in r.shape)
        if abs(r[idx] - g[idx]) < 1e-4:
            continue
        rp, rm = r.copy(), r.copy()
        rp[idx] += h
        rm[idx] -= h
        fd = (photometric_loss(rp, g, w)[0] - photometric_loss(rm, g, w)[0]) / (2 * h)
        assert grad[idx] == pytest.approx(fd, rel=1e-5, abs=1e-9)
