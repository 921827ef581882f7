import numpy as np
import pytest

from clipgs.metrics import (SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW,
                            compute_loss, dssim_with_grad, l1_loss, psnr, ssim)


def reference_ssim(x, y):
    """Independent oracle: direct sliding-window loop over the valid region."""
    t = np.arange(SSIM_WINDOW, dtype=np.float64) - (SSIM_WINDOW - 1) / 2.0
    g1 = np.exp(-(t ** 2) / (2 * SSIM_SIGMA ** 2))
    g1 /= g1.sum()
    win = np.outer(g1, g1)
    if x.ndim == 2:
        x, y = x[:, :, None], y[:, :, None]
    h, w, nc = x.shape
    vals = []
    for c in range(nc):
        acc = []
        for i in range(h - SSIM_WINDOW + 1):
            for j in range(w - SSIM_WINDOW + 1):
                px = x[i:i + SSIM_WINDOW, j:j + SSIM_WINDOW, c]
                py = y[i:i + SSIM_WINDOW, j:j + SSIM_WINDOW, c]
                mx = np.sum(win * px)
                my = np.sum(win * py)
                vx = np.sum(win * px * px) - mx * mx
                vy = np.sum(win * py * py) - my * my
                cov = np.sum(win * px * py) - mx * my
                acc.append(((2 * mx * my + SSIM_C1) * (2 * cov + SSIM_C2))
                           / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)))
        vals.append(np.mean(acc))
    return float(np.mean(vals))


class TestL1:
    def test_identical(self):
        x = np.random.default_rng(0).random((8, 8, 3))
        loss, grad = l1_loss(x, x)
        assert loss == 0.0
        assert np.all(grad == 0.0)

    def test_uniform_offset(self):
        rng = np.random.default_rng(1)
        t = rng.random((8, 8, 3)) * 0.5
        loss, _ = l1_loss(t + 0.1, t)
        assert loss == pytest.approx(0.1, abs=1e-12)

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(2)
        a, b = rng.random((5, 7, 3)), rng.random((5, 7, 3))
        loss, grad = l1_loss(a, b)
        acc = 0.0
        for v, u in zip(a.ravel(), b.ravel()):
            acc += abs(v - u)
        assert loss == pytest.approx(acc / a.size, abs=1e-12)
        assert np.allclose(grad, np.sign(a - b) / a.size)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            l1_loss(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


class TestPsnr:
    def test_identical_is_infinite(self):
        x = np.random.default_rng(3).random((8, 8, 3))
        assert psnr(x, x) == float("inf")

    def test_uniform_error(self):
        x = np.full((16, 16, 3), 0.5)
        assert psnr(x + 0.1, x) == pytest.approx(20.0, abs=1e-12)

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(4)
        a, b = rng.random((6, 6, 3)), rng.random((6, 6, 3))
        mse = 0.0
        for v, u in zip(a.ravel(), b.ravel()):
            mse += (v - u) ** 2
        mse /= a.size
        assert psnr(a, b) == pytest.approx(-10 * np.log10(mse), abs=1e-9)

    def test_monotone_in_mse(self):
        base = np.full((16, 16, 3), 0.5)
        values = [psnr(base + e, base) for e in (0.01, 0.05, 0.1, 0.2)]
        assert all(a > b for a, b in zip(values, values[1:]))


class TestSsim:
    def test_self_similarity_is_one(self):
        x = np.random.default_rng(5).random((16, 16, 3))
        assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)

    def test_constant_images_closed_form(self):
        x = np.full((16, 16, 3), 0.5)
        y = np.full((16, 16, 3), 0.6)
        expected = (2 * 0.5 * 0.6 + SSIM_C1) / (0.5 ** 2 + 0.6 ** 2 + SSIM_C1)
        assert ssim(x, y) == pytest.approx(expected, abs=1e-9)

    def test_symmetry(self):
        rng = np.random.default_rng(6)
        a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_matches_reference_loop(self):
        rng = np.random.default_rng(7)
        a, b = rng.random((14, 15, 3)), rng.random((14, 15, 3))
        assert ssim(a, b) == pytest.approx(reference_ssim(a, b), abs=1e-6)

    def test_too_small_rejected(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


class TestDssim:
    def test_identical(self):
        x = np.random.default_rng(8).random((16, 16, 3))
        val, grad = dssim_with_grad(x, x)
        assert val == pytest.approx(0.0, abs=1e-12)
        assert np.abs(grad).max() < 1e-12

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        x = rng.random((16, 16, 3))
        y = rng.random((16, 16, 3))
        _, grad = dssim_with_grad(x, y)
        h = 1e-6
        idx = [(0, 0, 0), (5, 7, 1), (15, 15, 2), (8, 3, 0), (11, 12, 2)]
        for i, j, c in idx:
            xp = x.copy()
            xp[i, j, c] += h
            xm = x.copy()
            xm[i, j, c] -= h
            fd = (dssim_with_grad(xp, y)[0] - dssim_with_grad(xm, y)[0]) / (2 * h)
            assert grad[i, j, c] == pytest.approx(fd, rel=1e-3, abs=1e-10)

    def test_anticorrelated_above_half(self):
        rng = np.random.default_rng(10)
        y = rng.random((20, 20, 3))
        val, _ = dssim_with_grad(1.0 - y, y)
        assert val > 0.5


class TestCombinedLoss:
    def test_lambda_identity(self):
        rng = np.random.default_rng(11)
        a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
        rep, grad = compute_loss(a, b, lam=0.2)
        assert rep.total == pytest.approx(0.8 * rep.l1 + 0.2 * rep.d_ssim, abs=1e-12)
        assert grad.shape == a.shape

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(12)
        a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
        _, grad = compute_loss(a, b, lam=0.2)
        h = 1e-6
        for i, j, c in [(2, 2, 0), (9, 14, 1), (13, 4, 2)]:
            ap = a.copy()
            ap[i, j, c] += h
            am = a.copy()
            am[i, j, c] -= h
            fd = (compute_loss(ap, b, 0.2)[0].total
                  - compute_loss(am, b, 0.2)[0].total) / (2 * h)
            assert grad[i, j, c] == pytest.approx(fd, rel=1e-3, abs=1e-9)
