import numpy as np
import pytest
from skimage.metrics import structural_similarity as sk_ssim

from splatnvs import losses as ls
from splatnvs.tensor import engine as T
from splatnvs.tensor.engine import Tensor


def reference_ssim(a, b):
    return sk_ssim(a, b, channel_axis=2, gaussian_weights=True, sigma=1.5,
                   use_sample_covariance=False, data_range=1.0)


class TestSSIMOracle:
    def test_matches_reference_on_random_pairs(self, rng):
        for _ in range(5):
            a = rng.random((40, 36, 3))
            b = np.clip(a + 0.2 * rng.standard_normal(a.shape), 0, 1)
            assert abs(ls.ssim_metric(a, b) - reference_ssim(a, b)) <= 1e-6

    def test_self_similarity_is_one(self, rng):
        a = rng.random((32, 32, 3))
        assert ls.ssim_metric(a, a) == pytest.approx(1.0, abs=1e-12)

    def test_shape_mismatch_rejected(self, rng):
        with pytest.raises(ValueError):
            ls.ssim(rng.random((16, 16, 3)), rng.random((16, 17, 3)))


class TestPSNR:
    def test_formula(self):
        assert ls.psnr(np.zeros(64), np.full(64, 0.1)) == pytest.approx(20.0)

    def test_identical_images_report_infinity(self, rng):
        a = rng.random((8, 8, 3))
        assert ls.psnr(a, a) == float("inf")

    def test_matches_reference(self, rng):
        from skimage.metrics import peak_signal_noise_ratio as sk_psnr
        a, b = rng.random((24, 24, 3)), rng.random((24, 24, 3))
        assert abs(ls.psnr(a, b) - sk_psnr(a, b, data_range=1.0)) <= 1e-6


class TestRenderLoss:
    def test_zero_at_equality(self, rng):
        a = rng.random((32, 32, 3))
        mask = np.zeros((32, 32), bool)
        mask[4:28, 6:26] = True
        assert float(ls.render_loss(Tensor(a), Tensor(a.copy()), mask).data) == 0.0

    def test_uniform_images_weights(self):
        p = Tensor(np.zeros((32, 32, 3)))
        g = Tensor(np.ones((32, 32, 3)))
        full = np.ones((32, 32), bool)
        ref = 0.8 + 0.2 * (1 - reference_ssim(np.zeros((32, 32, 3)), np.ones((32, 32, 3))))
        assert float(ls.render_loss(p, g, full).data) == pytest.approx(ref, abs=1e-9)

    def test_empty_mask_rejected(self, rng):
        with pytest.raises(ValueError):
            ls.render_loss(Tensor(np.zeros((16, 16, 3))),
                           Tensor(np.zeros((16, 16, 3))), np.zeros((16, 16), bool))

    def test_finite_difference_on_small_images(self, rng):
        """Differentiability check on 8x8 (window shrunk to fit)."""
        cfg = ls.LossConfig(ssim_window=7)
        a = rng.random((8, 8, 3))
        g = Tensor(rng.random((8, 8, 3)))
        mask = np.ones((8, 8), bool)
        p = Tensor(a.copy(), requires_grad=True)
        T.backward(ls.render_loss(p, g, mask, cfg))
        ana = p.grad.copy()
        eps = 1e-6
        num = np.zeros_like(ana)
        flat_in, flat_num = p.data.reshape(-1), num.reshape(-1)
        for i in range(flat_in.size):
            old = flat_in[i]
            with T.no_grad():
                flat_in[i] = old + eps
                up = float(ls.render_loss(Tensor(p.data), g, mask, cfg).data)
                flat_in[i] = old - eps
                dn = float(ls.render_loss(Tensor(p.data), g, mask, cfg).data)
                flat_in[i] = old
            flat_num[i] = (up - dn) / (2 * eps)
        denom = max(np.abs(num).max(), np.abs(ana).max())
        assert np.abs(ana - num).max() / denom < 1e-4


class TestDisparityLoss:
    def test_single_iterate_is_plain_l1(self, rng):
        gt = rng.random((2, 1, 8, 8))
        d = Tensor(gt + 0.25)
        v = np.ones_like(gt, bool)
        out = float(ls.disparity_loss([d], gt, v).data)
        assert out == pytest.approx(2 * 0.25)  # per-view mean, summed over views

    def test_exponential_weights_hand_computed(self, rng):
        gt = rng.random((2, 1, 8, 8))
        v = np.ones_like(gt, bool)
        its = [Tensor(gt + e) for e in (1.5, 1.0, 0.5)]
        out = float(ls.disparity_loss(its, gt, v).data)
        assert out == pytest.approx(2 * (0.81 * 1.5 + 0.9 * 1.0 + 1.0 * 0.5))

    def test_perfect_sequence_is_zero(self, rng):
        gt = rng.random((2, 1, 8, 8))
        v = np.ones_like(gt, bool)
        assert float(ls.disparity_loss([Tensor(gt.copy())] * 3, gt, v).data) == 0.0

    def test_empty_valid_mask_rejected(self, rng):
        gt = rng.random((2, 1, 8, 8))
        v = np.zeros_like(gt, bool)
        with pytest.raises(ValueError):
            ls.disparity_loss([Tensor(gt)], gt, v)

    def test_invalid_pixels_ignored(self, rng):
        gt = rng.random((2, 1, 8, 8))
        v = np.ones_like(gt, bool)
        v[:, :, 0, 0] = False
        d = gt.copy()
        d[:, :, 0, 0] += 100.0  # garbage on invalid pixels
        assert float(ls.disparity_loss([Tensor(d)], gt, v).data) == 0.0


class TestEPE:
    def test_constant_half_pixel_error(self):
        gt = np.zeros((2, 8, 8))
        pred = gt + 0.5
        e, one = ls.epe(pred, gt, np.ones_like(gt, bool))
        assert e == pytest.approx(0.5)
        assert one == 1.0

    def test_fraction_below_one_pixel(self):
        gt = np.zeros(4)
        pred = np.array([0.2, 0.8, 1.5, 3.0])
        e, one = ls.epe(pred, gt, np.ones(4, bool))
        assert one == pytest.approx(0.5)


class TestLossConfigValidation:
    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            ls.LossConfig(beta=-0.1)

    def test_mu_range(self):
        with pytest.raises(ValueError):
            ls.LossConfig(mu=0.0)
        ls.LossConfig(mu=1.0)  # boundary allowed
