import numpy as np
import pytest

from splatnvs import regressor as rg
from splatnvs.camera import look_at_camera
from splatnvs.stereo import ImageEncoder
from splatnvs.tensor import engine as T
from splatnvs.tensor.engine import Tensor


def make_cam(offset_x=0.0, res=32):
    K = np.array([[30.0, 0, res / 2], [0, 30.0, res / 2], [0, 0, 1.0]])
    return look_at_camera(np.array([offset_x, 0.0, -2.0]), np.zeros(3), K, res, res)


@pytest.fixture(scope="module")
def setup():
    rng = np.random.default_rng(5)
    enc = ImageEncoder(rng=np.random.default_rng(6))
    reg = rg.GaussianRegressor(rng=np.random.default_rng(7))
    reg.assign_names()
    h = w = 32
    img = rng.random((2, 3, h, w)).astype(np.float32)
    mask = np.zeros((2, h, w), bool)
    mask[0, 8:24, 8:24] = True
    mask[1, 10:20, 6:28] = True
    depth = (1.5 + 0.5 * rng.random((2, 1, h, w))).astype(np.float32) * mask[:, None]
    cams = (make_cam(-0.1), make_cam(0.1))
    return enc, reg, img, mask, depth, cams


def forward(setup):
    enc, reg, img, mask, depth, cams = setup
    pyr = enc(Tensor(img))
    return reg(pyr, Tensor(depth), img, mask, cams)


class TestParameterInvariants:
    def test_count_is_union_of_foreground(self, setup):
        cloud = forward(setup)
        _, _, img, mask, _, _ = setup
        assert cloud.count == mask[0].sum() + mask[1].sum()

    def test_quaternions_unit_norm(self, setup):
        cloud = forward(setup)
        norms = np.linalg.norm(cloud.rotation.data, axis=1)
        assert np.max(np.abs(norms - 1.0)) <= 1e-6

    def test_ranges_hold_for_arbitrary_weights(self, setup):
        """Activations, not training, enforce the ranges."""
        enc, reg, img, mask, depth, cams = setup
        for name, p in reg.named_parameters():
            p.data = np.random.default_rng(hash(name) % 2 ** 31).standard_normal(
                p.data.shape).astype(p.data.dtype) * 3.0
        cloud = forward(setup)
        assert np.all(cloud.scale.data >= rg.SCALE_MIN)
        assert np.all(cloud.scale.data <= rg.SCALE_MAX)
        assert np.all(cloud.opacity.data > 0) and np.all(cloud.opacity.data < 1)
        assert np.max(np.abs(np.linalg.norm(cloud.rotation.data, axis=1) - 1)) <= 1e-6

    def test_color_is_source_rgb_bit_exact(self, setup):
        cloud = forward(setup)
        _, _, img, mask, _, _ = setup
        v, r, c = cloud.source[0]
        assert np.array_equal(cloud.color.data[0], img[v, :, r, c])

    def test_positions_match_unproject_oracle(self, setup):
        cloud = forward(setup)
        _, _, _, _, depth, cams = setup
        for i in (0, cloud.count - 1):
            v, r, c = cloud.source[i]
            oracle = cams[v].unproject(np.array([[c, r]]), depth[v, 0, r, c])[0]
            assert np.max(np.abs(cloud.position.data[i] - oracle)) < 1e-5

    def test_disjoint_views_have_disjoint_tags(self, setup):
        cloud = forward(setup)
        views = cloud.source[:, 0]
        assert set(np.unique(views)) == {0, 1}
        boundary = np.searchsorted(views, 1)
        assert np.all(views[:boundary] == 0) and np.all(views[boundary:] == 1)


class TestRotationFallback:
    def test_zero_raw_output_falls_back_to_identity(self, setup):
        enc, _, img, mask, depth, cams = setup
        reg = rg.GaussianRegressor(rng=np.random.default_rng(8))
        reg.head_rot.conv2.weight.data[:] = 0
        reg.head_rot.conv2.bias.data[:] = 0
        pyr = enc(Tensor(img))
        cloud = reg(pyr, Tensor(depth), img, mask, cams)
        expected = np.zeros_like(cloud.rotation.data)
        expected[:, 0] = 1.0
        assert np.array_equal(cloud.rotation.data, expected)

    def test_plain_raw_quaternion_normalized(self):
        # raw (2,0,0,0) -> (1,0,0,0) through the same normalization the heads use
        q = np.array([2.0, 0.0, 0.0, 0.0])
        n = np.linalg.norm(q)
        assert n >= rg.QUAT_EPS
        assert np.allclose(q / n, [1, 0, 0, 0])


class TestDepthEncoding:
    def test_all_background_mask_raises(self):
        with pytest.raises(ValueError, match="background"):
            rg.normalize_depth(Tensor(np.ones((1, 1, 8, 8), dtype=np.float32)),
                               np.zeros((1, 1, 8, 8)))

    def test_constant_depth_stays_finite(self):
        d = Tensor(np.full((1, 1, 8, 8), 2.0, dtype=np.float32))
        m = np.ones((1, 1, 8, 8))
        out = rg.normalize_depth(d, m)
        assert np.all(np.isfinite(out.data))

    def test_normalization_is_per_view(self, rng):
        d = np.stack([np.full((1, 8, 8), 1.0), np.full((1, 8, 8), 5.0)]).astype(np.float32)
        out = rg.normalize_depth(Tensor(d), np.ones_like(d))
        assert np.allclose(out.data, 0.0, atol=1e-3)  # both views centered separately

    def test_pyramid_level_mismatch_rejected(self, setup):
        _, reg, img, _, _, _ = setup
        a = [Tensor(np.zeros((1, 32, 16, 16), np.float32))]
        b = [Tensor(np.zeros((1, 32, 8, 8), np.float32))]
        with pytest.raises(ValueError, match="mismatch"):
            reg.decode_features(a, b)

    def test_depth_branch_is_live(self, setup):
        """Zeroing depth features changes the decoded map (ablation pathway)."""
        enc, reg, img, mask, depth, cams = setup
        pyr = enc(Tensor(img))
        with T.no_grad():
            dp = reg.encode_depth(Tensor(depth), mask[:, None])
            full = reg.decode_features(pyr, dp)
            reg.use_depth_encoder = False
            ablated = reg.decode_features(pyr, dp)
            reg.use_depth_encoder = True
        assert not np.allclose(full.data, ablated.data)

    def test_gradient_flows_into_depth(self, setup):
        enc, reg, img, mask, depth, cams = setup
        d = Tensor(depth, requires_grad=True)
        pyr = enc(Tensor(img))
        cloud = reg(pyr, d, img, mask, cams)
        T.backward(T.mean(cloud.scale) + T.mean(cloud.position))
        assert d.grad is not None and np.abs(d.grad).max() > 0


class TestLiftAndMerge:
    def test_empty_union_raises(self, setup):
        enc, reg, img, _, depth, cams = setup
        fg = np.zeros((2, 32, 32), bool)
        fg[:, 4:6, 4:6] = True  # nonzero mask, but depth invalid there
        bad_depth = Tensor(np.zeros_like(depth.data if hasattr(depth, "data") else depth))
        maps = []
        pyr = enc(Tensor(img))
        with pytest.raises(ValueError, match="background|empty"):
            reg(pyr, Tensor(np.zeros((2, 1, 32, 32), np.float32)), img,
                np.zeros((2, 32, 32), bool), cams)

    def test_invalid_depth_pixels_dropped(self, setup):
        enc, reg, img, mask, depth, cams = setup
        d = np.array(depth)
        v, r, c = 0, 10, 10
        assert mask[v, r, c]
        d[v, 0, r, c] = 0.0
        pyr = enc(Tensor(img))
        cloud = reg(pyr, Tensor(d), img, mask, cams)
        assert cloud.count == mask.sum() - 1
        assert not any((s == [v, r, c]).all() for s in cloud.source)


class TestCloudIO:
    def test_roundtrip(self, setup, tmp_path):
        cloud = forward(setup)
        path = tmp_path / "cloud.gcld"
        rg.save_cloud(path, cloud)
        assert path.read_bytes()[:4] == b"GCLD"
        back = rg.load_cloud(path)
        assert back.count == cloud.count
        assert np.allclose(back.position.data, cloud.position.data, atol=1e-6)
        assert np.allclose(back.opacity.data, cloud.opacity.data, atol=1e-7)

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.gcld"
        p.write_bytes(b"XXXX" + b"\x00" * 8)
        with pytest.raises(ValueError, match="magic"):
            rg.load_cloud(p)
