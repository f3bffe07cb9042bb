"""Pixel-wise Gaussian parameter prediction.

A second copy of the image encoder runs on the (foreground-normalized) depth
map; image and depth pyramids are concatenated at every level and fused by a
small U-Net decoder into a per-pixel feature map, from which two-convolution
heads predict rotation, scale and opacity. Position comes from differentiable
unprojection of the depth map, color is the source RGB verbatim. Foreground
pixels of both rectified views are lifted and concatenated into one cloud.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .camera import PinholeCamera
from .stereo import CHANNELS, ImageEncoder
from .tensor import engine as T
from .tensor.engine import Tensor
from .tensor.nn import Conv2d, GroupNorm, Module, ReLU, Sequential

FEATURE_DIM = 32        # decoder output channels per pixel
SCALE_MIN = 1e-5        # meters
SCALE_MAX = 0.1         # meters
QUAT_EPS = 1e-8         # raw norms below this fall back to identity rotation

CLOUD_MAGIC = b"GCLD"


@dataclass
class GaussianParameterMaps:
    position: Tensor   # (H,W,3) world meters
    color: np.ndarray  # (H,W,3) source RGB, passed through untouched
    rotation: Tensor   # (H,W,4) unit quaternions, w first
    scale: Tensor      # (H,W,3) meters, in [SCALE_MIN, SCALE_MAX]
    opacity: Tensor    # (H,W,1) in (0,1)
    mask: np.ndarray   # (H,W) bool foreground


@dataclass
class GaussianCloud:
    position: Tensor   # (N,3)
    color: Tensor      # (N,3)
    rotation: Tensor   # (N,4)
    scale: Tensor      # (N,3)
    opacity: Tensor    # (N,)
    source: np.ndarray  # (N,3) int: view index, pixel row, pixel col

    @property
    def count(self):
        return self.position.shape[0]

    def detached_arrays(self):
        return (np.asarray(self.position.data), np.asarray(self.color.data),
                np.asarray(self.rotation.data), np.asarray(self.scale.data),
                np.asarray(self.opacity.data))


def save_cloud(path, cloud: GaussianCloud):
    """Binary export: magic, u32 count, 14 little-endian f32 per point."""
    pos, col, rot, sca, opa = cloud.detached_arrays()
    n = pos.shape[0]
    rows = np.concatenate([pos, col, rot, sca, opa[:, None]], axis=1).astype("<f4")
    with open(path, "wb") as f:
        f.write(CLOUD_MAGIC)
        f.write(struct.pack("<I", n))
        f.write(rows.tobytes())


def load_cloud(path) -> GaussianCloud:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CLOUD_MAGIC:
            raise ValueError(f"bad cloud magic {magic!r}")
        (n,) = struct.unpack("<I", f.read(4))
        rows = np.frombuffer(f.read(n * 14 * 4), dtype="<f4").reshape(n, 14)
    rows = rows.astype(np.float32)
    return GaussianCloud(Tensor(rows[:, 0:3]), Tensor(rows[:, 3:6]),
                         Tensor(rows[:, 6:10]), Tensor(rows[:, 10:13]),
                         Tensor(rows[:, 13]), np.zeros((n, 3), dtype=np.int64))


def normalize_depth(depth, mask):
    """Zero-mean / unit-std over foreground; background stays 0. (B,1,H,W) tensors."""
    m = np.asarray(mask, dtype=depth.dtype)
    axes = (1, 2, 3)
    count = m.sum(axis=axes, keepdims=True)
    if np.any(count == 0):
        raise ValueError("all-background mask: nothing to normalize")
    mt = Tensor(m)
    mean = T.sum_(depth * mt, axis=axes, keepdims=True) / Tensor(count)
    var = T.sum_(mt * (depth - mean) ** 2.0, axis=axes, keepdims=True) / Tensor(count)
    std = T.sqrt(var + 1e-8)
    return ((depth - mean) / std) * mt


class _UpFuse(Module):
    """Upsample x2, concatenate the skip, fuse with a 3x3 conv + GN + relu."""

    def __init__(self, cin, cout, rng=None):
        self.conv = Conv2d(cin, cout, 3, padding=1, rng=rng)
        self.norm = GroupNorm(8, cout)

    def forward(self, x, skip=None):
        x = T.bilinear_upsample(x, 2)
        if skip is not None:
            x = T.concat([x, skip], axis=1)
        return T.relu(self.norm(self.conv(x)))


class _Head(Module):
    """Two 3x3 convolutions with a configurable output bias."""

    def __init__(self, cout, bias_init=None, rng=None):
        self.conv1 = Conv2d(FEATURE_DIM, FEATURE_DIM, 3, padding=1, rng=rng)
        self.conv2 = Conv2d(FEATURE_DIM, cout, 3, padding=1, rng=rng)
        if bias_init is not None:
            self.conv2.bias.data[:] = np.asarray(bias_init, dtype=self.conv2.bias.dtype)

    def forward(self, x):
        return self.conv2(T.relu(self.conv1(x)))


class GaussianRegressor(Module):
    """Depth encoder + U-Net fusion decoder + parameter heads."""

    def __init__(self, rng=None, use_depth_encoder=True):
        c1, c2, c3 = CHANNELS
        self.use_depth_encoder = use_depth_encoder
        self.depth_encoder = ImageEncoder(cin=1, rng=rng)
        self.bottom = Sequential(Conv2d(2 * c3, 96, 3, padding=1, rng=rng),
                                 GroupNorm(8, 96), ReLU())
        self.up2 = _UpFuse(96 + 2 * c2, 48, rng=rng)      # 1/8 -> 1/4
        self.up1 = _UpFuse(48 + 2 * c1, FEATURE_DIM, rng=rng)  # 1/4 -> 1/2
        self.up0 = _UpFuse(FEATURE_DIM, FEATURE_DIM, rng=rng)  # 1/2 -> full
        # identity quaternion prior: w channel biased to 1 so the normalization
        # is well-conditioned from the first step (raw zeros have no gradient
        # through the fallback)
        self.head_rot = _Head(4, bias_init=[1.0, 0.0, 0.0, 0.0], rng=rng)
        # softplus(-4.6) ~ 0.01 m: start with small, non-saturated scales
        self.head_scale = _Head(3, bias_init=[-4.6] * 3, rng=rng)
        # sigmoid(2.197) ~ 0.9: start nearly opaque
        self.head_opacity = _Head(1, bias_init=[2.197], rng=rng)

    def encode_depth(self, depth, mask):
        """Foreground-normalized depth through the shared encoder architecture."""
        return self.depth_encoder(normalize_depth(depth, mask))

    def decode_features(self, img_pyr, depth_pyr):
        """Fuse image+depth pyramids into a full-resolution (B,32,H,W) map."""
        if len(img_pyr) != len(depth_pyr):
            raise ValueError("pyramid level mismatch")
        for a, b in zip(img_pyr, depth_pyr):
            if a.shape[2:] != b.shape[2:]:
                raise ValueError(f"pyramid level mismatch: {a.shape} vs {b.shape}")
        if not self.use_depth_encoder:
            depth_pyr = [f * 0.0 for f in depth_pyr]
        cat = [T.concat([i, d], axis=1) for i, d in zip(img_pyr, depth_pyr)]
        x = self.bottom(cat[2])
        x = self.up2(x, cat[1])
        x = self.up1(x, cat[0])
        return self.up0(x)

    def predict_maps(self, feats, depth, image, mask, cam: PinholeCamera):
        """Per-pixel parameter maps for one view. feats (1,32,H,W), depth (1,1,H,W)."""
        h, w = feats.shape[2], feats.shape[3]
        raw_rot = self.head_rot(feats)
        raw_scale = self.head_scale(feats)
        raw_opac = self.head_opacity(feats)

        q = T.transpose(T.reshape(raw_rot, (4, h, w)), (1, 2, 0))   # (H,W,4)
        norm_sq = T.sum_(q * q, axis=2, keepdims=True)
        bad = (np.sqrt(norm_sq.data) < QUAT_EPS).astype(q.dtype)
        good = 1.0 - bad
        q_safe = q / T.sqrt(norm_sq + q.dtype.type(QUAT_EPS) ** 2)
        identity = np.zeros((h, w, 4), dtype=q.dtype)
        identity[..., 0] = 1.0
        rotation = q_safe * Tensor(good) + Tensor(identity * bad)

        s = T.transpose(T.reshape(raw_scale, (3, h, w)), (1, 2, 0))
        scale = T.clamp(T.softplus(s), lo=SCALE_MIN, hi=SCALE_MAX)
        # the clamp keeps the open interval (0,1) even where f32 sigmoid saturates
        opacity = T.clamp(T.sigmoid(T.transpose(T.reshape(raw_opac, (1, h, w)), (1, 2, 0))),
                          lo=1e-6, hi=1.0 - 1e-6)

        dirs = cam.ray_directions().astype(depth.dtype)             # (H,W,3), unit cam-z
        d_hw1 = T.transpose(T.reshape(depth, (1, h, w)), (1, 2, 0))
        position = d_hw1 * Tensor(dirs) + cam.center.astype(depth.dtype)

        img = np.asarray(image)
        if img.shape[0] == 3 and img.ndim == 3:    # accept (3,H,W) or (H,W,3)
            img = np.transpose(img, (1, 2, 0))
        return GaussianParameterMaps(position, img, rotation, scale, opacity,
                                     np.asarray(mask, dtype=bool).reshape(h, w))

    def forward(self, img_pyrs, depth, image, mask, cams):
        """Both rectified views -> merged GaussianCloud.

        img_pyrs: image feature pyramid with batch axis 2 (left, right).
        depth: (2,1,H,W) tensor; image (2,3,H,W) or (2,H,W,3) numpy; mask (2,H,W);
        cams: pair of PinholeCamera in a common world frame.
        """
        depth_pyr = self.encode_depth(depth, mask[:, None, :, :])
        feats = self.decode_features(img_pyrs, depth_pyr)
        maps = []
        for i in range(2):
            f_i = feats[i:i + 1]
            d_i = depth[i:i + 1]
            maps.append(self.predict_maps(f_i, d_i, image[i], mask[i], cams[i]))
        return lift_and_merge(maps[0], maps[1], depths=(depth.data[0, 0], depth.data[1, 0]))


def _lift_view(maps: GaussianParameterMaps, view_idx, valid):
    h, w = maps.mask.shape
    idx = np.nonzero(valid.reshape(-1))[0]
    flat = lambda t, c: T.reshape(t, (h * w, c))
    pos = T.gather_rows(flat(maps.position, 3), idx)
    rot = T.gather_rows(flat(maps.rotation, 4), idx)
    sca = T.gather_rows(flat(maps.scale, 3), idx)
    opa = T.reshape(T.gather_rows(flat(maps.opacity, 1), idx), (idx.size,))
    col = Tensor(np.ascontiguousarray(maps.color.reshape(h * w, 3)[idx]))
    rows, cols = idx // w, idx % w
    source = np.stack([np.full(idx.size, view_idx, dtype=np.int64), rows, cols], axis=1)
    return pos, col, rot, sca, opa, source


def lift_and_merge(maps_l: GaussianParameterMaps, maps_r: GaussianParameterMaps,
                   depths=None) -> GaussianCloud:
    """Union of foreground pixels of both views; pixels with invalid depth dropped."""
    parts = []
    for i, maps in enumerate((maps_l, maps_r)):
        valid = maps.mask.copy()
        if depths is not None:
            valid &= np.asarray(depths[i]) > 0
        parts.append(_lift_view(maps, i, valid))
    if all(p[5].shape[0] == 0 for p in parts):
        raise ValueError("empty union: no foreground pixels with valid depth")
    return GaussianCloud(
        T.concat([p[0] for p in parts], axis=0),
        T.concat([p[1] for p in parts], axis=0),
        T.concat([p[2] for p in parts], axis=0),
        T.concat([p[3] for p in parts], axis=0),
        T.concat([p[4] for p in parts], axis=0),
        np.concatenate([p[5] for p in parts], axis=0),
    )
