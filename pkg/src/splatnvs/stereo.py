"""Binocular depth: shared encoder, correlation volume, iterative GRU refinement.

Both views of a rectified pair run as one batch. The correlation volume is
computed once; the right view reuses it transposed on its last two axes with
the disparity sign mirrored.
"""

from __future__ import annotations

import numpy as np

from .tensor import engine as T
from .tensor.nn import Conv2d, GroupNorm, Module, ResidualBlock, Sequential, ReLU

SCALES = 3                      # feature pyramid depth; coarse scale is 1/2^SCALES
CHANNELS = (32, 48, 96)
ITERATIONS = 3                  # GRU refinement steps
LOOKUP_RADIUS = 4
LOOKUP_LEVELS = 4
HIDDEN_DIM = 96
UPSAMPLE = 2 ** SCALES

# instrumentation: number of correlation volumes built (tests assert one per pair)
VOLUME_COUNTER = {"count": 0}


class ImageEncoder(Module):
    """3-scale residual encoder (1/2, 1/4, 1/8 resolution; 32/48/96 channels).

    First convolution is 5x5; all normalization is group normalization.
    Used verbatim for RGB (cin=3) and for encoded depth maps (cin=1).
    """

    def __init__(self, cin=3, rng=None):
        c1, c2, c3 = CHANNELS
        self.stem = Conv2d(cin, c1, 5, stride=2, padding=2, rng=rng)
        self.norm = GroupNorm(8, c1)
        self.block1 = ResidualBlock(c1, c1, rng=rng)
        self.block2 = ResidualBlock(c1, c2, stride=2, rng=rng)
        self.block3 = ResidualBlock(c2, c3, stride=2, rng=rng)

    def forward(self, x):
        h, w = x.shape[2], x.shape[3]
        if h % UPSAMPLE or w % UPSAMPLE:
            raise ValueError(f"input {h}x{w} not divisible by {UPSAMPLE}; pad the image first")
        f1 = self.block1(T.relu(self.norm(self.stem(x))))
        f2 = self.block2(f1)
        f3 = self.block3(f2)
        return [f1, f2, f3]


def build_correlation(fl, fr):
    """All-pairs inner products along rows, scaled by 1/sqrt(D). (B,D,H,W)->(B,H,W,W)."""
    VOLUME_COUNTER["count"] += 1
    return T.correlation_volume(fl, fr)


def correlation_pyramid(vol, levels=LOOKUP_LEVELS):
    """Average-pool the matching axis; level l has W/2^l columns."""
    if vol.shape[-1] < 2 ** (levels - 1):
        raise ValueError(f"matching axis {vol.shape[-1]} too narrow for {levels} "
                         f"pyramid levels (needs image width >= {2 ** (levels + 2)})")
    pyr = [vol]
    for _ in range(levels - 1):
        b, h, w, wl = pyr[-1].shape
        v = T.reshape(pyr[-1], (b, h, w, wl // 2, 2))
        pyr.append(T.mean(v, axis=4))
    return pyr


def lookup(pyramid, disp, radius=LOOKUP_RADIUS, sign=1.0):
    """Sample all pyramid levels around the current disparity -> (B, L*(2r+1), H, W)."""
    feats = [T.corr_lookup(vol, disp, radius, level, sign=sign)
             for level, vol in enumerate(pyramid)]
    return T.concat(feats, axis=1)


class ConvGRU(Module):
    def __init__(self, hidden, cin, rng=None):
        self.convz = Conv2d(hidden + cin, hidden, 3, padding=1, rng=rng)
        self.convr = Conv2d(hidden + cin, hidden, 3, padding=1, rng=rng)
        self.convq = Conv2d(hidden + cin, hidden, 3, padding=1, rng=rng)

    def forward(self, h, x):
        hx = T.concat([h, x], axis=1)
        z = T.sigmoid(self.convz(hx))
        r = T.sigmoid(self.convr(hx))
        q = T.tanh(self.convq(T.concat([r * h, x], axis=1)))
        return (1.0 - z) * h + z * q


class UpdateBlock(Module):
    """One GRU refinement step: correlation + current disparity -> disparity delta
    and convex-upsampling mask logits."""

    def __init__(self, rng=None):
        corr_dim = LOOKUP_LEVELS * (2 * LOOKUP_RADIUS + 1)
        self.corr_enc = Sequential(Conv2d(corr_dim, 64, 1, rng=rng), ReLU(),
                                   Conv2d(64, 48, 3, padding=1, rng=rng), ReLU())
        self.disp_enc = Sequential(Conv2d(1, 16, 3, padding=1, rng=rng), ReLU())
        self.gru = ConvGRU(HIDDEN_DIM, 48 + 16 + HIDDEN_DIM, rng=rng)
        self.disp_head = Sequential(Conv2d(HIDDEN_DIM, 96, 3, padding=1, rng=rng), ReLU(),
                                    Conv2d(96, 1, 3, padding=1, rng=rng))
        self.mask_head = Sequential(Conv2d(HIDDEN_DIM, 128, 3, padding=1, rng=rng), ReLU(),
                                    Conv2d(128, 9 * UPSAMPLE * UPSAMPLE, 1, rng=rng))

    def forward(self, hidden, context, corr, disp):
        x = T.concat([self.corr_enc(corr), self.disp_enc(disp), context], axis=1)
        hidden = self.gru(hidden, x)
        delta = self.disp_head(hidden)
        mask = self.mask_head(hidden) * 0.25
        return hidden, delta, mask


def convex_upsample(disp, mask_logits, factor=UPSAMPLE):
    """Each fine pixel is a softmax-convex combination of its 9 coarse neighbors;
    the result is scaled by `factor` to convert disparity units."""
    b, _, h, w = disp.shape
    f = factor
    m = T.softmax(T.reshape(mask_logits, (b, 9, f * f, h, w)), axis=1)
    dp = T.pad2d(disp, 1)
    shifts = [dp[:, :, dy:dy + h, dx:dx + w] for dy in range(3) for dx in range(3)]
    stack = T.concat(shifts, axis=1)                       # (B,9,h,w)
    combined = T.sum_(m * T.reshape(stack, (b, 9, 1, h, w)), axis=1)  # (B,f*f,h,w)
    up = T.transpose(T.reshape(combined, (b, f, f, h, w)), (0, 3, 1, 4, 2))
    return T.reshape(up, (b, 1, h * f, w * f)) * float(f)


class StereoDepthEstimator(Module):
    """Iterative dual-view disparity estimation over a single shared volume."""

    def __init__(self, rng=None):
        self.ctx_hidden = Conv2d(CHANNELS[2], HIDDEN_DIM, 3, padding=1, rng=rng)
        self.ctx_input = Conv2d(CHANNELS[2], HIDDEN_DIM, 3, padding=1, rng=rng)
        self.update = UpdateBlock(rng=rng)

    def forward(self, pyramid, iterations=ITERATIONS):
        """pyramid: encoder levels for the stacked (left, right) views, each (2B,C,h,w).

        Returns a list of full-resolution disparity iterates (2B,1,H,W) and the
        final non-negative disparity. Index 0..B-1 = left views, B..2B-1 = right.
        """
        f3 = pyramid[-1]
        n = f3.shape[0]
        if n % 2:
            raise ValueError("stacked view batch must be even (left+right)")
        b = n // 2
        fl, fr = f3[0:b], f3[b:2 * b]
        vol = build_correlation(fl, fr)
        vol_r = T.transpose(vol, (0, 1, 3, 2))       # re-indexed for the right view
        pyr = correlation_pyramid(T.concat([vol, vol_r], axis=0))

        hidden = T.tanh(self.ctx_hidden(f3))
        context = T.relu(self.ctx_input(f3))
        h, w = f3.shape[2], f3.shape[3]
        disp = T.Tensor(np.zeros((n, 1, h, w), dtype=np.float32))
        # left view matches at column j - d, right view at column j + d
        sign = T.Tensor(np.concatenate([-np.ones(b), np.ones(b)])
                        .astype(np.float32).reshape(n, 1, 1, 1))

        iterates = []
        for _ in range(iterations):
            corr = lookup(pyr, disp * sign, sign=1.0)
            hidden, delta, mask = self.update(hidden, context, corr, disp)
            disp = disp + delta
            iterates.append(convex_upsample(disp, mask))
        final = T.clamp(iterates[-1], lo=0.0)
        return iterates, final


def disparity_to_depth_tensor(disp, focal, baseline, min_disp=1e-3):
    """Differentiable depth = f*B / disparity (clamped away from zero)."""
    return (focal * baseline) / T.clamp(disp, lo=min_disp)
