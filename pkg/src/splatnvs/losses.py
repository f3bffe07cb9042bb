"""Rendering and disparity-sequence losses, plus evaluation metrics.

SSIM follows the standard windowed formulation (11x11 Gaussian window,
sigma=1.5, k1=0.01, k2=0.03, dynamic range 1.0, population covariance) and is
computed on 'valid' windows only, so it agrees with reference implementations
that crop the filter border.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import engine as T
from .tensor.engine import Tensor


@dataclass
class LossConfig:
    beta: float = 0.8        # L1 weight
    gamma: float = 0.2       # (1 - SSIM) weight
    mu: float = 0.9          # disparity sequence decay
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    def __post_init__(self):
        if self.beta < 0 or self.gamma < 0:
            raise ValueError("loss weights must be nonnegative")
        if not 0 < self.mu <= 1:
            raise ValueError("mu must be in (0, 1]")


def _gaussian_kernel(window, sigma, dtype):
    r = window // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k /= k.sum()
    return np.outer(k, k).astype(dtype)


def _ssim_map(pred, gt, cfg: LossConfig):
    """SSIM over valid windows; inputs (H,W,C) tensors, returns scalar tensor."""
    h, w, c = pred.shape
    win = cfg.ssim_window
    if h < win or w < win:
        raise ValueError(f"image {h}x{w} smaller than SSIM window {win}")
    kern = Tensor(_gaussian_kernel(win, cfg.ssim_sigma, pred.dtype).reshape(1, 1, win, win))

    def filt(x):  # channels as batch, valid convolution
        return T.conv2d(T.reshape(T.transpose(x, (2, 0, 1)), (c, 1, h, w)), kern)

    ux, uy = filt(pred), filt(gt)
    uxx, uyy, uxy = filt(pred * pred), filt(gt * gt), filt(pred * gt)
    vx, vy = uxx - ux * ux, uyy - uy * uy
    vxy = uxy - ux * uy
    c1 = (cfg.k1 * cfg.data_range) ** 2
    c2 = (cfg.k2 * cfg.data_range) ** 2
    s = ((2.0 * ux * uy + c1) * (2.0 * vxy + c2)) / \
        ((ux * ux + uy * uy + c1) * (vx + vy + c2))
    return T.mean(s)


def ssim(pred, gt, cfg: LossConfig | None = None):
    """Mean SSIM of two (H,W,C) images; accepts tensors or arrays."""
    cfg = cfg or LossConfig()
    p = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred))
    g = gt if isinstance(gt, Tensor) else Tensor(np.asarray(gt))
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    return _ssim_map(p, g, cfg)


def mask_bbox(mask, pad_to=11):
    """(y0,y1,x0,x1) bounding the foreground, expanded to at least pad_to."""
    mask = np.asarray(mask, dtype=bool)
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ValueError("empty foreground mask")
    y0, y1 = int(ys.min()), int(ys.max()) + 1
    x0, x1 = int(xs.min()), int(xs.max()) + 1
    h, w = mask.shape

    def grow(a0, a1, size):
        while a1 - a0 < pad_to:
            if a0 > 0:
                a0 -= 1
            if a1 < size and a1 - a0 < pad_to:
                a1 += 1
            if a0 == 0 and a1 == size:
                break
        return a0, a1

    y0, y1 = grow(y0, y1, h)
    x0, x1 = grow(x0, x1, w)
    return y0, y1, x0, x1


def render_loss(pred, gt, mask, cfg: LossConfig | None = None):
    """beta * masked L1 + gamma * (1 - SSIM) over the foreground bounding box."""
    cfg = cfg or LossConfig()
    p = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred))
    g = gt if isinstance(gt, Tensor) else Tensor(np.asarray(gt))
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    y0, y1, x0, x1 = mask_bbox(mask, pad_to=cfg.ssim_window)
    pc = p[y0:y1, x0:x1, :]
    gc = g[y0:y1, x0:x1, :]
    m = np.asarray(mask, dtype=p.dtype)[y0:y1, x0:x1, None]
    l1 = T.sum_(T.abs_(pc - gc) * Tensor(m)) / (3.0 * float(m.sum()))
    return cfg.beta * l1 + cfg.gamma * (1.0 - _ssim_map(pc, gc, cfg))


def disparity_loss(iterates, gt_disp, valid, cfg: LossConfig | None = None):
    """Sum_t mu^(T-t) * L1(gt, d_t) over valid pixels, per view then summed.

    iterates: list over refinement steps of (B,1,H,W) tensors (full resolution);
    gt_disp/valid: (B,1,H,W) arrays.
    """
    cfg = cfg or LossConfig()
    gt = np.asarray(gt_disp)
    v = np.asarray(valid, dtype=gt.dtype)
    n_steps = len(iterates)
    if n_steps < 1:
        raise ValueError("need at least one disparity iterate")
    counts = v.sum(axis=(1, 2, 3))
    if np.any(counts == 0):
        raise ValueError("empty valid mask for a view")
    total = None
    for t, d in enumerate(iterates):
        weight = cfg.mu ** (n_steps - 1 - t)
        err = T.abs_(d - Tensor(gt.astype(d.dtype))) * Tensor(v.astype(d.dtype))
        per_view = T.sum_(err, axis=(1, 2, 3)) / Tensor(counts.astype(d.dtype))
        term = weight * T.sum_(per_view)
        total = term if total is None else total + term
    return total


# -- metrics (plain numpy) -----------------------------------------------------

def psnr(pred, gt):
    """-10 log10 MSE for range-1 images; +inf for identical inputs."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    mse = np.mean((pred - gt) ** 2)
    if mse == 0:
        return float("inf")
    return float(-10.0 * np.log10(mse))


def ssim_metric(pred, gt, cfg: LossConfig | None = None):
    with T.no_grad():
        return float(ssim(np.asarray(pred, dtype=np.float64),
                          np.asarray(gt, dtype=np.float64), cfg).data)


def epe(pred_disp, gt_disp, valid):
    """Mean absolute disparity error and <1px ratio over valid pixels."""
    err = np.abs(np.asarray(pred_disp, dtype=np.float64) - np.asarray(gt_disp, dtype=np.float64))
    v = np.asarray(valid, dtype=bool)
    if not v.any():
        raise ValueError("empty valid mask")
    err = err[v]
    return float(err.mean()), float((err < 1.0).mean())
