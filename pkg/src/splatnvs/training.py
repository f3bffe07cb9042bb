"""Two-phase training: depth pretraining, then joint depth + Gaussian training.

Each step samples one scene, picks a stored novel view as the target, selects
the working source pair for it, rectifies, estimates disparity, lifts Gaussians
and renders into the target. The ablation flags reroute gradients without
forking the model code: no_joint detaches the depth map before the regressor,
no_depth_encoder zeroes the depth feature branch.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import dataset as ds
from .camera import select_working_pair
from .losses import LossConfig, disparity_loss, epe, mask_bbox, psnr, render_loss, ssim_metric
from .regressor import GaussianRegressor
from .renderer import render
from .stereo import ImageEncoder, StereoDepthEstimator, disparity_to_depth_tensor
from .tensor import engine as T
from .tensor.checkpoint import load_checkpoint, save_checkpoint
from .tensor.engine import Tensor
from .tensor.nn import Module
from .tensor.optim import AdamW


@dataclass
class TrainConfig:
    lr: float = 2e-4
    batch: int = 2
    pretrain_iters: int = 2000
    joint_iters: int = 8000
    no_joint: bool = False
    no_depth_encoder: bool = False
    seed: int = 0
    weight_decay: float = 1e-4
    log_every: int = 50
    checkpoint_every: int = 500
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.pretrain_iters < 0 or self.joint_iters < 0:
            raise ValueError("iteration counts must be nonnegative")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")


class Pipeline(Module):
    """Shared image encoder + stereo disparity + Gaussian regressor."""

    def __init__(self, seed=0, use_depth_encoder=True):
        rng = np.random.default_rng(seed)
        self.encoder = ImageEncoder(rng=rng)
        self.stereo = StereoDepthEstimator(rng=rng)
        self.regressor = GaussianRegressor(rng=rng, use_depth_encoder=use_depth_encoder)
        self.assign_names()

    def estimate(self, pairdata: ds.RectifiedPairData):
        """Rectified pair -> (pyramid, disparity iterates, final disparity)."""
        x = Tensor(np.ascontiguousarray(pairdata.color.transpose(0, 3, 1, 2)))
        pyramid = self.encoder(x)
        iterates, final = self.stereo(pyramid)
        return pyramid, iterates, final

    def lift(self, pairdata: ds.RectifiedPairData, pyramid, final_disp, detach_depth=False):
        """Disparity -> depth -> merged GaussianCloud in world coordinates."""
        pair = pairdata.pair
        depth = disparity_to_depth_tensor(final_disp, pair.focal, pair.baseline)
        if detach_depth:
            depth = Tensor(depth.data.copy())
        mask = pairdata.mask > 0.5
        return self.regressor(pyramid, depth, pairdata.color, mask,
                              (pair.left, pair.right))

    def extract(self, sample: ds.SceneSample, il: int, ir: int):
        """Inference path: prepared pair -> cloud (no gradients)."""
        with T.no_grad():
            pairdata = ds.prepare_rectified_pair(sample, il, ir, with_depth=False)
            pyramid, _, final = self.estimate(pairdata)
            return self.lift(pairdata, pyramid, final), pairdata


def _pair_cache(sample: ds.SceneSample):
    cache = {}

    def get(il, ir):
        if (il, ir) not in cache:
            cache[(il, ir)] = ds.prepare_rectified_pair(sample, il, ir)
        return cache[(il, ir)]

    return get


class _SceneStore:
    """Lazily loads scenes from disk, keeping a bounded number in memory."""

    def __init__(self, data_dir, split=None):
        self.data_dir = Path(data_dir)
        manifest = ds.load_manifest(data_dir)
        self.center = np.asarray(manifest["center"], dtype=np.float64)
        self.names = ds.scene_names(data_dir, split=split)
        if not self.names:
            raise ValueError(f"no scenes for split {split!r} in {data_dir}")
        self._load = lru_cache(maxsize=24)(self._load_uncached)
        self._pairs = lru_cache(maxsize=48)(self._pair_uncached)

    def _load_uncached(self, name):
        return ds.load_scene(self.data_dir / name, center=self.center)

    def _pair_uncached(self, name, il, ir):
        return ds.prepare_rectified_pair(self._load(name), il, ir)

    def scene(self, name) -> ds.SceneSample:
        return self._load(name)

    def pair(self, name, il, ir) -> ds.RectifiedPairData:
        return self._pairs(name, il, ir)


def _sample_step(store: _SceneStore, rng: np.random.Generator):
    """One training example: scene, target view, its working pair (rectified)."""
    name = store.names[rng.integers(len(store.names))]
    sample = store.scene(name)
    t_idx = int(rng.integers(len(sample.targets)))
    target = sample.targets[t_idx]
    il, ir = select_working_pair(sample.ring, target.camera.center)
    return sample, target, store.pair(name, il, ir)


def _random_adjacent_pair(store: _SceneStore, rng: np.random.Generator):
    name = store.names[rng.integers(len(store.names))]
    sample = store.scene(name)
    n = len(sample.sources)
    il = int(rng.integers(n))
    return store.pair(name, il, (il + 1) % n)


def _disp_valid(pairdata: ds.RectifiedPairData):
    return (pairdata.mask > 0.5) & (pairdata.disparity > 0)


def _nan_guard(value, last_ckpt, path):
    if not np.isfinite(value):
        raise RuntimeError(
            f"training diverged (loss={value}); last good checkpoint: {last_ckpt or 'none'}"
        )


def checkpoint_arrays(pipeline: Pipeline, optimizer: AdamW | None, iteration: int):
    arrays = dict(pipeline.state_dict())
    arrays["meta.iteration"] = np.array([iteration], dtype=np.float64)
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
    return arrays


def restore_checkpoint(path, pipeline: Pipeline, optimizer: AdamW | None = None):
    arrays = load_checkpoint(path)
    state = {k: v for k, v in arrays.items()
             if not k.startswith(("optim.", "meta."))}
    pipeline.load_state_dict(state)
    if optimizer is not None and any(k.startswith("optim.") for k in arrays):
        optimizer.load_state_arrays({k: v for k, v in arrays.items()
                                     if k.startswith("optim.")})
    return int(arrays.get("meta.iteration", np.array([0]))[0])


def pretrain_depth(cfg: TrainConfig, data_dir, out_dir, pipeline: Pipeline | None = None,
                   log=print):
    """Phase 1: disparity-sequence loss only, on random adjacent pairs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pipeline = pipeline or Pipeline(seed=cfg.seed,
                                    use_depth_encoder=not cfg.no_depth_encoder)
    params = [p for _, p in pipeline.encoder.named_parameters()] + \
             [p for _, p in pipeline.stereo.named_parameters()]
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    store = _SceneStore(data_dir, split="train")
    rng = np.random.default_rng(cfg.seed)
    ckpt = out_dir / "pretrain.ckpt"
    last_good = None
    losses = []
    for it in range(cfg.pretrain_iters):
        pipeline.zero_grad()
        step_loss = 0.0
        for _ in range(cfg.batch):
            pairdata = _random_adjacent_pair(store, rng)
            _, iterates, _ = pipeline.estimate(pairdata)
            valid = _disp_valid(pairdata)[:, None]
            loss = disparity_loss(iterates, pairdata.disparity[:, None], valid,
                                  cfg.loss) / float(cfg.batch)
            T.backward(loss)
            step_loss += float(loss.data)
        _nan_guard(step_loss, last_good, ckpt)
        opt.step()
        losses.append(step_loss)
        if cfg.log_every and it % cfg.log_every == 0:
            log(f"pretrain {it}/{cfg.pretrain_iters} loss {step_loss:.4f}")
        if (it + 1) % cfg.checkpoint_every == 0 or it + 1 == cfg.pretrain_iters:
            save_checkpoint(ckpt, checkpoint_arrays(pipeline, opt, it + 1))
            last_good = ckpt
    if cfg.pretrain_iters > 0 and last_good is None:
        save_checkpoint(ckpt, checkpoint_arrays(pipeline, opt, cfg.pretrain_iters))
    elif cfg.pretrain_iters == 0:
        save_checkpoint(ckpt, checkpoint_arrays(pipeline, opt, 0))
    return ckpt, losses


def joint_train(cfg: TrainConfig, data_dir, out_dir, init_checkpoint=None,
                pipeline: Pipeline | None = None, log=print):
    """Phase 2: L_render + L_disp through the full pipeline."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pipeline = pipeline or Pipeline(seed=cfg.seed,
                                    use_depth_encoder=not cfg.no_depth_encoder)
    opt = AdamW([p for _, p in pipeline.named_parameters()],
                lr=cfg.lr, weight_decay=cfg.weight_decay)
    if init_checkpoint is not None:
        restore_checkpoint(init_checkpoint, pipeline)
    store = _SceneStore(data_dir, split="train")
    rng = np.random.default_rng(cfg.seed + 1)
    ckpt = out_dir / "joint.ckpt"
    last_good = None
    losses = []
    for it in range(cfg.joint_iters):
        pipeline.zero_grad()
        step_loss = 0.0
        for _ in range(cfg.batch):
            sample, target, pairdata = _sample_step(store, rng)
            pyramid, iterates, final = pipeline.estimate(pairdata)
            cloud = pipeline.lift(pairdata, pyramid, final,
                                  detach_depth=cfg.no_joint)
            out = render(cloud, target.camera)
            l_render = render_loss(out.image, Tensor(target.color), target.mask > 0.5,
                                   cfg.loss)
            valid = _disp_valid(pairdata)[:, None]
            l_disp = disparity_loss(iterates, pairdata.disparity[:, None], valid,
                                    cfg.loss)
            loss = (l_render + l_disp) / float(cfg.batch)
            T.backward(loss)
            step_loss += float(loss.data)
        _nan_guard(step_loss, last_good, ckpt)
        opt.step()
        losses.append(step_loss)
        if cfg.log_every and it % cfg.log_every == 0:
            log(f"joint {it}/{cfg.joint_iters} loss {step_loss:.4f}")
        if (it + 1) % cfg.checkpoint_every == 0 or it + 1 == cfg.joint_iters:
            save_checkpoint(ckpt, checkpoint_arrays(pipeline, opt, it + 1))
            last_good = ckpt
    if cfg.joint_iters == 0 or last_good is None:
        save_checkpoint(ckpt, checkpoint_arrays(pipeline, opt, cfg.joint_iters))
    return ckpt, losses


def evaluate(pipeline: Pipeline, data_dir, split="val", report_path=None):
    """Full-pipeline inference metrics per (scene, target view), plus aggregates."""
    store = _SceneStore(data_dir, split=split)
    rows = []
    with T.no_grad():
        for name in store.names:
            sample = store.scene(name)
            for t_idx, target in enumerate(sample.targets):
                il, ir = select_working_pair(sample.ring, target.camera.center)
                pairdata = store.pair(name, il, ir)
                pyramid, _, final = pipeline.estimate(pairdata)
                cloud = pipeline.lift(pairdata, pyramid, final)
                out = render(cloud, target.camera)
                tmask = target.mask > 0.5
                y0, y1, x0, x1 = mask_bbox(tmask)
                pred = out.image.data[y0:y1, x0:x1]
                gt = target.color[y0:y1, x0:x1]
                valid = _disp_valid(pairdata)
                e, one = epe(final.data[:, 0], pairdata.disparity, valid)
                rows.append({
                    "scene": name, "view": t_idx,
                    "psnr": psnr(pred, gt),
                    "ssim": ssim_metric(pred, gt),
                    "epe": e, "onepx": one,
                })
    report = {"split": split, "rows": rows, "aggregate": _aggregate(rows)}
    if report_path is not None:
        Path(report_path).write_text(json.dumps(report, indent=2))
    return report


def _aggregate(rows):
    agg = {}
    for key in ("psnr", "ssim", "epe", "onepx"):
        vals = np.array([r[key] for r in rows], dtype=np.float64)
        finite = vals[np.isfinite(vals)]
        agg[key] = {"mean": float(finite.mean()) if finite.size else None,
                    "std": float(finite.std()) if finite.size else None}
    return agg


def nearest_view_baseline(sample: ds.SceneSample, target: ds.View):
    """Copy the closest source view: the trivial baseline renders no geometry."""
    dirs = np.array([v.camera.center - sample.center for v in sample.sources])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    td = target.camera.center - sample.center
    td /= np.linalg.norm(td)
    best = int(np.argmax(dirs @ td))
    return sample.sources[best].color
