#!/usr/bin/env python3
"""Run the desk-scale training study: shared depth pretraining, then the three
joint variants (full, no_joint, no_depth_encoder), evaluate each on the
held-out split, and compare against the nearest-source-view-copy baseline.

Writes <out>/summary.json with per-variant metrics and the baseline PSNR.
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np


def baseline_psnr(data_dir, split="val"):
    """Nearest-source-view copy, scored with the same bbox protocol as evaluate."""
    from splatnvs.losses import mask_bbox, psnr
    from splatnvs.training import _SceneStore, nearest_view_baseline

    store = _SceneStore(data_dir, split=split)
    vals = []
    for name in store.names:
        sample = store.scene(name)
        for target in sample.targets:
            pred = nearest_view_baseline(sample, target)
            y0, y1, x0, x1 = mask_bbox(target.mask > 0.5)
            vals.append(psnr(pred[y0:y1, x0:x1], target.color[y0:y1, x0:x1]))
    vals = [v for v in vals if np.isfinite(v)]
    return float(np.mean(vals))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--data", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--pretrain-iters", type=int, default=2000)
    ap.add_argument("--joint-iters", type=int, default=8000)
    ap.add_argument("--batch", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--variants", default="full,no_joint,no_depth_encoder")
    args = ap.parse_args()

    from splatnvs.training import (Pipeline, TrainConfig, evaluate, joint_train,
                                   pretrain_depth, restore_checkpoint)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = dict(pretrain_iters=args.pretrain_iters, joint_iters=args.joint_iters,
                batch=args.batch, seed=args.seed)

    t0 = time.time()
    cfg = TrainConfig(**base)
    pre_ckpt = out / "pretrain.ckpt"
    if not pre_ckpt.exists():
        pre_ckpt, _ = pretrain_depth(cfg, args.data, out)
        print(f"pretrain done in {time.time() - t0:.0f}s", flush=True)

    summary = {"baseline_psnr": baseline_psnr(args.data),
               "config": base, "variants": {}}
    for variant in args.variants.split(","):
        vcfg = TrainConfig(**base, no_joint=(variant == "no_joint"),
                           no_depth_encoder=(variant == "no_depth_encoder"))
        vdir = out / variant
        t0 = time.time()
        ckpt, _ = joint_train(vcfg, args.data, vdir, init_checkpoint=pre_ckpt)
        pipe = Pipeline(seed=vcfg.seed, use_depth_encoder=not vcfg.no_depth_encoder)
        restore_checkpoint(ckpt, pipe)
        report = evaluate(pipe, args.data, split="val", report_path=vdir / "report.json")
        summary["variants"][variant] = {
            "checkpoint": str(ckpt),
            "train_seconds": time.time() - t0,
            "aggregate": report["aggregate"],
        }
        print(f"{variant}: {json.dumps(report['aggregate'])}", flush=True)
        (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
