"""Command-line entry points: data generation, training, evaluation, cloud
extraction, offline rendering, the live service, benchmarking, and the
finite-difference verification suites."""

from __future__ import annotations

import functools
import json
import sys
import time
from pathlib import Path

import click
import numpy as np


def _fail_on_error(fn):
    """Runtime failures exit 1 with a message (usage errors stay exit 2)."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (click.ClickException, click.Abort):
            raise
        except Exception as e:  # noqa: BLE001 - CLI boundary
            click.echo(f"error: {e}", err=True)
            sys.exit(1)

    return wrapper


@click.group()
def main():
    """Feed-forward novel-view synthesis from sparse camera rings."""


@main.command("generate-data")
@click.option("--out", required=True, type=click.Path())
@click.option("--scenes", default=140, show_default=True)
@click.option("--val", default=20, show_default=True, help="validation scenes (taken from the end)")
@click.option("--resolution", default=256, show_default=True)
@click.option("--seed", default=0, show_default=True)
@_fail_on_error
def generate_data(out, scenes, val, resolution, seed):
    """Generate the procedural ray-traced dataset."""
    from . import dataset as ds
    ds.generate_dataset(out, n_scenes=scenes, n_val=val, resolution=resolution, seed=seed)
    click.echo(f"wrote {scenes} scenes ({val} val) at {resolution}x{resolution} to {out}")


def _load_config(config_path, overrides):
    from .training import TrainConfig
    fields = {}
    if config_path:
        fields.update(json.loads(Path(config_path).read_text()))
    fields.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**fields)


@main.command()
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--config", type=click.Path(exists=True), help="JSON with TrainConfig fields")
@click.option("--pretrain-iters", type=int, default=None)
@click.option("--joint-iters", type=int, default=None)
@click.option("--batch", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--no-joint", is_flag=True, default=None)
@click.option("--no-depth-encoder", is_flag=True, default=None)
@click.option("--skip-pretrain", is_flag=True, help="start joint phase from scratch")
@_fail_on_error
def train(data, out, config, skip_pretrain, **overrides):
    """Pretrain the depth module, then train depth + Gaussian modules jointly."""
    from .training import Pipeline, joint_train, pretrain_depth
    cfg = _load_config(config, overrides)
    pipeline = Pipeline(seed=cfg.seed, use_depth_encoder=not cfg.no_depth_encoder)
    init = None
    if not skip_pretrain:
        init, _ = pretrain_depth(cfg, data, out, pipeline=pipeline, log=click.echo)
        pipeline = None  # joint_train restores from the pretrain checkpoint
    ckpt, _ = joint_train(cfg, data, out, init_checkpoint=init, pipeline=pipeline,
                          log=click.echo)
    click.echo(f"final checkpoint: {ckpt}")


@main.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--split", default="val", show_default=True)
@click.option("--report", type=click.Path(), default=None)
@_fail_on_error
def eval_cmd(checkpoint, data, split, report):
    """Run full-pipeline inference metrics over a split."""
    from .training import Pipeline, evaluate, restore_checkpoint
    pipeline = Pipeline()
    restore_checkpoint(checkpoint, pipeline)
    rep = evaluate(pipeline, data, split=split, report_path=report)
    click.echo(json.dumps(rep["aggregate"], indent=2))
    if report:
        click.echo(f"report written to {report}")


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--scene", required=True, type=click.Path(exists=True))
@click.option("--target-azimuth", required=True, type=float,
              help="desired viewing azimuth in degrees; picks the working pair")
@click.option("--out", required=True, type=click.Path())
@_fail_on_error
def extract(checkpoint, scene, target_azimuth, out):
    """Select the working pair for an azimuth and export the Gaussian cloud."""
    from . import dataset as ds
    from .camera import select_working_pair
    from .regressor import save_cloud
    from .training import Pipeline, restore_checkpoint
    pipeline = Pipeline()
    restore_checkpoint(checkpoint, pipeline)
    sample = ds.load_scene(scene, with_depth=False)
    ring = sample.ring
    radius = float(np.linalg.norm(sample.sources[0].camera.center - sample.center))
    az = np.deg2rad(target_azimuth)
    # same azimuth convention as the generated ring (view 0 at +z, CCW from above)
    target_pos = sample.center + radius * np.array([np.sin(az), 0.0, np.cos(az)])
    il, ir = select_working_pair(ring, target_pos)
    cloud, _ = pipeline.extract(sample, il, ir)
    save_cloud(out, cloud)
    click.echo(f"pair ({il},{ir}) -> {cloud.count} gaussians -> {out}")


@main.command("render")
@click.option("--gaussians", required=True, type=click.Path(exists=True))
@click.option("--camera", "pose_json", required=True, type=click.Path(exists=True),
              help="pose.json: matrix (16, row-major camera-to-world), fov_y_deg, width, height")
@click.option("--out", required=True, type=click.Path())
@_fail_on_error
def render_cmd(gaussians, pose_json, out):
    """Render an exported cloud from a pose file to a PNG."""
    from .imgio import save_png
    from .regressor import load_cloud
    from .renderer import render
    from .service import camera_from_pose
    cam = camera_from_pose(json.loads(Path(pose_json).read_text()))
    cloud = load_cloud(gaussians)
    result = render(cloud, cam)
    save_png(out, result.image.data)
    click.echo(f"rendered {cloud.count} gaussians to {out}")


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--scene", required=True, type=click.Path(exists=True))
@click.option("--port", default=8765, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@_fail_on_error
def serve(checkpoint, scene, port, host):
    """Run the WebSocket render service."""
    from .service import serve as run_service
    run_service(checkpoint, scene, port=port, host=host)


@main.command()
@click.option("--checkpoint", type=click.Path(exists=True), default=None,
              help="optional; a random initialization benches the same compute")
@click.option("--scene", required=True, type=click.Path(exists=True))
@click.option("--resolution", default=512, show_default=True,
              help="novel-view render resolution")
@click.option("--views", default=10, show_default=True)
@_fail_on_error
def bench(checkpoint, scene, resolution, views):
    """Time extraction vs per-novel-view rendering; prints FPS."""
    stats = run_bench(checkpoint, scene, resolution, views, log=click.echo)
    if stats["render_ms"] > 0.10 * stats["extract_ms"]:
        click.echo("warning: per-view render exceeds 10% of extraction time", err=True)


def run_bench(checkpoint, scene, resolution=512, views=10, log=print):
    """Extract once, render `views` novel poses, report timings."""
    from . import dataset as ds
    from .camera import look_at_camera
    from .renderer import render
    from .training import Pipeline, restore_checkpoint
    pipeline = Pipeline()
    if checkpoint:
        restore_checkpoint(checkpoint, pipeline)
    sample = ds.load_scene(scene, with_depth=False)

    t0 = time.perf_counter()
    cloud, _ = pipeline.extract(sample, 0, 1)
    extract_ms = (time.perf_counter() - t0) * 1000

    f = 0.95 * resolution
    K = np.array([[f, 0, resolution / 2], [0, f, resolution / 2], [0, 0, 1.0]])
    radius = float(np.linalg.norm(sample.sources[0].camera.center - sample.center))
    times = []
    for i in range(views):
        az = 2 * np.pi * i / views
        pos = sample.center + radius * np.array([np.sin(az), 0.0, -np.cos(az)])
        cam = look_at_camera(pos, sample.center, K, resolution, resolution)
        t0 = time.perf_counter()
        render(cloud, cam)
        times.append((time.perf_counter() - t0) * 1000)
    render_ms = float(np.median(times))
    log(f"extraction: {extract_ms:.1f} ms ({cloud.count} gaussians)")
    log(f"novel view ({resolution}x{resolution}): {render_ms:.2f} ms/view "
        f"({1000.0 / render_ms:.1f} FPS)")
    log(f"render/extract ratio: {render_ms / extract_ms:.3f}")
    return {"extract_ms": extract_ms, "render_ms": render_ms,
            "fps": 1000.0 / render_ms, "count": cloud.count}


@main.command()
@_fail_on_error
def gradcheck():
    """Run the float64 finite-difference suites; exit 0 iff all pass."""
    from .verification import run_all
    run_all(log=click.echo)
    click.echo("all gradient checks passed")


if __name__ == "__main__":
    main()
