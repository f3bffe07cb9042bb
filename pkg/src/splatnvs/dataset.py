"""Procedural synthetic scenes with an exact ray-traced oracle.

Each scene is an articulated arrangement of textured primitives (spheres,
boxes, capsules) inside a 2 m bounding sphere, captured by a ring of 8
cameras plus 3 novel target views on the arcs between adjacent cameras.
Depth is the analytic camera-z of the first hit; masks are hit/no-hit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import camera as cam_mod
from .camera import PinholeCamera, ViewRing, look_at_camera
from .imgio import load_pfm, load_png, save_pfm, save_png

LIGHT_DIR = np.array([0.45, 0.78, 0.35])
LIGHT_DIR = LIGHT_DIR / np.linalg.norm(LIGHT_DIR)


@dataclass
class Primitive:
    kind: str                 # sphere | box | capsule
    position: np.ndarray      # center (sphere/box) or segment midpoint (capsule)
    rot: np.ndarray           # local->world rotation
    params: np.ndarray        # sphere: [r]; box: half extents; capsule: [half_len, r]
    color_a: np.ndarray
    color_b: np.ndarray
    tex: str                  # checker | waves
    tex_freq: float


@dataclass
class View:
    color: np.ndarray         # H,W,3 linear float32
    mask: np.ndarray          # H,W float32 {0,1}
    camera: PinholeCamera
    depth: np.ndarray | None = None  # H,W camera-z, 0 on background


@dataclass
class SceneSample:
    name: str
    sources: list[View]
    targets: list[View]
    center: np.ndarray
    seed: int = 0

    @property
    def ring(self) -> ViewRing:
        return ViewRing([v.camera for v in self.sources], self.center)


# -- ray tracing -------------------------------------------------------------

def _intersect_sphere(o, d, c, r):
    oc = o - c
    b = d @ oc
    c0 = oc @ oc - r * r
    disc = b * b - c0
    hit = disc > 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t = np.where(hit, -b - sq, np.inf)
    t = np.where(hit & (t <= 1e-6), -b + sq, t)
    t = np.where(t > 1e-6, t, np.inf)
    return t


def _intersect_box(o, d, prim):
    ol = prim.rot.T @ (o - prim.position)
    dl = d @ prim.rot
    h = prim.params
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dl
        t1 = (-h - ol) * inv
        t2 = (h - ol) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    tn = tmin.max(axis=1)
    tf = tmax.min(axis=1)
    hit = (tn < tf) & (tf > 1e-6) & (tn > 1e-6)
    return np.where(hit, tn, np.inf)


def _intersect_capsule(o, d, prim):
    half, r = prim.params
    axis = prim.rot[:, 2] if prim.rot.ndim == 2 else prim.rot
    p0 = prim.position - half * axis
    ba = 2 * half * axis
    oa = o - p0
    baba = ba @ ba
    bard = d @ ba
    baoa = oa @ ba
    rdoa = d @ oa
    oaoa = oa @ oa
    a = baba - bard * bard
    b = baba * rdoa - baoa * bard
    c = baba * oaoa - baoa * baoa - r * r * baba
    disc = b * b - a * c
    ok = (disc > 0) & (np.abs(a) > 1e-12)
    t = np.where(ok, (-b - np.sqrt(np.where(ok, disc, 0.0))) / np.where(ok, a, 1.0), np.inf)
    y = baoa + t * bard
    t_body = np.where(ok & (y > 0) & (y < baba) & (t > 1e-6), t, np.inf)
    t_cap0 = _intersect_sphere(o, d, p0, r)
    t_cap1 = _intersect_sphere(o, d, p0 + ba, r)
    return np.minimum(t_body, np.minimum(t_cap0, t_cap1))


def _normal(prim, p):
    if prim.kind == "sphere":
        return (p - prim.position) / prim.params[0]
    if prim.kind == "box":
        pl = (p - prim.position) @ prim.rot
        rel = np.abs(pl) / prim.params
        axis = np.argmax(rel, axis=1)
        n_local = np.zeros_like(pl)
        n_local[np.arange(len(pl)), axis] = np.sign(pl[np.arange(len(pl)), axis])
        return n_local @ prim.rot.T
    # capsule: offset from the closest point on the core segment
    half, r = prim.params
    axis = prim.rot[:, 2]
    rel = p - prim.position
    s = np.clip(rel @ axis, -half, half)
    return (rel - s[:, None] * axis[None]) / r


def _albedo(prim, p):
    pl = (p - prim.position) @ prim.rot
    f = prim.tex_freq
    if prim.tex == "checker":
        m = (np.floor(pl[:, 0] * f) + np.floor(pl[:, 1] * f) + np.floor(pl[:, 2] * f)) % 2
    else:  # smooth quasi-periodic waves
        m = 0.5 + 0.5 * np.sin(f * pl[:, 0] * 5.1 + 1.7) * np.sin(f * pl[:, 1] * 4.3 + 0.6) \
            * np.sin(f * pl[:, 2] * 3.7 + 2.9)
    return prim.color_a[None] + (prim.color_b - prim.color_a)[None] * m[:, None]


_INTERSECT = {"sphere": lambda o, d, pr: _intersect_sphere(o, d, pr.position, pr.params[0]),
              "box": _intersect_box,
              "capsule": _intersect_capsule}


def render_view(camera: PinholeCamera, prims: list[Primitive]) -> View:
    """Exact first-hit render with Lambertian shading and a fixed directional light."""
    h, w = camera.height, camera.width
    dirs = camera.ray_directions().reshape(-1, 3)
    norms = np.linalg.norm(dirs, axis=1, keepdims=True)
    du = dirs / norms
    o = camera.center

    best_t = np.full(len(du), np.inf)
    best_i = np.full(len(du), -1, dtype=np.int64)
    for i, prim in enumerate(prims):
        t = _INTERSECT[prim.kind](o, du, prim)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_i[closer] = i

    color = np.zeros((len(du), 3))
    depth = np.zeros(len(du))
    hit = best_i >= 0
    for i, prim in enumerate(prims):
        sel = hit & (best_i == i)
        if not sel.any():
            continue
        p = o + best_t[sel, None] * du[sel]
        n = _normal(prim, p)
        lam = 0.3 + 0.7 * np.maximum(n @ LIGHT_DIR, 0.0)
        color[sel] = np.clip(_albedo(prim, p) * lam[:, None], 0, 1)
        depth[sel] = (camera.R @ (p - o).T)[2]

    return View(color=color.reshape(h, w, 3).astype(np.float32),
                mask=hit.reshape(h, w).astype(np.float32),
                depth=depth.reshape(h, w).astype(np.float32),
                camera=camera)


# -- procedural subjects -------------------------------------------------------

def _rand_color(rng):
    c = rng.uniform(0.15, 0.95, 3)
    return c


def _rand_rot(rng):
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _axis_rot(axis):
    """Rotation whose z column equals `axis`."""
    z = axis / np.linalg.norm(axis)
    ref = np.array([1.0, 0, 0]) if abs(z[0]) < 0.9 else np.array([0.0, 1, 0])
    x = np.cross(ref, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def _capsule(rng, p0, p1, r):
    mid = (np.asarray(p0) + np.asarray(p1)) / 2
    axis = np.asarray(p1, dtype=np.float64) - p0
    half = np.linalg.norm(axis) / 2
    return Primitive("capsule", mid, _axis_rot(axis), np.array([half, r]),
                     _rand_color(rng), _rand_color(rng),
                     rng.choice(["checker", "waves"]), rng.uniform(6, 16))


def generate_subject(rng) -> list[Primitive]:
    """Stick-figure-like arrangement of 7-12 textured primitives near the origin."""
    prims = []
    lean = rng.uniform(-0.08, 0.08, 2)
    hip = np.array([0.0, -0.25, 0.0])
    neck = np.array([lean[0], 0.35, lean[1]])
    prims.append(_capsule(rng, hip, neck, rng.uniform(0.10, 0.15)))
    head_c = neck + np.array([0, rng.uniform(0.14, 0.18), 0])
    prims.append(Primitive("sphere", head_c, np.eye(3), np.array([rng.uniform(0.08, 0.12)]),
                           _rand_color(rng), _rand_color(rng),
                           rng.choice(["checker", "waves"]), rng.uniform(8, 18)))
    for side in (-1, 1):  # arms
        sh = neck + np.array([side * 0.16, -0.05, 0])
        d = np.array([side * 0.5, -1.0, 0]) + rng.standard_normal(3) * 0.35
        d[1] = -abs(d[1])
        d = d / np.linalg.norm(d) * rng.uniform(0.35, 0.5)
        prims.append(_capsule(rng, sh, sh + d, rng.uniform(0.035, 0.055)))
    for side in (-1, 1):  # legs
        hp = hip + np.array([side * 0.09, 0, 0])
        d = np.array([side * 0.2, -1.0, 0]) + rng.standard_normal(3) * 0.2
        d[1] = -abs(d[1]) - 0.3
        d = d / np.linalg.norm(d) * rng.uniform(0.45, 0.6)
        prims.append(_capsule(rng, hp, hp + d, rng.uniform(0.045, 0.065)))
    for _ in range(rng.integers(0, 6)):  # props
        pos = rng.uniform(-0.55, 0.55, 3)
        kind = rng.choice(["sphere", "box", "capsule"])
        if kind == "sphere":
            params = np.array([rng.uniform(0.05, 0.12)])
        elif kind == "box":
            params = rng.uniform(0.04, 0.12, 3)
        else:
            params = np.array([rng.uniform(0.08, 0.2), rng.uniform(0.03, 0.06)])
        prims.append(Primitive(kind, pos, _rand_rot(rng), params,
                               _rand_color(rng), _rand_color(rng),
                               rng.choice(["checker", "waves"]), rng.uniform(6, 16)))
    return prims


# -- ring + targets ------------------------------------------------------------

RING_RADIUS = 2.0
N_SOURCES = 8
N_TARGETS = 3


def _ring_position(azimuth_deg, radius=RING_RADIUS, elevation_deg=0.0):
    a = np.radians(azimuth_deg)
    e = np.radians(elevation_deg)
    return np.array([radius * np.cos(e) * np.sin(a), radius * np.sin(e), radius * np.cos(e) * np.cos(a)])


def default_intrinsics(resolution):
    f = 0.95 * resolution
    c = resolution / 2.0
    return np.array([[f, 0, c], [0, f, c], [0, 0, 1.0]])


def build_ring_cameras(resolution, rng=None, randomized=False):
    """8 cameras at 45 deg steps looking at the origin; optionally jittered
    with pitch in [-20, 20] deg and yaw in [-25, 25] deg."""
    K = default_intrinsics(resolution)
    cams = []
    for i in range(N_SOURCES):
        az = i * 45.0
        el = 0.0
        if randomized:
            az += rng.uniform(-25, 25)
            el = rng.uniform(-20, 20)
        cams.append(look_at_camera(_ring_position(az, elevation_deg=el), [0, 0, 0],
                                   K, resolution, resolution))
    return cams


def sample_target_cameras(resolution, rng, n=N_TARGETS):
    """Novel views on the arcs between adjacent ring cameras (uniform azimuth)."""
    K = default_intrinsics(resolution)
    arcs = rng.choice(N_SOURCES, size=n, replace=False)
    cams = []
    for arc in arcs:
        az = arc * 45.0 + rng.uniform(0.0, 45.0)
        cams.append(look_at_camera(_ring_position(az), [0, 0, 0], K, resolution, resolution))
    return cams


# -- scene IO -------------------------------------------------------------------

def generate_scene(out_dir, seed, resolution=256, randomized_ring=False) -> SceneSample:
    """Deterministic scene from `seed`, written to `out_dir` and returned."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    prims = generate_subject(rng)
    source_cams = build_ring_cameras(resolution, rng, randomized_ring)
    target_cams = sample_target_cameras(resolution, rng)

    sources, targets = [], []
    for i, cam in enumerate(source_cams):
        view = render_view(cam, prims)
        d = out_dir / f"view_{i}"
        d.mkdir(parents=True, exist_ok=True)
        save_png(d / "color.png", view.color)
        save_png(d / "mask.png", view.mask)
        save_pfm(d / "depth.pfm", view.depth)
        sources.append(view)
    for j, cam in enumerate(target_cams):
        view = render_view(cam, prims)
        view.depth = None
        d = out_dir / f"target_{j}"
        d.mkdir(parents=True, exist_ok=True)
        save_png(d / "color.png", view.color)
        save_png(d / "mask.png", view.mask)
        (d / "camera.json").write_text(json.dumps(cam.to_json(j)))
        targets.append(view)
    cam_mod.save_cameras(out_dir / "cameras.json", source_cams)
    return SceneSample(out_dir.name, sources, targets, np.zeros(3), seed)


def load_scene(scene_dir, center=(0, 0, 0), with_depth=True) -> SceneSample:
    scene_dir = Path(scene_dir)
    cam_file = scene_dir / "cameras.json"
    if not cam_file.exists():
        raise FileNotFoundError(f"missing {cam_file}")
    cams = cam_mod.load_cameras(cam_file)
    sources = []
    for i, cam in enumerate(cams):
        d = scene_dir / f"view_{i}"
        color = load_png(d / "color.png")
        mask = load_png(d / "mask.png", srgb=False)
        depth = load_pfm(d / "depth.pfm") if with_depth else None
        for name, arr in (("color", color), ("mask", mask)):
            if arr.shape[:2] != (cam.height, cam.width):
                raise ValueError(f"{d / name}: dimension mismatch {arr.shape[:2]} "
                                 f"vs camera {cam.height}x{cam.width}")
        sources.append(View(color, mask, cam, depth))
    targets = []
    j = 0
    while (scene_dir / f"target_{j}").exists():
        d = scene_dir / f"target_{j}"
        cam = PinholeCamera.from_json(json.loads((d / "camera.json").read_text()))
        targets.append(View(load_png(d / "color.png"), load_png(d / "mask.png", srgb=False), cam))
        j += 1
    return SceneSample(scene_dir.name, sources, targets, np.asarray(center, dtype=np.float64))


def generate_dataset(out_dir, n_scenes=140, n_val=20, resolution=256, seed=0,
                     randomized_ring=False, progress=None):
    """Write `n_scenes` scenes plus a manifest; the last `n_val` form the val split."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scenes = []
    for k in range(n_scenes):
        name = f"scene_{k:04d}"
        split = "val" if k >= n_scenes - n_val else "train"
        generate_scene(out_dir / name, seed=seed + k, resolution=resolution,
                       randomized_ring=randomized_ring)
        scenes.append({"name": name, "split": split, "seed": seed + k})
        if progress:
            progress(k + 1, n_scenes)
    manifest = {"center": [0.0, 0.0, 0.0], "resolution": resolution, "seed": seed,
                "ring_radius": RING_RADIUS, "scenes": scenes}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def load_manifest(data_dir):
    return json.loads((Path(data_dir) / "manifest.json").read_text())


def scene_names(data_dir, split=None):
    m = load_manifest(data_dir)
    return [s["name"] for s in m["scenes"] if split is None or s["split"] == split]


# -- rectified training views ----------------------------------------------------

@dataclass
class RectifiedPairData:
    pair: cam_mod.RectifiedStereoPair
    color: np.ndarray      # (2,H,W,3) left,right
    mask: np.ndarray       # (2,H,W)
    depth: np.ndarray      # (2,H,W) rectified camera-z, 0 background
    disparity: np.ndarray  # (2,H,W) ground-truth, 0 invalid
    indices: tuple[int, int]


def prepare_rectified_pair(sample: SceneSample, il: int, ir: int,
                           with_depth=True) -> RectifiedPairData:
    vl, vr = sample.sources[il], sample.sources[ir]
    pair = cam_mod.rectify_pair(vl.camera, vr.camera)
    colors, masks, depths, disps = [], [], [], []
    for view, H, rect in ((vl, pair.H_left, pair.left), (vr, pair.H_right, pair.right)):
        colors.append(cam_mod.warp_to_rectified(view.color, H, rect.width, rect.height))
        m = cam_mod.warp_to_rectified(view.mask, H, rect.width, rect.height, method="nearest")
        masks.append(m)
        if with_depth and view.depth is not None:
            z = cam_mod.warp_depth_to_rectified(view.depth, view.camera, rect, H)
            z = z * (m > 0)
            depths.append(z)
            d, _ = cam_mod.depth_to_disparity(z, pair)
            disps.append(d)
    depth = np.stack(depths).astype(np.float32) if depths else np.zeros((2, 1, 1), np.float32)
    disp = np.stack(disps).astype(np.float32) if disps else np.zeros((2, 1, 1), np.float32)
    return RectifiedPairData(pair, np.stack(colors).astype(np.float32),
                             np.stack(masks).astype(np.float32), depth, disp, (il, ir))
