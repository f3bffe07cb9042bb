"""Pinhole camera algebra: rings, view selection, rectification, (un)projection.

Conventions: world units are meters; camera frame is x-right / y-down /
z-forward (right-handed); R maps world to camera, C = -R^T t is the center.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def _normalize(v):
    n = np.linalg.norm(v)
    if n < 1e-12:
        raise ValueError("cannot normalize zero-length vector")
    return v / n


@dataclass
class PinholeCamera:
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if np.abs(self.R @ self.R.T - np.eye(3)).max() > 1e-6:
            raise ValueError("R is not orthonormal")
        if np.linalg.det(self.R) < 0:
            raise ValueError("R has negative determinant")
        fx, fy = self.K[0, 0], self.K[1, 1]
        if fx <= 0 or fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={fx}, fy={fy}")
        cx, cy = self.K[0, 2], self.K[1, 2]
        if not (0 <= cx <= self.width and 0 <= cy <= self.height):
            raise ValueError(f"principal point ({cx},{cy}) outside image {self.width}x{self.height}")

    @property
    def center(self):
        return -self.R.T @ self.t

    @property
    def fx(self):
        return self.K[0, 0]

    @property
    def fy(self):
        return self.K[1, 1]

    def world_to_cam(self, points):
        return np.atleast_2d(points) @ self.R.T + self.t

    def project(self, points):
        """World points (N,3) -> pixel coords (N,2) and camera-frame depth (N,)."""
        pc = self.world_to_cam(points)
        z = pc[:, 2]
        u = self.K[0, 0] * pc[:, 0] / z + self.K[0, 2]
        v = self.K[1, 1] * pc[:, 1] / z + self.K[1, 2]
        return np.stack([u, v], axis=-1), z

    def unproject(self, pixels, depth):
        """Pixels (N,2) + camera-frame depth (N,) -> world points (N,3)."""
        depth = np.atleast_1d(np.asarray(depth, dtype=np.float64))
        if np.any(depth <= 0):
            raise ValueError("unproject requires positive depth")
        px = np.atleast_2d(pixels).astype(np.float64)
        x = (px[:, 0] - self.K[0, 2]) / self.K[0, 0]
        y = (px[:, 1] - self.K[1, 2]) / self.K[1, 1]
        pc = np.stack([x * depth, y * depth, depth], axis=-1)
        return (pc - self.t) @ self.R

    def ray_directions(self):
        """World-frame directions with unit camera-z, per pixel (H,W,3)."""
        u, v = np.meshgrid(np.arange(self.width, dtype=np.float64),
                           np.arange(self.height, dtype=np.float64))
        x = (u - self.K[0, 2]) / self.K[0, 0]
        y = (v - self.K[1, 2]) / self.K[1, 1]
        d = np.stack([x, y, np.ones_like(x)], axis=-1)
        return d @ self.R

    def to_json(self, cam_id=0):
        return {"id": int(cam_id), "K": self.K.reshape(-1).tolist(),
                "R": self.R.reshape(-1).tolist(), "t": self.t.tolist(),
                "width": int(self.width), "height": int(self.height)}

    @staticmethod
    def from_json(d):
        for key in ("K", "R", "t", "width", "height"):
            if key not in d:
                raise ValueError(f"camera {d.get('id', '?')}: missing field {key}")
        try:
            return PinholeCamera(np.array(d["K"]), np.array(d["R"]), np.array(d["t"]),
                                 int(d["width"]), int(d["height"]))
        except ValueError as e:
            raise ValueError(f"camera {d.get('id', '?')}: {e}") from e


def look_at_camera(position, target, K, width, height, up=(0.0, 1.0, 0.0)):
    """Camera at `position` with optical axis toward `target`."""
    position = np.asarray(position, dtype=np.float64)
    f = _normalize(np.asarray(target, dtype=np.float64) - position)
    up = np.asarray(up, dtype=np.float64)
    if np.linalg.norm(np.cross(f, up)) < 1e-9:
        raise ValueError("look direction parallel to up vector")
    r = _normalize(np.cross(f, up))
    d = np.cross(f, r)
    R = np.stack([r, d, f])
    return PinholeCamera(K, R, -R @ position, width, height)


@dataclass
class ViewRing:
    cameras: list[PinholeCamera]
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        if len(self.cameras) < 2:
            raise ValueError("a view ring needs at least 2 cameras")
        for i, cam in enumerate(self.cameras):
            if np.linalg.norm(cam.center - self.center) < 1e-9:
                raise ValueError(f"camera {i} coincides with the scene center")

    def view_vectors(self):
        return np.stack([c.center - self.center for c in self.cameras])


def select_working_pair(ring: ViewRing, target_position) -> tuple[int, int]:
    """Indices of the two ring views nearest to the target direction, as (left, right).

    Nearness is the dot product of normalized view vectors V_n = C_n - O with
    V_target; the left/right roles are assigned so the pair forms a valid
    rectified order seen from the target. Ties break toward the lower index.
    """
    target_position = np.asarray(target_position, dtype=np.float64)
    vt = target_position - ring.center
    if np.linalg.norm(vt) < 1e-12:
        raise ValueError("target position coincides with the scene center")
    vt = _normalize(vt)
    V = ring.view_vectors()
    Vn = V / np.linalg.norm(V, axis=1, keepdims=True)
    if np.linalg.matrix_rank(Vn, tol=1e-9) < 2:
        raise ValueError("degenerate ring: all cameras collinear with the scene center")
    scores = Vn @ vt
    order = np.lexsort((np.arange(len(scores)), -scores))
    a, b = int(order[0]), int(order[1])

    # left/right seen from the target looking at the scene center
    forward = _normalize(ring.center - target_position)
    up = -(ring.cameras[a].R[1] + ring.cameras[b].R[1]) / 2.0
    right_dir = np.cross(forward, up)
    sa = np.dot(ring.cameras[a].center - target_position, right_dir)
    sb = np.dot(ring.cameras[b].center - target_position, right_dir)
    if sa == sb:
        return (min(a, b), max(a, b))
    return (a, b) if sa < sb else (b, a)


@dataclass
class RectifiedStereoPair:
    left: PinholeCamera
    right: PinholeCamera
    baseline: float
    focal: float
    H_left: np.ndarray   # original -> rectified pixel homography
    H_right: np.ndarray

    @property
    def rect_to_world_rotation(self):
        """Shared rotation taking rectified-camera coords to world coords."""
        return self.left.R.T


def rectify_pair(cam_l: PinholeCamera, cam_r: PinholeCamera) -> RectifiedStereoPair:
    """Classic plane rectification: rotate both views onto a common plane whose
    x-axis is the baseline, sharing intrinsics with the mean focal length."""
    C_l, C_r = cam_l.center, cam_r.center
    b = C_r - C_l
    B = np.linalg.norm(b)
    if B < 1e-9:
        raise ValueError("rectify_pair: baseline is (near) zero")
    x_new = b / B
    z_l, z_r = cam_l.R[2], cam_r.R[2]
    if np.dot(z_l, z_r) < 0:
        raise ValueError("rectify_pair: convergence angle exceeds 90 degrees")
    z_avg = _normalize(z_l + z_r)
    if abs(np.dot(z_avg, x_new)) > 0.9:
        raise ValueError("rectify_pair: optical axes nearly parallel to the baseline")
    y_new = _normalize(np.cross(z_avg, x_new))
    z_new = np.cross(x_new, y_new)
    R_new = np.stack([x_new, y_new, z_new])

    f = float(np.mean([cam_l.fx, cam_l.fy, cam_r.fx, cam_r.fy]))
    cx = float((cam_l.K[0, 2] + cam_r.K[0, 2]) / 2)
    cy = float((cam_l.K[1, 2] + cam_r.K[1, 2]) / 2)
    K_new = np.array([[f, 0, cx], [0, f, cy], [0, 0, 1.0]])

    H_l = K_new @ R_new @ cam_l.R.T @ np.linalg.inv(cam_l.K)
    H_r = K_new @ R_new @ cam_r.R.T @ np.linalg.inv(cam_r.K)
    left = PinholeCamera(K_new, R_new, -R_new @ C_l, cam_l.width, cam_l.height)
    right = PinholeCamera(K_new, R_new, -R_new @ C_r, cam_r.width, cam_r.height)
    return RectifiedStereoPair(left, right, float(B), f, H_l, H_r)


def disparity_to_depth(disp, pair: RectifiedStereoPair, mask=None):
    """depth = f*B / disparity on valid pixels; returns (depth, valid) with 0 sentinels."""
    disp = np.asarray(disp, dtype=np.float64)
    valid = disp > 0
    if mask is not None:
        valid = valid & (np.asarray(mask) > 0)
    depth = np.zeros_like(disp)
    depth[valid] = pair.focal * pair.baseline / disp[valid]
    return depth, valid


def depth_to_disparity(depth, pair: RectifiedStereoPair, mask=None):
    depth = np.asarray(depth, dtype=np.float64)
    valid = depth > 0
    if mask is not None:
        valid = valid & (np.asarray(mask) > 0)
    disp = np.zeros_like(depth)
    disp[valid] = pair.focal * pair.baseline / depth[valid]
    return disp, valid


# -- rectification warps -----------------------------------------------------

def _inverse_map(H, width, height):
    """Source pixel coords sampled by each rectified pixel, shape (H,W,2)."""
    Hinv = np.linalg.inv(H)
    u, v = np.meshgrid(np.arange(width, dtype=np.float64),
                       np.arange(height, dtype=np.float64))
    pts = np.stack([u, v, np.ones_like(u)], axis=-1) @ Hinv.T
    return pts[..., :2] / pts[..., 2:3]


def _bilinear_sample(img, coords):
    h, w = img.shape[:2]
    x = np.clip(coords[..., 0], 0, w - 1)
    y = np.clip(coords[..., 1], 0, h - 1)
    x0 = np.clip(np.floor(x).astype(np.int64), 0, w - 2) if w > 1 else np.zeros_like(x, np.int64)
    y0 = np.clip(np.floor(y).astype(np.int64), 0, h - 2) if h > 1 else np.zeros_like(y, np.int64)
    tx = (x - x0)[..., None]
    ty = (y - y0)[..., None]
    im = img if img.ndim == 3 else img[..., None]
    out = (im[y0, x0] * (1 - tx) * (1 - ty) + im[y0, x0 + 1] * tx * (1 - ty)
           + im[y0 + 1, x0] * (1 - tx) * ty + im[y0 + 1, x0 + 1] * tx * ty)
    return out if img.ndim == 3 else out[..., 0]


def _nearest_sample(img, coords):
    h, w = img.shape[:2]
    x = np.clip(np.round(coords[..., 0]).astype(np.int64), 0, w - 1)
    y = np.clip(np.round(coords[..., 1]).astype(np.int64), 0, h - 1)
    return img[y, x]


def warp_to_rectified(img, H, width, height, method="bilinear"):
    """Warp an original-view image into the rectified frame given H (orig->rect)."""
    coords = _inverse_map(H, width, height)
    inside = ((coords[..., 0] >= -0.5) & (coords[..., 0] <= img.shape[1] - 0.5)
              & (coords[..., 1] >= -0.5) & (coords[..., 1] <= img.shape[0] - 0.5))
    out = _bilinear_sample(img, coords) if method == "bilinear" else _nearest_sample(img, coords)
    out = out * inside[..., None] if out.ndim == 3 else out * inside
    return out


def warp_depth_to_rectified(depth, cam: PinholeCamera, rect_cam: PinholeCamera, H):
    """Resample a camera-z depth map into the rectified frame.

    Rectification is a pure rotation about the camera center, so depth values
    must be re-expressed as z along the rectified optical axis.
    """
    coords = _inverse_map(H, rect_cam.width, rect_cam.height)
    z_old = _nearest_sample(depth, coords)
    valid = z_old > 0
    out = np.zeros_like(z_old)
    if np.any(valid):
        px = coords[valid]
        x = (px[:, 0] - cam.K[0, 2]) / cam.K[0, 0]
        y = (px[:, 1] - cam.K[1, 2]) / cam.K[1, 1]
        pc = np.stack([x, y, np.ones_like(x)], axis=-1) * z_old[valid][:, None]
        rot = rect_cam.R @ cam.R.T
        out[valid] = (pc @ rot.T)[:, 2]
    return out


# -- camera file IO ----------------------------------------------------------

def save_cameras(path, cameras: list[PinholeCamera]):
    Path(path).write_text(json.dumps([c.to_json(i) for i, c in enumerate(cameras)], indent=1))


def load_cameras(path) -> list[PinholeCamera]:
    data = json.loads(Path(path).read_text())
    cams = [None] * len(data)
    for d in data:
        cams[int(d["id"])] = PinholeCamera.from_json(d)
    return cams
