"""Differentiable tile-based Gaussian splatting.

The per-splat projection chain (covariance from quaternion/scale, perspective
Jacobian, 2D conic) is expressed in autodiff tensor ops, so its backward pass
comes from the tape. Only the per-pixel front-to-back blend is a custom op
with a hand-written (numba) forward/backward kernel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .camera import PinholeCamera
from .tensor import engine as T
from .tensor.engine import Tensor

TILE = 16
Z_NEAR = 0.01
ALPHA_CLAMP = 0.99
ALPHA_SKIP = 1.0 / 255.0
T_STOP = 1e-4
DILATION = 0.3  # px^2 added to the 2D covariance diagonal


@dataclass
class Splat2D:
    mean2d: np.ndarray   # (N,2) pixels
    conic: np.ndarray    # (N,3) inverse 2D covariance (a,b,c)
    depth: np.ndarray    # (N,) camera z
    color: np.ndarray    # (N,3)
    opacity: np.ndarray  # (N,)
    radius: np.ndarray   # (N,) 3-sigma bound in px


@dataclass
class RenderOutput:
    image: Tensor            # (H,W,3)
    alpha: np.ndarray        # (H,W) accumulated opacity
    contributors: np.ndarray  # (H,W) blended splat count (diagnostics)


def build_covariance(quat, scale):
    """Sigma = R diag(s)^2 R^T for a unit quaternion (w,x,y,z). Numpy oracle path."""
    w, x, y, z = np.asarray(quat, dtype=np.float64)
    R = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])
    S = np.diag(np.asarray(scale, dtype=np.float64))
    M = R @ S
    return M @ M.T


def _rot_entries(qw, qx, qy, qz):
    """Rotation matrix entries as 9 element-wise tensors from unit quaternion columns."""
    return [
        1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qw * qz), 2 * (qx * qz + qw * qy),
        2 * (qx * qy + qw * qz), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qw * qx),
        2 * (qx * qz - qw * qy), 2 * (qy * qz + qw * qx), 1 - 2 * (qx * qx + qy * qy),
    ]


def project_chain(position, quat, scale, cam: PinholeCamera):
    """Differentiable projection: world splats -> (mean2d (N,2), conic (N,3), depth (N,)).

    mean projects through K(Rp + t); the 2D covariance is J W Sigma W^T J^T with
    J the perspective Jacobian at the point, dilated by +DILATION on the diagonal.
    """
    dt = position.dtype
    Rw = cam.R.astype(dt)
    tw = cam.t.astype(dt)
    fx, fy = dt.type(cam.fx), dt.type(cam.fy)
    cx, cy = dt.type(cam.K[0, 2]), dt.type(cam.K[1, 2])

    px, py, pz = position[:, 0], position[:, 1], position[:, 2]
    xc = Rw[0, 0] * px + Rw[0, 1] * py + Rw[0, 2] * pz + tw[0]
    yc = Rw[1, 0] * px + Rw[1, 1] * py + Rw[1, 2] * pz + tw[1]
    zc = Rw[2, 0] * px + Rw[2, 1] * py + Rw[2, 2] * pz + tw[2]
    u = fx * xc / zc + cx
    v = fy * yc / zc + cy
    mean2d = T.stack([u, v], axis=1)

    rot = _rot_entries(quat[:, 0], quat[:, 1], quat[:, 2], quat[:, 3])
    s0, s1, s2 = scale[:, 0] ** 2.0, scale[:, 1] ** 2.0, scale[:, 2] ** 2.0
    sq = [s0, s1, s2]
    # Sigma_ab = sum_j R_aj R_bj s_j^2 (6 unique entries)
    sigma = {}
    for a in range(3):
        for bb in range(a, 3):
            acc = rot[3 * a + 0] * rot[3 * bb + 0] * sq[0]
            acc = acc + rot[3 * a + 1] * rot[3 * bb + 1] * sq[1]
            acc = acc + rot[3 * a + 2] * rot[3 * bb + 2] * sq[2]
            sigma[(a, bb)] = acc
            sigma[(bb, a)] = acc

    iz = 1.0 / zc
    iz2 = iz * iz
    # A = J @ W rows; J = [[fx/z, 0, -fx x/z^2], [0, fy/z, -fy y/z^2]]
    A = [[None] * 3, [None] * 3]
    for i in range(3):
        A[0][i] = fx * iz * Rw[0, i] - fx * xc * iz2 * Rw[2, i]
        A[1][i] = fy * iz * Rw[1, i] - fy * yc * iz2 * Rw[2, i]
    # cov2d_ab = sum_ij A_ai Sigma_ij A_bj
    cov = {}
    for a in range(2):
        for bb in range(a, 2):
            acc = None
            for i in range(3):
                for j in range(3):
                    term = A[a][i] * sigma[(i, j)] * A[bb][j]
                    acc = term if acc is None else acc + term
            cov[(a, bb)] = acc
    ca = cov[(0, 0)] + DILATION
    cb = cov[(0, 1)]
    cc = cov[(1, 1)] + DILATION
    det = ca * cc - cb * cb
    conic = T.stack([cc / det, -cb / det, ca / det], axis=1)
    return mean2d, conic, zc


def project_gaussians(cloud, cam: PinholeCamera) -> Splat2D:
    """Non-differentiable inspection path sharing the projection math."""
    with T.no_grad():
        pos = Tensor(np.asarray(cloud.position.data if isinstance(cloud.position, Tensor)
                                else cloud.position))
        quat = Tensor(np.asarray(cloud.rotation.data if isinstance(cloud.rotation, Tensor)
                                 else cloud.rotation))
        scale = Tensor(np.asarray(cloud.scale.data if isinstance(cloud.scale, Tensor)
                                  else cloud.scale))
        z = (pos.data @ cam.R.T + cam.t)[:, 2]
        keep = z > Z_NEAR
        idx = np.nonzero(keep)[0]
        mean2d, conic, depth = project_chain(Tensor(pos.data[idx]), Tensor(quat.data[idx]),
                                             Tensor(scale.data[idx]), cam)
        radius = _radius_from_conic(conic.data)
        color = np.asarray(cloud.color.data if isinstance(cloud.color, Tensor) else cloud.color)[idx]
        opac = np.asarray(cloud.opacity.data if isinstance(cloud.opacity, Tensor)
                          else cloud.opacity)[idx]
    return Splat2D(mean2d.data, conic.data, depth.data, color, opac, radius)


def _radius_from_conic(conic):
    """3*sqrt(max eigenvalue) of the 2D covariance, recovered from its inverse."""
    a, b, c = conic[:, 0], conic[:, 1], conic[:, 2]
    det_inv = a * c - b * b
    # covariance entries: (c, -b, a) / det_inv
    ca, cb, cc = c / det_inv, -b / det_inv, a / det_inv
    mid = 0.5 * (ca + cc)
    lam = mid + np.sqrt(np.maximum(mid * mid - (ca * cc - cb * cb), 0.0))
    return 3.0 * np.sqrt(np.maximum(lam, 0.0))


# -- tile binning -------------------------------------------------------------

@njit(cache=True)
def _count_pairs(u, v, radius, h, w, tile):
    ntx = (w + tile - 1) // tile
    nty = (h + tile - 1) // tile
    total = 0
    for s in range(u.shape[0]):
        x0 = int(np.floor((u[s] - radius[s]) / tile))
        x1 = int(np.floor((u[s] + radius[s]) / tile))
        y0 = int(np.floor((v[s] - radius[s]) / tile))
        y1 = int(np.floor((v[s] + radius[s]) / tile))
        x0 = max(x0, 0); y0 = max(y0, 0)
        x1 = min(x1, ntx - 1); y1 = min(y1, nty - 1)
        if x1 < x0 or y1 < y0:
            continue
        total += (x1 - x0 + 1) * (y1 - y0 + 1)
    return total


@njit(cache=True)
def _fill_pairs(u, v, radius, h, w, tile, tile_ids, splat_ids):
    ntx = (w + tile - 1) // tile
    nty = (h + tile - 1) // tile
    k = 0
    for s in range(u.shape[0]):
        x0 = int(np.floor((u[s] - radius[s]) / tile))
        x1 = int(np.floor((u[s] + radius[s]) / tile))
        y0 = int(np.floor((v[s] - radius[s]) / tile))
        y1 = int(np.floor((v[s] + radius[s]) / tile))
        x0 = max(x0, 0); y0 = max(y0, 0)
        x1 = min(x1, ntx - 1); y1 = min(y1, nty - 1)
        if x1 < x0 or y1 < y0:
            continue
        for ty in range(y0, y1 + 1):
            for tx in range(x0, x1 + 1):
                tile_ids[k] = ty * ntx + tx
                splat_ids[k] = s
                k += 1


def bin_splats(mean2d, radius, h, w):
    """CSR tile lists over depth-sorted splats. Returns (splat_idx, start, count)."""
    ntiles = ((w + TILE - 1) // TILE) * ((h + TILE - 1) // TILE)
    u, v = mean2d[:, 0], mean2d[:, 1]
    total = _count_pairs(u, v, radius, h, w, TILE)
    tile_ids = np.empty(total, dtype=np.int64)
    splat_ids = np.empty(total, dtype=np.int64)
    _fill_pairs(u, v, radius, h, w, TILE, tile_ids, splat_ids)
    order = np.argsort(tile_ids, kind="stable")  # keeps depth order within a tile
    tile_ids = tile_ids[order]
    splat_ids = splat_ids[order]
    start = np.searchsorted(tile_ids, np.arange(ntiles))
    end = np.searchsorted(tile_ids, np.arange(ntiles), side="right")
    return splat_ids, start.astype(np.int64), (end - start).astype(np.int64)


# -- blending kernels ----------------------------------------------------------

@njit(cache=True)
def _blend_forward(mean2d, conic, color, opacity, splat_ids, start, count,
                   h, w, bg, out_img, out_t, out_n):
    ntx = (w + TILE - 1) // TILE
    for tidx in range(start.shape[0]):
        ty, tx = tidx // ntx, tidx % ntx
        for py in range(ty * TILE, min(h, (ty + 1) * TILE)):
            for px in range(tx * TILE, min(w, (tx + 1) * TILE)):
                trans = 1.0
                c0 = 0.0; c1 = 0.0; c2 = 0.0
                n = 0
                for k in range(start[tidx], start[tidx] + count[tidx]):
                    s = splat_ids[k]
                    dx = px - mean2d[s, 0]
                    dy = py - mean2d[s, 1]
                    power = -0.5 * (conic[s, 0] * dx * dx + conic[s, 2] * dy * dy) \
                        - conic[s, 1] * dx * dy
                    if power > 0.0:
                        continue
                    alpha = opacity[s] * np.exp(power)
                    if alpha > ALPHA_CLAMP:
                        alpha = ALPHA_CLAMP
                    if alpha < ALPHA_SKIP:
                        continue
                    c0 += color[s, 0] * alpha * trans
                    c1 += color[s, 1] * alpha * trans
                    c2 += color[s, 2] * alpha * trans
                    trans *= 1.0 - alpha
                    n = k - start[tidx] + 1
                    if trans < T_STOP:
                        break
                out_img[py, px, 0] = c0 + trans * bg[0]
                out_img[py, px, 1] = c1 + trans * bg[1]
                out_img[py, px, 2] = c2 + trans * bg[2]
                out_t[py, px] = trans
                out_n[py, px] = n


@njit(cache=True)
def _blend_backward(mean2d, conic, color, opacity, splat_ids, start, count,
                    h, w, bg, out_t, out_n, grad_img,
                    g_mean, g_conic, g_color, g_opac):
    ntx = (w + TILE - 1) // TILE
    for tidx in range(start.shape[0]):
        ty, tx = tidx // ntx, tidx % ntx
        for py in range(ty * TILE, min(h, (ty + 1) * TILE)):
            for px in range(tx * TILE, min(w, (tx + 1) * TILE)):
                n = out_n[py, px]
                if n == 0:
                    continue
                g0 = grad_img[py, px, 0]
                g1 = grad_img[py, px, 1]
                g2 = grad_img[py, px, 2]
                if g0 == 0.0 and g1 == 0.0 and g2 == 0.0:
                    continue
                t_cur = out_t[py, px]
                # suffix sums S_ch = sum_{j>i} c_j a_j T_j + T_final * bg
                s0 = t_cur * bg[0]
                s1 = t_cur * bg[1]
                s2 = t_cur * bg[2]
                for k in range(start[tidx] + n - 1, start[tidx] - 1, -1):
                    s = splat_ids[k]
                    dx = px - mean2d[s, 0]
                    dy = py - mean2d[s, 1]
                    power = -0.5 * (conic[s, 0] * dx * dx + conic[s, 2] * dy * dy) \
                        - conic[s, 1] * dx * dy
                    if power > 0.0:
                        continue
                    ealpha = opacity[s] * np.exp(power)
                    clamped = ealpha > ALPHA_CLAMP
                    alpha = ALPHA_CLAMP if clamped else ealpha
                    if alpha < ALPHA_SKIP:
                        continue
                    t_i = t_cur / (1.0 - alpha)
                    # color gradient
                    at = alpha * t_i
                    g_color[s, 0] += g0 * at
                    g_color[s, 1] += g1 * at
                    g_color[s, 2] += g2 * at
                    # alpha gradient
                    ga = g0 * (color[s, 0] * t_i - s0 / (1.0 - alpha)) \
                        + g1 * (color[s, 1] * t_i - s1 / (1.0 - alpha)) \
                        + g2 * (color[s, 2] * t_i - s2 / (1.0 - alpha))
                    if not clamped:
                        g_opac[s] += ga * np.exp(power)
                        gp = ga * alpha  # d alpha / d power = alpha
                        g_conic[s, 0] += gp * (-0.5 * dx * dx)
                        g_conic[s, 1] += gp * (-dx * dy)
                        g_conic[s, 2] += gp * (-0.5 * dy * dy)
                        gdx = gp * (-(conic[s, 0] * dx + conic[s, 1] * dy))
                        gdy = gp * (-(conic[s, 2] * dy + conic[s, 1] * dx))
                        g_mean[s, 0] += -gdx
                        g_mean[s, 1] += -gdy
                    s0 += color[s, 0] * at
                    s1 += color[s, 1] * at
                    s2 += color[s, 2] * at
                    t_cur = t_i


def _blend_op(mean2d, conic, color, opacity, splat_ids, start, count, h, w, background):
    dt = mean2d.dtype
    bg = np.asarray(background, dtype=dt)
    out_img = np.zeros((h, w, 3), dtype=dt)
    out_t = np.ones((h, w), dtype=dt)
    out_n = np.zeros((h, w), dtype=np.int64)
    _blend_forward(mean2d.data, conic.data, color.data, opacity.data,
                   splat_ids, start, count, h, w, bg, out_img, out_t, out_n)

    def vjp(g):
        g_mean = np.zeros_like(mean2d.data)
        g_conic = np.zeros_like(conic.data)
        g_color = np.zeros_like(color.data)
        g_opac = np.zeros_like(opacity.data)
        _blend_backward(mean2d.data, conic.data, color.data, opacity.data,
                        splat_ids, start, count, h, w, bg, out_t, out_n,
                        np.ascontiguousarray(g, dtype=dt),
                        g_mean, g_conic, g_color, g_opac)
        return g_mean, g_conic, g_color, g_opac

    out = T._record([mean2d, conic, color, opacity], out_img, vjp)
    return out, out_t, out_n


def render(cloud, cam: PinholeCamera, background=(0.0, 0.0, 0.0)) -> RenderOutput:
    """Project, bin, sort and blend a GaussianCloud into the camera. Differentiable."""
    pos = cloud.position if isinstance(cloud.position, Tensor) else Tensor(cloud.position)
    quat = cloud.rotation if isinstance(cloud.rotation, Tensor) else Tensor(cloud.rotation)
    scale = cloud.scale if isinstance(cloud.scale, Tensor) else Tensor(cloud.scale)
    color = cloud.color if isinstance(cloud.color, Tensor) else Tensor(cloud.color)
    opac = cloud.opacity if isinstance(cloud.opacity, Tensor) else Tensor(cloud.opacity)
    h, w = cam.height, cam.width
    dt = pos.dtype

    z = (pos.data @ cam.R.T + cam.t)[:, 2]
    keep = np.nonzero(z > Z_NEAR)[0]
    if keep.size == 0:
        img = np.broadcast_to(np.asarray(background, dtype=dt), (h, w, 3)).copy()
        return RenderOutput(Tensor(img), np.zeros((h, w), dtype=dt),
                            np.zeros((h, w), dtype=np.int64))
    # global front-to-back depth order, stable tie-break on point index
    order = keep[np.argsort(z[keep], kind="stable")]
    pos_s = T.gather_rows(pos, order)
    quat_s = T.gather_rows(quat, order)
    scale_s = T.gather_rows(scale, order)
    color_s = T.gather_rows(color, order)
    opac_s = T.gather_rows(opac, order)

    mean2d, conic, _ = project_chain(pos_s, quat_s, scale_s, cam)
    radius = _radius_from_conic(conic.data)
    splat_ids, start, count = bin_splats(mean2d.data, radius, h, w)
    img, out_t, out_n = _blend_op(mean2d, conic, color_s, opac_s,
                                  splat_ids, start, count, h, w, background)
    return RenderOutput(img, 1.0 - out_t, out_n)
