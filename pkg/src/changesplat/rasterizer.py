"""Tile-based CPU rasterizer for Gaussian clouds.

Forward pass renders RGB, a change channel, alpha, and depth in one sweep;
the backward pass produces analytic gradients for every Gaussian parameter.
Tiles are processed independently (optionally across threads) and merged in
a fixed order, so outputs and gradients are deterministic regardless of the
thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import sh
from .scene import Camera, GaussianCloud, ImageBuffer, quats_to_rotations, sigmoid

TILE = 16
COV2D_DILATION = 0.3      # px^2 added to the diagonal of every 2D covariance
ALPHA_CLAMP = 0.99        # per-sample opacity ceiling
T_CUTOFF = 1e-4           # compositing stops once transmittance drops below
NEAR_PLANE = 0.01
FOOTPRINT_SIGMA = 3.0     # cull Gaussians whose 3-sigma footprint misses the image

_default_threads = 1


def set_default_threads(n: int) -> None:
    global _default_threads
    _default_threads = max(1, int(n))


def get_default_threads() -> int:
    return _default_threads


@dataclass
class RenderOutput:
    rgb: ImageBuffer
    change: ImageBuffer
    alpha: ImageBuffer
    depth: Optional[np.ndarray] = None  # (h, w), camera-space units


@dataclass
class ProjectedGaussian:
    mean2d: np.ndarray    # (2,) pixels
    cov2d: np.ndarray     # (2, 2) px^2, after dilation
    depth: float
    color: np.ndarray     # (3,) activated SH color
    change_value: float   # activated change magnitude
    opacity: float
    change_opacity: float


class _Projection:
    """Per-view cache of projected Gaussians and their tile assignment."""

    __slots__ = (
        "idx", "mean2d", "conic", "depth", "color", "color_raw", "change_value",
        "change_logit", "alpha", "change_alpha", "radius", "t_cam", "dirs",
        "dir_dist", "basis", "cov2d", "T2d", "tiles_x", "tiles_y", "tile_members",
        "width", "height", "change_degree",
    )


def _change_degree_for(change_sh: np.ndarray) -> int:
    k = change_sh.shape[1]
    degree = int(round(np.sqrt(k))) - 1
    if (degree + 1) ** 2 != k or degree not in (0, 1, 2, 3):
        raise ValueError(f"change_sh has {k} coefficients, not a degree in 0..3")
    return degree


def _prepare(cloud: GaussianCloud, cam: Camera) -> _Projection:
    n = len(cloud)
    W = cam.rotation_w2c
    t_cam = cloud.positions @ W.T + cam.translation_w2c
    z = t_cam[:, 2]
    in_front = z > NEAR_PLANE

    # Perspective projection of the means.
    zs = np.where(in_front, z, 1.0)
    mean2d = np.stack(
        [cam.fx * t_cam[:, 0] / zs + cam.cx, cam.fy * t_cam[:, 1] / zs + cam.cy],
        axis=1,
    )

    # 2D covariance via the projection Jacobian: cov2d = T Sigma T^T + dilation.
    R = quats_to_rotations(cloud.rotations)
    s = np.exp(cloud.log_scales)
    M = R * s[:, None, :]
    Sigma = M @ M.transpose(0, 2, 1)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / zs
    J[:, 0, 2] = -cam.fx * t_cam[:, 0] / zs**2
    J[:, 1, 1] = cam.fy / zs
    J[:, 1, 2] = -cam.fy * t_cam[:, 1] / zs**2
    T2d = J @ W[None, :, :]
    cov2d = T2d @ Sigma @ T2d.transpose(0, 2, 1)
    cov2d[:, 0, 0] += COV2D_DILATION
    cov2d[:, 1, 1] += COV2D_DILATION

    A, B, C = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = A * C - B * B
    mid = 0.5 * (A + C)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = FOOTPRINT_SIGMA * np.sqrt(np.maximum(lam_max, 0.0))

    visible = (
        in_front
        & (det > 0)
        & (mean2d[:, 0] + radius > 0)
        & (mean2d[:, 0] - radius < cam.width)
        & (mean2d[:, 1] + radius > 0)
        & (mean2d[:, 1] - radius < cam.height)
    )
    idx = np.nonzero(visible)[0]

    p = _Projection()
    p.width, p.height = cam.width, cam.height
    p.idx = idx
    p.mean2d = mean2d[idx]
    p.depth = z[idx]
    p.radius = radius[idx]
    p.t_cam = t_cam[idx]
    p.cov2d = cov2d[idx]
    p.T2d = T2d[idx]
    detv = det[idx]
    p.conic = np.stack(
        [cov2d[idx, 1, 1] / detv, -cov2d[idx, 0, 1] / detv, cov2d[idx, 0, 0] / detv],
        axis=1,
    )

    # Per-Gaussian view-dependent color (view direction fixed at the mean).
    offs = cloud.positions[idx] - cam.center
    dist = np.linalg.norm(offs, axis=1)
    dist = np.maximum(dist, 1e-12)
    dirs = offs / dist[:, None]
    basis = sh.sh_basis(dirs, 3) if len(idx) else np.zeros((0, 16))
    color_raw = np.einsum("gk,gkc->gc", basis, cloud.sh_color[idx]) + 0.5
    p.color_raw = color_raw
    p.color = np.maximum(color_raw, 0.0)
    p.dirs = dirs
    p.dir_dist = dist
    p.basis = basis

    # Change magnitude: sigmoid of the degree-0 coefficient, with any
    # higher-order change SH terms added in logit space.
    p.change_degree = _change_degree_for(cloud.change_sh)
    logit_c = cloud.change_sh[idx, 0].copy()
    if p.change_degree > 0 and len(idx):
        cb = sh.sh_basis(dirs, p.change_degree)
        logit_c += np.einsum("gk,gk->g", cb[:, 1:], cloud.change_sh[idx, 1:])
    p.change_logit = logit_c
    p.change_value = sigmoid(logit_c)

    p.alpha = sigmoid(cloud.opacity_logits[idx])
    p.change_alpha = sigmoid(cloud.change_opacity_logits[idx])

    # Tile membership, each list depth-sorted (ties broken by index).
    p.tiles_x = (cam.width + TILE - 1) // TILE
    p.tiles_y = (cam.height + TILE - 1) // TILE
    members = [[] for _ in range(p.tiles_x * p.tiles_y)]
    x0 = np.clip(np.floor((p.mean2d[:, 0] - p.radius) / TILE).astype(int), 0, p.tiles_x - 1)
    x1 = np.clip(np.floor((p.mean2d[:, 0] + p.radius) / TILE).astype(int), 0, p.tiles_x - 1)
    y0 = np.clip(np.floor((p.mean2d[:, 1] - p.radius) / TILE).astype(int), 0, p.tiles_y - 1)
    y1 = np.clip(np.floor((p.mean2d[:, 1] + p.radius) / TILE).astype(int), 0, p.tiles_y - 1)
    for g in range(len(idx)):
        for ty in range(y0[g], y1[g] + 1):
            for tx in range(x0[g], x1[g] + 1):
                members[ty * p.tiles_x + tx].append(g)
    order = np.lexsort((p.idx, p.depth))
    rank = np.empty(len(idx), dtype=int)
    rank[order] = np.arange(len(idx))
    p.tile_members = [
        np.array(sorted(m, key=lambda g: rank[g]), dtype=int) for m in members
    ]
    return p


def _tile_pixels(p: _Projection, tx: int, ty: int):
    xs = np.arange(tx * TILE, min((tx + 1) * TILE, p.width))
    ys = np.arange(ty * TILE, min((ty + 1) * TILE, p.height))
    px, py = np.meshgrid(xs + 0.5, ys + 0.5)
    return xs, ys, px.ravel(), py.ravel()


def _tile_weights(p: _Projection, m: np.ndarray, px: np.ndarray, py: np.ndarray):
    """Per-(gaussian, pixel) compositing intermediates for one tile."""
    dx = px[None, :] - p.mean2d[m, 0:1]
    dy = py[None, :] - p.mean2d[m, 1:2]
    a = p.conic[m, 0:1]
    b = p.conic[m, 1:2]
    c = p.conic[m, 2:3]
    power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
    G = np.exp(np.minimum(power, 0.0))
    return dx, dy, G


def _chain(alpha_per_sample: np.ndarray):
    """Front-to-back transmittance chain with the early-stop cutoff.

    Returns (T_before, active, weights, T_final) for a (M, P) opacity array.
    """
    one_minus = 1.0 - alpha_per_sample
    T_before = np.empty_like(one_minus)
    T_before[0] = 1.0
    if one_minus.shape[0] > 1:
        np.cumprod(one_minus[:-1], axis=0, out=T_before[1:])
    active = T_before >= T_CUTOFF
    weights = alpha_per_sample * T_before * active
    eff = np.where(active, one_minus, 1.0)
    T_final = eff.prod(axis=0)
    return T_before, active, weights, T_final


def _forward_tile(p: _Projection, tx: int, ty: int):
    xs, ys, px, py = _tile_pixels(p, tx, ty)
    n_px = px.size
    m = p.tile_members[ty * p.tiles_x + tx]
    if m.size == 0:
        z = np.zeros(n_px)
        return xs, ys, np.zeros((n_px, 3)), z.copy(), z.copy(), z.copy()
    _, _, G = _tile_weights(p, m, px, py)
    ap = np.minimum(p.alpha[m, None] * G, ALPHA_CLAMP)
    _, _, w, T_final = _chain(ap)
    rgb = np.einsum("mp,mc->pc", w, p.color[m])
    depth = w.T @ p.depth[m]
    alpha = 1.0 - T_final

    apc = np.minimum(p.change_alpha[m, None] * G, ALPHA_CLAMP)
    _, _, wc, _ = _chain(apc)
    change = wc.T @ p.change_value[m]
    return xs, ys, rgb, change, alpha, depth


def _map_tiles(fn, p: _Projection, n_threads: int):
    coords = [(tx, ty) for ty in range(p.tiles_y) for tx in range(p.tiles_x)]
    if n_threads <= 1 or len(coords) <= 1:
        return [fn(tx, ty) for tx, ty in coords]
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        return list(pool.map(lambda c: fn(*c), coords))


def render_raw(cloud: GaussianCloud, cam: Camera, n_threads: int | None = None,
               projection: _Projection | None = None):
    """Unclipped render: (rgb (h,w,3), change (h,w), alpha (h,w), depth (h,w)).

    Composited RGB can exceed 1 for bright SH colors; the trainer and the
    gradient checks operate on these raw values so the backward pass is the
    exact adjoint of the forward one.
    """
    if len(cloud) == 0:
        raise ValueError("empty cloud")
    n_threads = get_default_threads() if n_threads is None else n_threads
    p = projection if projection is not None else _prepare(cloud, cam)
    h, w = cam.height, cam.width
    rgb = np.zeros((h, w, 3))
    change = np.zeros((h, w))
    alpha = np.zeros((h, w))
    depth = np.zeros((h, w))
    results = _map_tiles(lambda tx, ty: _forward_tile(p, tx, ty), p, n_threads)
    for xs, ys, t_rgb, t_change, t_alpha, t_depth in results:
        sl = np.ix_(ys, xs)
        shape = (len(ys), len(xs))
        rgb[sl] = t_rgb.reshape(shape + (3,))
        change[sl] = t_change.reshape(shape)
        alpha[sl] = t_alpha.reshape(shape)
        depth[sl] = t_depth.reshape(shape)
    return rgb, change, alpha, depth


def rasterize(cloud: GaussianCloud, cam: Camera, n_threads: int | None = None,
              with_depth: bool = True) -> RenderOutput:
    """Render RGB + change + alpha (+ depth) over a black background."""
    rgb, change, alpha, depth = render_raw(cloud, cam, n_threads)
    return RenderOutput(
        rgb=ImageBuffer(np.clip(rgb, 0.0, 1.0)),
        change=ImageBuffer(np.clip(change, 0.0, 1.0)[:, :, None]),
        alpha=ImageBuffer(np.clip(alpha, 0.0, 1.0)[:, :, None]),
        depth=depth if with_depth else None,
    )


def project(gaussian, cam: Camera) -> Optional[ProjectedGaussian]:
    """Project a single Gaussian; returns None when culled."""
    cloud = GaussianCloud.from_gaussians([gaussian])
    p = _prepare(cloud, cam)
    if len(p.idx) == 0:
        return None
    return ProjectedGaussian(
        mean2d=p.mean2d[0],
        cov2d=p.cov2d[0],
        depth=float(p.depth[0]),
        color=p.color[0],
        change_value=float(p.change_value[0]),
        opacity=float(p.alpha[0]),
        change_opacity=float(p.change_alpha[0]),
    )


@dataclass
class GaussianGrads:
    """Per-Gaussian parameter gradients from one backward pass."""

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh_color: np.ndarray
    change_sh: np.ndarray
    change_opacity_logits: np.ndarray
    mean2d_grad_norm: np.ndarray  # screen-space positional gradient magnitude
    visible: np.ndarray           # bool mask of Gaussians that reached a tile

    def __iadd__(self, other: "GaussianGrads"):
        self.positions += other.positions
        self.rotations += other.rotations
        self.log_scales += other.log_scales
        self.opacity_logits += other.opacity_logits
        self.sh_color += other.sh_color
        self.change_sh += other.change_sh
        self.change_opacity_logits += other.change_opacity_logits
        self.mean2d_grad_norm += other.mean2d_grad_norm
        self.visible |= other.visible
        return self


def _backward_tile(p: _Projection, tx: int, ty: int,
                   grad_rgb: np.ndarray, grad_change: np.ndarray, grad_alpha: np.ndarray):
    m = p.tile_members[ty * p.tiles_x + tx]
    if m.size == 0:
        return None
    xs, ys, px, py = _tile_pixels(p, tx, ty)
    sl = np.ix_(ys, xs)
    gR = grad_rgb[sl].reshape(-1, 3)
    gCh = grad_change[sl].reshape(-1)
    gA = grad_alpha[sl].reshape(-1)

    dx, dy, G = _tile_weights(p, m, px, py)

    # RGB chain.
    raw = p.alpha[m, None] * G
    clamped = raw > ALPHA_CLAMP
    ap = np.minimum(raw, ALPHA_CLAMP)
    T_before, active, w, T_final = _chain(ap)
    g_color = np.einsum("mp,pc->mc", w, gR)

    contrib = w[:, :, None] * p.color[m][:, None, :]          # (M, P, 3)
    suffix = np.flip(np.cumsum(np.flip(contrib, 0), axis=0), 0) - contrib
    one_minus = 1.0 - ap
    g_ap = np.einsum(
        "pc,mpc->mp", gR,
        p.color[m][:, None, :] * T_before[:, :, None] - suffix / one_minus[:, :, None],
    )
    g_ap += gA[None, :] * T_final[None, :] / one_minus
    g_ap *= active

    # Change chain (independent transmittance from the change opacity).
    raw_c = p.change_alpha[m, None] * G
    clamped_c = raw_c > ALPHA_CLAMP
    apc = np.minimum(raw_c, ALPHA_CLAMP)
    Tc_before, active_c, wc, _ = _chain(apc)
    g_changeval = wc @ gCh
    contrib_c = wc * p.change_value[m][:, None]
    suffix_c = np.flip(np.cumsum(np.flip(contrib_c, 0), axis=0), 0) - contrib_c
    one_minus_c = 1.0 - apc
    g_apc = gCh[None, :] * (
        p.change_value[m][:, None] * Tc_before - suffix_c / one_minus_c
    )
    g_apc *= active_c

    pass_rgb = ~clamped
    pass_c = ~clamped_c
    g_alpha = np.einsum("mp,mp->m", g_ap * pass_rgb, G)
    g_change_alpha = np.einsum("mp,mp->m", g_apc * pass_c, G)
    gG = g_ap * pass_rgb * p.alpha[m, None] + g_apc * pass_c * p.change_alpha[m, None]
    g_pow = G * gG

    a = p.conic[m, 0:1]
    b = p.conic[m, 1:2]
    c = p.conic[m, 2:3]
    g_conic = np.stack(
        [
            np.einsum("mp,mp->m", -0.5 * dx * dx, g_pow),
            np.einsum("mp,mp->m", -dx * dy, g_pow),
            np.einsum("mp,mp->m", -0.5 * dy * dy, g_pow),
        ],
        axis=1,
    )
    g_mean = np.stack(
        [
            np.einsum("mp,mp->m", a * dx + b * dy, g_pow),
            np.einsum("mp,mp->m", b * dx + c * dy, g_pow),
        ],
        axis=1,
    )
    return m, g_color, g_changeval, g_alpha, g_change_alpha, g_conic, g_mean


def rasterize_backward(cloud: GaussianCloud, cam: Camera,
                       grad_rgb: np.ndarray, grad_change: np.ndarray,
                       grad_alpha: np.ndarray,
                       n_threads: int | None = None,
                       projection: _Projection | None = None) -> GaussianGrads:
    """Analytic gradients of sum(grad_rgb*rgb + grad_change*change +
    grad_alpha*alpha) with respect to every Gaussian parameter."""
    n_threads = get_default_threads() if n_threads is None else n_threads
    h, w = cam.height, cam.width
    grad_rgb = np.asarray(grad_rgb, dtype=np.float64)
    grad_change = np.asarray(grad_change, dtype=np.float64).reshape(h, w)
    grad_alpha = np.asarray(grad_alpha, dtype=np.float64).reshape(h, w)
    if grad_rgb.shape != (h, w, 3):
        raise ValueError(f"upstream rgb gradient must be ({h}, {w}, 3), got {grad_rgb.shape}")

    p = projection if projection is not None else _prepare(cloud, cam)
    nv = len(p.idx)

    # Intermediate-level accumulators over projected Gaussians.
    acc_color = np.zeros((nv, 3))
    acc_changeval = np.zeros(nv)
    acc_alpha = np.zeros(nv)
    acc_change_alpha = np.zeros(nv)
    acc_conic = np.zeros((nv, 3))
    acc_mean = np.zeros((nv, 2))

    results = _map_tiles(
        lambda tx, ty: _backward_tile(p, tx, ty, grad_rgb, grad_change, grad_alpha),
        p, n_threads,
    )
    for res in results:  # fixed tile order keeps the reduction deterministic
        if res is None:
            continue
        m, g_color, g_changeval, g_alpha, g_change_alpha, g_conic, g_mean = res
        np.add.at(acc_color, m, g_color)
        np.add.at(acc_changeval, m, g_changeval)
        np.add.at(acc_alpha, m, g_alpha)
        np.add.at(acc_change_alpha, m, g_change_alpha)
        np.add.at(acc_conic, m, g_conic)
        np.add.at(acc_mean, m, g_mean)

    return _geometry_backward(
        cloud, cam, p,
        acc_color, acc_changeval, acc_alpha, acc_change_alpha, acc_conic, acc_mean,
    )


def _quat_rotation_grad(q_raw: np.ndarray, gR: np.ndarray) -> np.ndarray:
    """Chain dL/dR (N,3,3) back to raw (unnormalized) quaternions (N,4)."""
    norms = np.linalg.norm(q_raw, axis=1, keepdims=True)
    u = q_raw / norms
    w, x, y, z = u.T
    zero = np.zeros_like(w)

    def mat(rows):
        return 2.0 * np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    dR_dw = mat([[zero, -z, y], [z, zero, -x], [-y, x, zero]])
    dR_dx = mat([[zero, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    dR_dy = mat([[-2 * y, x, w], [x, zero, z], [-w, z, -2 * y]])
    dR_dz = mat([[-2 * z, -w, x], [w, -2 * z, y], [x, y, zero]])
    g_unit = np.stack(
        [np.einsum("nij,nij->n", d, gR) for d in (dR_dw, dR_dx, dR_dy, dR_dz)],
        axis=1,
    )
    # Through the normalization q / |q|.
    return (g_unit - np.einsum("nk,nk->n", g_unit, u)[:, None] * u) / norms


def _geometry_backward(cloud, cam, p, acc_color, acc_changeval, acc_alpha,
                       acc_change_alpha, acc_conic, acc_mean) -> GaussianGrads:
    n = len(cloud)
    grads = GaussianGrads(
        positions=np.zeros((n, 3)),
        rotations=np.zeros((n, 4)),
        log_scales=np.zeros((n, 3)),
        opacity_logits=np.zeros(n),
        sh_color=np.zeros((n, 16, 3)),
        change_sh=np.zeros_like(cloud.change_sh),
        change_opacity_logits=np.zeros(n),
        mean2d_grad_norm=np.zeros(n),
        visible=np.zeros(n, dtype=bool),
    )
    idx = p.idx
    if len(idx) == 0:
        return grads
    grads.visible[idx] = True

    # Opacities through their sigmoids.
    grads.opacity_logits[idx] = acc_alpha * p.alpha * (1.0 - p.alpha)
    grads.change_opacity_logits[idx] = (
        acc_change_alpha * p.change_alpha * (1.0 - p.change_alpha)
    )

    # SH color; the clamp at 0 blocks gradients on fully dark channels.
    open_ch = (p.color_raw > 0.0).astype(np.float64)          # (G, 3)
    g_col = acc_color * open_ch
    grads.sh_color[idx] = p.basis[:, :, None] * g_col[:, None, :]
    coeffs = cloud.sh_color[idx]                               # (G, 16, 3)
    basis_jac = sh.sh_basis_jacobian(p.dirs, 3)                # (G, 16, 3dir)
    g_dir = np.einsum("gc,gkc,gkd->gd", g_col, coeffs, basis_jac)

    # Change magnitude through its sigmoid (+ optional higher-order terms).
    v = p.change_value
    g_logit = acc_changeval * v * (1.0 - v)
    grads.change_sh[idx, 0] = g_logit
    if p.change_degree > 0:
        cb = sh.sh_basis(p.dirs, p.change_degree)
        cbj = sh.sh_basis_jacobian(p.dirs, p.change_degree)
        grads.change_sh[idx, 1:] = g_logit[:, None] * cb[:, 1:]
        g_dir += np.einsum("g,gk,gkd->gd", g_logit, cloud.change_sh[idx, 1:], cbj[:, 1:])

    # View direction normalization back to positions.
    proj = g_dir - np.einsum("gd,gd->g", g_dir, p.dirs)[:, None] * p.dirs
    g_pos = proj / p.dir_dist[:, None]

    # Conic -> 2D covariance (full-matrix convention; V is symmetric).
    Con = np.empty((len(idx), 2, 2))
    Con[:, 0, 0] = p.conic[:, 0]
    Con[:, 0, 1] = Con[:, 1, 0] = p.conic[:, 1]
    Con[:, 1, 1] = p.conic[:, 2]
    Gmat = np.empty_like(Con)
    Gmat[:, 0, 0] = acc_conic[:, 0]
    Gmat[:, 0, 1] = Gmat[:, 1, 0] = 0.5 * acc_conic[:, 1]
    Gmat[:, 1, 1] = acc_conic[:, 2]
    V = -Con @ Gmat @ Con                                     # dL/dCov2d

    # Cov2d = T Sigma T^T (+ constant dilation).
    R = quats_to_rotations(cloud.rotations[idx])
    s = np.exp(cloud.log_scales[idx])
    M = R * s[:, None, :]
    Sigma = M @ M.transpose(0, 2, 1)
    T2d = p.T2d
    g_Sigma = T2d.transpose(0, 2, 1) @ V @ T2d
    g_T = 2.0 * V @ T2d @ Sigma
    g_J = g_T @ cam.rotation_w2c.T[None, :, :]

    # Sigma = M M^T with M = R diag(s).
    g_M = 2.0 * g_Sigma @ M
    g_s = np.einsum("nij,nij->nj", R, g_M)
    grads.log_scales[idx] = g_s * s
    g_R = g_M * s[:, None, :]
    grads.rotations[idx] = _quat_rotation_grad(cloud.rotations[idx], g_R)

    # Camera-space position gradient: mean projection + Jacobian dependence.
    tx, ty, tz = p.t_cam[:, 0], p.t_cam[:, 1], p.t_cam[:, 2]
    fx, fy = cam.fx, cam.fy
    g_t = np.zeros((len(idx), 3))
    g_t[:, 0] = acc_mean[:, 0] * fx / tz
    g_t[:, 1] = acc_mean[:, 1] * fy / tz
    g_t[:, 2] = -acc_mean[:, 0] * fx * tx / tz**2 - acc_mean[:, 1] * fy * ty / tz**2
    g_t[:, 0] += g_J[:, 0, 2] * (-fx / tz**2)
    g_t[:, 1] += g_J[:, 1, 2] * (-fy / tz**2)
    g_t[:, 2] += (
        g_J[:, 0, 0] * (-fx / tz**2)
        + g_J[:, 1, 1] * (-fy / tz**2)
        + g_J[:, 0, 2] * (2.0 * fx * tx / tz**3)
        + g_J[:, 1, 2] * (2.0 * fy * ty / tz**3)
    )
    g_pos += g_t @ cam.rotation_w2c
    grads.positions[idx] = g_pos

    # Screen-space positional gradient magnitude for densification, in the
    # half-resolution NDC units used by the reference 3DGS heuristic.
    ndc = acc_mean * np.array([cam.width * 0.5, cam.height * 0.5])
    grads.mean2d_grad_norm[idx] = np.linalg.norm(ndc, axis=1)
    return grads
