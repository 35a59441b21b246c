"""Optimization of Gaussian clouds.

Covers reference-scene RGB training, change-aware re-optimization with the
extra change-channel losses, the change-channel-only fine-tune phase, and
the densify/prune schedule with dual-opacity culling (a Gaussian is removed
during change training only when both its RGB opacity and its change opacity
fall below the floor).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from . import ssim
from .rasterizer import GaussianGrads, _prepare, rasterize_backward, render_raw
from .scene import Camera, ChangeMask, GaussianCloud, ImageBuffer, logit, sigmoid
from .sh import SH_C0, n_coeffs

CHANGE_INIT = 0.01  # activated value for fresh change channels


@dataclass
class TrainConfig:
    iters_reference: int = 7000
    iters_change: int = 3000
    iters_change_finetune: int = 3000

    # Learning rates; the position lr is multiplied by the scene extent and
    # decays exponentially from init to final over the phase.
    lr_position_init: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_sh: float = 2.5e-3
    lr_sh_rest_divisor: float = 20.0
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_change: float = 2.5e-2
    lr_change_opacity: float = 5e-2

    lambda_dssim: float = 0.2
    change_loss_weight: float = 1.0

    densify_interval: int = 100
    densify_start: int = 500
    densify_end_frac: float = 0.5
    densify_grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    prune_opacity: float = 5e-3
    dual_opacity_culling: bool = True
    opacity_reset_interval: int = 3000

    change_sh_degree: int = 0
    densify_from_change_loss: bool = True
    seed: int = 0

    def validate(self) -> None:
        for f in ("lr_position_init", "lr_position_final", "lr_sh", "lr_opacity",
                  "lr_scale", "lr_rotation", "lr_change", "lr_change_opacity"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")
        if not 0.0 <= self.lambda_dssim <= 1.0:
            raise ValueError("lambda_dssim must lie in [0, 1]")
        if not 0.0 < self.prune_opacity < 1.0:
            raise ValueError("prune_opacity must lie in (0, 1)")
        if self.change_sh_degree not in (0, 1, 2, 3):
            raise ValueError("change_sh_degree must be in 0..3")

    def to_file(self, path) -> None:
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        with open(path) as f:
            data = json.load(f)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg


# ---------------------------------------------------------------------------
# losses


def _as_array(x):
    if isinstance(x, ImageBuffer):
        return x.data if x.channels == 3 else x.data[:, :, 0]
    if isinstance(x, ChangeMask):
        return x.values
    return np.asarray(x, dtype=np.float64)


_LUMA = np.array([0.299, 0.587, 0.114])


def l1_dssim_loss(pred: np.ndarray, target: np.ndarray, lam: float):
    """(1-lam)*L1 + lam*(1 - mean SSIM)/2 with analytic per-pixel gradients.

    Works on (h, w) single-channel or (h, w, 3) RGB arrays; SSIM runs on luma.
    """
    if pred.shape != target.shape:
        raise ValueError(f"dimension mismatch: {pred.shape} vs {target.shape}")
    n = pred.size
    diff = pred - target
    l1 = np.abs(diff).mean()
    grad = (1.0 - lam) * np.sign(diff) / n

    if lam > 0.0:
        if pred.ndim == 3:
            pl, tl = pred @ _LUMA, target @ _LUMA
        else:
            pl, tl = pred, target
        upstream = np.full(pl.shape, -lam / (2.0 * pl.size))
        smap, grad_luma = ssim.ssim_map_gray_with_grad(pl, tl, upstream)
        dssim = (1.0 - smap.mean()) / 2.0
        if pred.ndim == 3:
            grad += grad_luma[:, :, None] * _LUMA
        else:
            grad += grad_luma
        loss = (1.0 - lam) * l1 + lam * dssim
    else:
        loss = l1
    return loss, grad


def loss_rgb(render, target, lam: float = 0.2):
    """RGB reconstruction loss against a target image; returns (value, grad)."""
    pred = render.rgb.data if hasattr(render, "rgb") else _as_array(render)
    return l1_dssim_loss(pred, _as_array(target), lam)


def loss_change(render, target_mask, lam: float = 0.2):
    """Change-channel loss against a candidate mask; returns (value, grad)."""
    pred = render.change.data[:, :, 0] if hasattr(render, "change") else _as_array(render)
    return l1_dssim_loss(pred, _as_array(target_mask), lam)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    if mse == 0:
        return float("inf")
    return -10.0 * np.log10(mse)


# ---------------------------------------------------------------------------
# optimizer

PARAM_FIELDS = (
    "positions", "rotations", "log_scales", "opacity_logits",
    "sh_color", "change_sh", "change_opacity_logits",
)


class CloudAdam:
    """Adam over the cloud's parameter arrays with per-field learning rates.

    State rows track Gaussians, so pruning/densification shrink or extend the
    moment buffers alongside the cloud.
    """

    def __init__(self, cloud: GaussianCloud, cfg: TrainConfig, total_iters: int,
                 trainable=PARAM_FIELDS, beta1=0.9, beta2=0.999, eps=1e-15):
        self.cfg = cfg
        self.total_iters = max(total_iters, 1)
        self.trainable = tuple(trainable)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {f: np.zeros_like(getattr(cloud, f)) for f in self.trainable}
        self.v = {f: np.zeros_like(getattr(cloud, f)) for f in self.trainable}
        self.extent = cloud.scene_extent

    def _lr(self, name: str) -> float | np.ndarray:
        cfg = self.cfg
        if name == "positions":
            frac = min(self.t / self.total_iters, 1.0)
            return (cfg.lr_position_init *
                    (cfg.lr_position_final / cfg.lr_position_init) ** frac) * self.extent
        if name == "rotations":
            return cfg.lr_rotation
        if name == "log_scales":
            return cfg.lr_scale
        if name == "opacity_logits":
            return cfg.lr_opacity
        if name == "sh_color":
            lr = np.full((16, 1), cfg.lr_sh)
            lr[1:] /= cfg.lr_sh_rest_divisor
            return lr
        if name == "change_sh":
            return cfg.lr_change
        if name == "change_opacity_logits":
            return cfg.lr_change_opacity
        raise KeyError(name)

    def step(self, cloud: GaussianCloud, grads: GaussianGrads) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name in self.trainable:
            g = getattr(grads, name)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            getattr(cloud, name)[...] -= self._lr(name) * update
        cloud.normalize_rotations()

    def prune(self, keep: np.ndarray) -> None:
        for name in self.trainable:
            self.m[name] = self.m[name][keep]
            self.v[name] = self.v[name][keep]

    def extend(self, n_new: int) -> None:
        for name in self.trainable:
            pad = np.zeros((n_new,) + self.m[name].shape[1:])
            self.m[name] = np.concatenate([self.m[name], pad])
            self.v[name] = np.concatenate([self.v[name], pad])


# ---------------------------------------------------------------------------
# densification / pruning


class DensifyState:
    def __init__(self, n: int):
        self.grad_accum = np.zeros(n)
        self.denom = np.zeros(n)

    def record(self, grads: GaussianGrads) -> None:
        self.grad_accum[grads.visible] += grads.mean2d_grad_norm[grads.visible]
        self.denom[grads.visible] += 1.0

    def reset(self, n: int) -> None:
        self.grad_accum = np.zeros(n)
        self.denom = np.zeros(n)


def _select_rows(cloud: GaussianCloud, mask_or_idx) -> dict:
    return {name: getattr(cloud, name)[mask_or_idx] for name in PARAM_FIELDS}


def _apply_keep(cloud: GaussianCloud, keep: np.ndarray) -> None:
    for name in PARAM_FIELDS:
        setattr(cloud, name, getattr(cloud, name)[keep])


def _append_rows(cloud: GaussianCloud, rows: dict) -> None:
    for name in PARAM_FIELDS:
        setattr(cloud, name, np.concatenate([getattr(cloud, name), rows[name]]))


def densify_and_prune(cloud: GaussianCloud, opt: CloudAdam, state: DensifyState,
                      cfg: TrainConfig, rng: np.random.Generator,
                      change_phase: bool) -> None:
    """Clone/split high-gradient Gaussians, then prune transparent ones.

    Change channels are copied verbatim to offspring.  During change training
    the dual-opacity rule keeps any Gaussian whose change opacity is still
    above the floor.
    """
    n = len(cloud)
    avg = state.grad_accum / np.maximum(state.denom, 1.0)
    high = avg > cfg.densify_grad_threshold
    max_scale = np.exp(cloud.log_scales).max(axis=1)
    big = max_scale > cfg.percent_dense * cloud.scene_extent

    clone_idx = np.nonzero(high & ~big)[0]
    split_idx = np.nonzero(high & big)[0]

    new_rows = []
    if clone_idx.size:
        new_rows.append(_select_rows(cloud, clone_idx))
    if split_idx.size:
        rows = _select_rows(cloud, split_idx)
        # Sample offspring positions from the parent Gaussians.
        from .scene import quats_to_rotations

        R = quats_to_rotations(rows["rotations"])
        s = np.exp(rows["log_scales"])
        eps = rng.standard_normal((split_idx.size, 3))
        rows["positions"] = rows["positions"] + np.einsum("nij,nj->ni", R, s * eps)
        rows["log_scales"] = rows["log_scales"] - np.log(1.6)
        new_rows.append(rows)
        # Parents shrink in place.
        cloud.log_scales[split_idx] -= np.log(1.6)

    if new_rows:
        merged = {name: np.concatenate([r[name] for r in new_rows]) for name in PARAM_FIELDS}
        _append_rows(cloud, merged)
        opt.extend(len(merged["positions"]))

    # Prune: low RGB opacity, and during change training low change opacity too.
    alpha = sigmoid(cloud.opacity_logits)
    low = alpha < cfg.prune_opacity
    if change_phase and cfg.dual_opacity_culling:
        low &= sigmoid(cloud.change_opacity_logits) < cfg.prune_opacity
    keep = ~low
    if keep.sum() == 0:
        keep[np.argmax(alpha)] = True  # never empty the cloud
    _apply_keep(cloud, keep)
    opt.prune(keep)
    state.reset(len(cloud))


def reset_opacity(cloud: GaussianCloud, opt: CloudAdam, ceiling: float = 0.01) -> None:
    """Clamp RGB opacities down to a small value (never touches change opacity)."""
    cap = float(logit(ceiling))
    mask = cloud.opacity_logits > cap
    cloud.opacity_logits[mask] = cap
    if "opacity_logits" in opt.m:
        opt.m["opacity_logits"][mask] = 0.0
        opt.v["opacity_logits"][mask] = 0.0


# ---------------------------------------------------------------------------
# initialization


def init_cloud_from_points(points: np.ndarray, colors: np.ndarray,
                           scene_extent: float, change_sh_degree: int = 0) -> GaussianCloud:
    """Seed a cloud from sparse points: isotropic scales from nearest-neighbor
    distances, colors as DC SH coefficients, near-zero change channels."""
    # Copy: optimization mutates the cloud in place and must not alias the
    # caller's point array.
    points = np.atleast_2d(np.array(points, dtype=np.float64, copy=True))
    if points.shape[0] == 0:
        raise ValueError("empty inputs: no initialization points")
    n = points.shape[0]
    colors = np.atleast_2d(np.asarray(colors, dtype=np.float64))
    if colors.shape != (n, 3):
        colors = np.full((n, 3), 0.5)

    if n > 1:
        tree = cKDTree(points)
        k = min(4, n)
        dists, _ = tree.query(points, k=k)
        mean_d = dists[:, 1:].mean(axis=1)
    else:
        mean_d = np.full(1, 0.1 * scene_extent)
    mean_d = np.clip(mean_d, 1e-4 * scene_extent, None)

    sh_color = np.zeros((n, 16, 3))
    sh_color[:, 0, :] = (np.clip(colors, 0.0, 1.0) - 0.5) / SH_C0

    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    k_change = n_coeffs(change_sh_degree)
    change_sh = np.zeros((n, k_change))
    change_sh[:, 0] = logit(CHANGE_INIT)
    return GaussianCloud(
        positions=points,
        rotations=rot,
        log_scales=np.log(mean_d)[:, None].repeat(3, axis=1),
        opacity_logits=np.full(n, float(logit(0.1))),
        sh_color=sh_color,
        change_sh=change_sh,
        change_opacity_logits=np.full(n, float(logit(CHANGE_INIT))),
        scene_extent=scene_extent,
    )


def expand_change_degree(cloud: GaussianCloud, degree: int) -> None:
    """Grow (or shrink) the change-SH coefficient columns to match ``degree``."""
    k = n_coeffs(degree)
    cur = cloud.change_sh.shape[1]
    if k == cur:
        return
    if k < cur:
        cloud.change_sh = cloud.change_sh[:, :k].copy()
    else:
        pad = np.zeros((len(cloud), k - cur))
        cloud.change_sh = np.concatenate([cloud.change_sh, pad], axis=1)


# ---------------------------------------------------------------------------
# training loops


def _view_order(rng: np.random.Generator, n_views: int, n_iters: int) -> np.ndarray:
    """Round-robin over views, reshuffled each epoch."""
    order = []
    while len(order) < n_iters:
        order.extend(rng.permutation(n_views).tolist())
    return np.array(order[:n_iters], dtype=int)


def _in_densify_window(it: int, total: int, cfg: TrainConfig) -> bool:
    return (
        cfg.densify_interval > 0
        and cfg.densify_start <= it <= cfg.densify_end_frac * total
        and it % cfg.densify_interval == 0
    )


def train_reference(images, cameras, init_points, cfg: TrainConfig,
                    init_colors=None, log_every: int = 0,
                    progress=None) -> GaussianCloud:
    """Optimize a fresh cloud to reconstruct the reference scene.

    Change channels stay at their initialization; only RGB losses apply.
    """
    cfg.validate()
    if len(images) == 0 or len(cameras) == 0 or len(images) != len(cameras):
        raise ValueError("empty inputs: need matching image and camera lists")
    from .scene import scene_extent_from_cameras

    extent = scene_extent_from_cameras(cameras)
    cloud = init_cloud_from_points(
        init_points, init_colors, extent, change_sh_degree=0)
    return _optimize(
        cloud, images, cameras, masks=None, cfg=cfg,
        n_iters=cfg.iters_reference, change_phase=False, progress=progress,
    )


def train_change(reference_cloud: GaussianCloud, images_inf, cameras_inf,
                 candidate_masks, cfg: TrainConfig, progress=None) -> GaussianCloud:
    """Re-optimize a copy of the reference cloud on the inference scene while
    learning the change channels from the candidate masks."""
    cfg.validate()
    if len(candidate_masks) != len(images_inf) or len(images_inf) != len(cameras_inf):
        raise ValueError(
            f"mask/view count mismatch: {len(candidate_masks)} masks for "
            f"{len(images_inf)} images"
        )
    cloud = reference_cloud.copy()
    expand_change_degree(cloud, cfg.change_sh_degree)
    return _optimize(
        cloud, images_inf, cameras_inf, masks=candidate_masks, cfg=cfg,
        n_iters=cfg.iters_change, change_phase=True, progress=progress,
    )


def finetune_change(cloud: GaussianCloud, cameras, masks, cfg: TrainConfig,
                    full_reoptimize: bool = False, images=None,
                    progress=None) -> GaussianCloud:
    """Fine-tune on an (augmented) mask set.

    By default only the change channels are updated and only the change loss
    applies; ``full_reoptimize`` re-opens all parameters (then ``images``
    must supply RGB targets).
    """
    cfg.validate()
    if len(masks) != len(cameras):
        raise ValueError(f"mask/view count mismatch: {len(masks)} masks for {len(cameras)} poses")
    if full_reoptimize and (images is None or len(images) != len(cameras)):
        raise ValueError("full_reoptimize needs one RGB target per pose")
    out = cloud.copy()
    trainable = PARAM_FIELDS if full_reoptimize else ("change_sh", "change_opacity_logits")
    return _optimize(
        out, images, cameras, masks=masks, cfg=cfg,
        n_iters=cfg.iters_change_finetune, change_phase=True,
        trainable=trainable, allow_densify=full_reoptimize, progress=progress,
    )


def _optimize(cloud, images, cameras, masks, cfg: TrainConfig, n_iters: int,
              change_phase: bool, trainable=PARAM_FIELDS,
              allow_densify: bool = True, progress=None) -> GaussianCloud:
    if n_iters <= 0:
        return cloud
    rng = np.random.default_rng(cfg.seed)
    targets = None if images is None else [_as_array(im) for im in images]
    mask_targets = None if masks is None else [_as_array(m) for m in masks]

    opt = CloudAdam(cloud, cfg, total_iters=n_iters, trainable=trainable)
    state = DensifyState(len(cloud))
    order = _view_order(rng, len(cameras), n_iters)

    geometry_open = "positions" in trainable

    for it in range(1, n_iters + 1):
        k = int(order[it - 1])
        cam = cameras[k]
        proj = _prepare(cloud, cam)
        rgb, change, alpha, _ = render_raw(cloud, cam, projection=proj)

        grad_rgb = np.zeros_like(rgb)
        grad_change = np.zeros_like(change)
        total = 0.0
        if targets is not None:
            value, grad_rgb = l1_dssim_loss(rgb, targets[k], cfg.lambda_dssim)
            total += value
        if mask_targets is not None:
            value, g = l1_dssim_loss(change, mask_targets[k], cfg.lambda_dssim)
            grad_change = cfg.change_loss_weight * g
            total += cfg.change_loss_weight * value

        grads = rasterize_backward(
            cloud, cam, grad_rgb, grad_change, np.zeros_like(alpha),
            projection=proj,
        )
        if change_phase and not cfg.densify_from_change_loss and geometry_open:
            stats_grads = rasterize_backward(
                cloud, cam, grad_rgb, np.zeros_like(change), np.zeros_like(alpha),
                projection=proj,
            )
            state.record(stats_grads)
        else:
            state.record(grads)
        opt.step(cloud, grads)

        if geometry_open and allow_densify and _in_densify_window(it, n_iters, cfg):
            densify_and_prune(cloud, opt, state, cfg, rng, change_phase)
        if (geometry_open and cfg.opacity_reset_interval > 0
                and it % cfg.opacity_reset_interval == 0 and it < n_iters):
            reset_opacity(cloud, opt)
        if progress is not None:
            progress(it, total, len(cloud))
    return cloud
