"""End-to-end orchestration: reference build, pose-aligned rendering,
candidate masks, change training, reverse-comparison augmentation, and
multi-view change-mask rendering with unseen-region filtering."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evalmetrics, features, masks as masks_mod, synth, trainer
from .io import png, ply
from .io.colmap import parse_colmap_model
from .rasterizer import rasterize
from .scene import ChangeMask, GaussianCloud


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


def render_matched_views(cloud: GaussianCloud, cameras_inf) -> list:
    """Render the cloud at every inference pose, order preserved."""
    if len(cameras_inf) == 0:
        raise ValueError("empty pose list")
    return [rasterize(cloud, cam) for cam in cameras_inf]


def build_candidate_masks(renders, images_inf,
                          extractor_spec: features.FeatureExtractorSpec,
                          image_ids=None) -> list:
    """Per pose-aligned pair: feature-difference mask times structure mask."""
    if len(renders) != len(images_inf):
        raise ValueError(
            f"length mismatch: {len(renders)} renders vs {len(images_inf)} images"
        )
    out = []
    for k, (ren, img) in enumerate(zip(renders, images_inf)):
        image_id = None if image_ids is None else image_ids[k]
        f_ren = features.extract(extractor_spec, ren.rgb,
                                 None if image_id is None else f"{image_id}_ren")
        f_inf = features.extract(extractor_spec, img, image_id)
        m_f = masks_mod.feature_diff_mask(f_ren, f_inf, img.width, img.height)
        m_s = masks_mod.structure_mask(ren.rgb, img)
        out.append(masks_mod.combine_masks(m_f, m_s))
    return out


def augment_masks(change_cloud: GaussianCloud, images_ref, cameras_ref,
                  extractor_spec: features.FeatureExtractorSpec) -> list:
    """Reverse comparison: render the inference-scene cloud at reference poses
    and difference against the reference images.  Unreconstructed regions are
    excluded via the rendered alpha before the masks become training targets."""
    if len(images_ref) == 0 or len(cameras_ref) == 0:
        raise ValueError("empty reference set")
    renders = render_matched_views(change_cloud, cameras_ref)
    candidate = build_candidate_masks(renders, images_ref, extractor_spec)
    return [
        masks_mod.filter_unseen(m, ren.alpha)
        for m, ren in zip(candidate, renders)
    ]


def render_change_masks(change_cloud: GaussianCloud, query_cameras,
                        threshold: float = 0.5) -> list:
    """Binary multi-view change masks for arbitrary (also unseen) poses."""
    if len(query_cameras) == 0:
        raise ValueError("empty pose list")
    out = []
    for cam in query_cameras:
        ren = rasterize(change_cloud, cam)
        filtered = masks_mod.filter_unseen(
            ChangeMask(ren.change.data[:, :, 0]), ren.alpha)
        out.append(masks_mod.binarize(filtered, threshold))
    return out


# ---------------------------------------------------------------------------
# full pipeline


@dataclass
class PipelineResult:
    reference_cloud: GaussianCloud
    change_cloud: GaussianCloud
    candidate_masks: list
    augmented_masks: list
    final_masks: list
    cameras_ref: list
    cameras_inf: list
    images_ref: list
    images_inf: list
    gt_masks: list | None = None
    metrics: dict = field(default_factory=dict)
    report: str = ""


@dataclass
class SceneData:
    images_ref: list
    cameras_ref: list
    images_inf: list
    cameras_inf: list
    init_points: np.ndarray
    init_colors: np.ndarray
    gt_masks: list | None = None  # one per inference view, fixture mode only


def _stage(name):
    """Decorator tagging exceptions with the pipeline stage that raised them."""
    def wrap(fn):
        def inner(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except PipelineError:
                raise
            except Exception as e:
                raise PipelineError(name, str(e)) from e
        return inner
    return wrap


@_stage("load-fixture")
def load_fixture_scene(scene_dir: Path, cfg: trainer.TrainConfig) -> SceneData:
    manifest = scene_dir / "fixture.json"
    cloud_gt, cloud_changed, cams_ref, cams_inf, _ = synth.load_fixture(manifest)
    with open(manifest) as f:
        meta = json.load(f)
    noise = float(meta.get("noise", 0.0))
    pose_jitter = float(meta.get("pose_jitter", 0.0))
    seed = int(meta["seed"])
    images_ref = synth.capture_images(cloud_gt, cams_ref, noise, seed)
    # The inference session's captures come from slightly mis-registered
    # poses when jitter is enabled; the pipeline still works with the
    # nominal cameras, as it would after an imperfect SfM alignment.
    capture_cams = cams_inf
    if pose_jitter > 0.0:
        capture_cams = synth.jitter_cameras(cams_inf, pose_jitter, seed)
    images_inf = synth.capture_images(cloud_changed, capture_cams, noise, seed,
                                      offset=len(cams_ref))
    gt = [synth.gt_change_mask(cloud_gt, cloud_changed, cam) for cam in cams_inf]
    rng = np.random.default_rng(cfg.seed)
    jitter = rng.normal(scale=0.02, size=cloud_gt.positions.shape)
    from .sh import SH_C0

    colors = np.clip(cloud_gt.sh_color[:, 0, :] * SH_C0 + 0.5, 0.0, 1.0)
    return SceneData(
        images_ref=images_ref, cameras_ref=cams_ref,
        images_inf=images_inf, cameras_inf=cams_inf,
        init_points=cloud_gt.positions + jitter, init_colors=colors,
        gt_masks=gt,
    )


@_stage("load-scene")
def load_real_scene(scene_dir: Path) -> SceneData:
    colmap_dir = scene_dir / "colmap"
    if not colmap_dir.is_dir():
        raise FileNotFoundError(f"missing COLMAP model directory: {colmap_dir}")
    model = parse_colmap_model(colmap_dir, format="auto")

    def load_split(split: str):
        img_dir = scene_dir / split / "images"
        if not img_dir.is_dir():
            raise FileNotFoundError(f"missing image directory: {img_dir}")
        names = sorted(p.name for p in img_dir.iterdir() if p.suffix.lower() == ".png")
        by_name = {img.name: img_id for img_id, img in model.images.items()}
        images, cameras = [], []
        for name in names:
            if name not in by_name:
                raise ValueError(f"image {name!r} has no pose in the COLMAP model")
            images.append(png.load_image(img_dir / name))
            cameras.append(model.camera_for_image(by_name[name]))
        return images, cameras

    images_ref, cams_ref = load_split("reference")
    images_inf, cams_inf = load_split("inference")
    points, colors = model.points_array()
    if points.shape[0] == 0:
        raise ValueError("COLMAP model has no 3D points to initialize from")
    return SceneData(
        images_ref=images_ref, cameras_ref=cams_ref,
        images_inf=images_inf, cameras_inf=cams_inf,
        init_points=points, init_colors=colors,
    )


def _metrics_rows(pred_masks, score_masks, gt_masks):
    rows = []
    for k, (pred, gt) in enumerate(zip(pred_masks, gt_masks)):
        tp, fp, fn = evalmetrics.confusion_counts(pred, gt)
        row = dict(view=k, miou=evalmetrics.miou(pred, gt),
                   f1=evalmetrics.f1(pred, gt), tp=tp, fp=fp, fn=fn)
        try:
            row["auroc"] = evalmetrics.auroc(score_masks[k], gt)
        except ValueError:
            row["auroc"] = float("nan")
        rows.append(row)
    return rows


def _format_report(rows, extras: dict) -> str:
    lines = ["# changesplat evaluation report"]
    for key, value in extras.items():
        lines.append(f"{key} = {value}")
    if rows:
        lines.append("view miou f1 auroc tp fp fn")
        for r in rows:
            lines.append(
                f"{r['view']} {r['miou']:.6f} {r['f1']:.6f} {r['auroc']:.6f} "
                f"{r['tp']} {r['fp']} {r['fn']}"
            )
        lines.append(f"mean_miou = {np.mean([r['miou'] for r in rows]):.6f}")
        lines.append(f"mean_f1 = {np.mean([r['f1'] for r in rows]):.6f}")
    return "\n".join(lines) + "\n"


def run_full(scene_dir, out_dir, cfg: trainer.TrainConfig | None = None,
             extractor_spec: features.FeatureExtractorSpec | None = None,
             augment: bool = True, save_artifacts: bool = True,
             progress=None) -> PipelineResult:
    """Execute the full method end to end and write artifacts + report."""
    scene_dir = Path(scene_dir)
    out_dir = Path(out_dir)
    cfg = cfg or trainer.TrainConfig()
    spec = extractor_spec or features.FeatureExtractorSpec()

    if (scene_dir / "fixture.json").is_file():
        data = load_fixture_scene(scene_dir, cfg)
    else:
        data = load_real_scene(scene_dir)

    ref_cloud = _stage("train-reference")(trainer.train_reference)(
        data.images_ref, data.cameras_ref, data.init_points, cfg,
        init_colors=data.init_colors, progress=progress,
    )
    renders = _stage("render-matched-views")(render_matched_views)(
        ref_cloud, data.cameras_inf)
    candidate = _stage("candidate-masks")(build_candidate_masks)(
        renders, data.images_inf, spec)
    # Regression targets are binary: the candidate fusion keeps graded
    # Candidate masks stay graded in the artifacts, but the change channel
    # trains on their binarized form: the rendered mask is thresholded at 0.5,
    # and regressing toward graded values (many just above the threshold)
    # leaves multi-view-averaged pixels below it, measurably costing recall.
    targets = [masks_mod.binarize(m) for m in candidate]
    change_cloud = _stage("train-change")(trainer.train_change)(
        ref_cloud, data.images_inf, data.cameras_inf, targets, cfg,
        progress=progress,
    )

    augmented = []
    if augment and cfg.iters_change_finetune > 0:
        augmented = _stage("augment-masks")(augment_masks)(
            change_cloud, data.images_ref, data.cameras_ref, spec)
        all_cams = list(data.cameras_inf) + list(data.cameras_ref)
        all_masks = list(targets) + [masks_mod.binarize(m) for m in augmented]
        change_cloud = _stage("finetune-change")(trainer.finetune_change)(
            change_cloud, all_cams, all_masks, cfg, progress=progress)

    final = _stage("render-change-masks")(render_change_masks)(
        change_cloud, data.cameras_inf)

    result = PipelineResult(
        reference_cloud=ref_cloud, change_cloud=change_cloud,
        candidate_masks=candidate, augmented_masks=augmented,
        final_masks=final, cameras_ref=data.cameras_ref,
        cameras_inf=data.cameras_inf, images_ref=data.images_ref,
        images_inf=data.images_inf, gt_masks=data.gt_masks,
    )
    _evaluate(result, cfg)
    if save_artifacts:
        _write_artifacts(result, out_dir, cfg)
    return result


def _evaluate(result: PipelineResult, cfg) -> None:
    extras = {"n_reference_views": len(result.cameras_ref),
              "n_inference_views": len(result.cameras_inf),
              "n_gaussians": len(result.change_cloud)}
    rows = []
    if result.gt_masks is not None:
        # Continuous scores before binarization, for AUROC.
        scores = []
        for cam in result.cameras_inf:
            ren = rasterize(result.change_cloud, cam)
            scores.append(masks_mod.filter_unseen(
                ChangeMask(ren.change.data[:, :, 0]), ren.alpha))
        rows = _metrics_rows(result.final_masks, scores, result.gt_masks)
        any_gt = any(m.values.sum() > 0 for m in result.gt_masks)
        if any_gt:
            extras["mean_miou"] = f"{np.mean([r['miou'] for r in rows]):.6f}"
        total_px = sum(m.values.size for m in result.final_masks)
        fp_px = sum(
            int(np.sum((p.values > 0.5) & (g.values < 0.5)))
            for p, g in zip(result.final_masks, result.gt_masks)
        )
        extras["false_positive_rate"] = f"{fp_px / total_px:.6f}"
        result.metrics = {
            "rows": rows,
            "mean_miou": float(np.mean([r["miou"] for r in rows])) if rows else float("nan"),
            "mean_f1": float(np.mean([r["f1"] for r in rows])) if rows else float("nan"),
            "false_positive_rate": fp_px / total_px,
        }
    result.report = _format_report(rows, extras)


def _write_artifacts(result: PipelineResult, out_dir: Path, cfg) -> None:
    for sub in ("clouds", "masks", "renders"):
        os.makedirs(out_dir / sub, exist_ok=True)
    ply.write_splat_ply(result.reference_cloud, out_dir / "clouds" / "reference.ply")
    ply.write_splat_ply(result.change_cloud, out_dir / "clouds" / "change.ply")
    for k, mask in enumerate(result.final_masks):
        png.save_mask(mask, out_dir / "masks" / f"change_{k:04d}.png")
    for k, mask in enumerate(result.candidate_masks):
        png.save_mask(mask, out_dir / "masks" / f"candidate_{k:04d}.png")
    for k, cam in enumerate(result.cameras_inf):
        ren = rasterize(result.change_cloud, cam)
        png.save_image(ren.rgb, out_dir / "renders" / f"rgb_{k:04d}.png")
        png.save_image(ren.change, out_dir / "renders" / f"change_{k:04d}.png")
        png.save_image(ren.alpha, out_dir / "renders" / f"alpha_{k:04d}.png")
    cfg.to_file(out_dir / "config.json")
    with open(out_dir / "report.txt", "w") as f:
        f.write(result.report)
