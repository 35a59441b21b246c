"""Command-line interface.

Subcommands cover the whole workflow: synthetic fixture generation,
reference training, candidate-mask construction, change training,
multi-view mask rendering, metric evaluation, and the full pipeline.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.
Set CHANGESPLAT_LOG=debug|info|warning to control verbosity.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import evalmetrics, features, masks as masks_mod, pipeline, rasterizer, synth, trainer
from .io import png, ply

log = logging.getLogger("changesplat")


def _setup_logging() -> None:
    level = os.environ.get("CHANGESPLAT_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker threads for rasterization (default: all cores)")


def _load_config(args) -> trainer.TrainConfig:
    cfg = (trainer.TrainConfig.from_file(args.config)
           if getattr(args, "config", None) else trainer.TrainConfig())
    cfg.seed = args.seed
    for name in ("iters_reference", "iters_change", "iters_change_finetune"):
        flag = getattr(args, name, None)
        if flag is not None:
            setattr(cfg, name, flag)
    cfg.validate()
    return cfg


def _load_scene(scene_dir: Path, cfg: trainer.TrainConfig) -> pipeline.SceneData:
    if (scene_dir / "fixture.json").is_file():
        return pipeline.load_fixture_scene(scene_dir, cfg)
    return pipeline.load_real_scene(scene_dir)


def _progress(args):
    if os.environ.get("CHANGESPLAT_LOG", "").lower() not in ("debug", "info"):
        return None

    def report(it, loss, n):
        if it % 100 == 0:
            log.info("iter %d loss %.5f gaussians %d", it, loss, n)
    return report


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    out = Path(args.out)
    for sub in ("reference/images", "inference/images", "gt_masks"):
        os.makedirs(out / sub, exist_ok=True)
    synth.write_manifest(out / "fixture.json", seed=args.seed,
                         n_gaussians=args.n_gaussians, n_ref=args.n_ref,
                         n_inf=args.n_inf, layout=args.layout,
                         image_size=args.image_size, backdrop=args.backdrop,
                         noise=args.noise, pose_jitter=args.pose_jitter)
    cloud_gt, cloud_changed, cams_ref, cams_inf, _ = synth.load_fixture(
        out / "fixture.json")
    images_ref = synth.capture_images(cloud_gt, cams_ref, args.noise, args.seed)
    for k, img in enumerate(images_ref):
        png.save_image(img, out / "reference" / "images" / f"ref_{k:04d}.png")
    capture_cams = cams_inf
    if args.pose_jitter > 0.0:
        capture_cams = synth.jitter_cameras(cams_inf, args.pose_jitter, args.seed)
    images_inf = synth.capture_images(cloud_changed, capture_cams, args.noise,
                                      args.seed, offset=len(cams_ref))
    for k, (cam, img) in enumerate(zip(cams_inf, images_inf)):
        png.save_image(img, out / "inference" / "images" / f"inf_{k:04d}.png")
        gt = synth.gt_change_mask(cloud_gt, cloud_changed, cam)
        png.save_mask(gt, out / "gt_masks" / f"gt_{k:04d}.png")
    ply.write_splat_ply(cloud_gt, out / "gt_reference.ply")
    ply.write_splat_ply(cloud_changed, out / "gt_inference.ply")
    print(f"wrote fixture with {len(cloud_gt)} Gaussians, "
          f"{len(cams_ref)} reference and {len(cams_inf)} inference views to {out}")
    return 0


def cmd_train_ref(args) -> int:
    cfg = _load_config(args)
    rasterizer.set_default_threads(args.threads)
    data = _load_scene(Path(args.scene), cfg)
    cloud = trainer.train_reference(
        data.images_ref, data.cameras_ref, data.init_points, cfg,
        init_colors=data.init_colors, progress=_progress(args))
    ply.write_splat_ply(cloud, args.out)
    print(f"trained reference cloud with {len(cloud)} Gaussians -> {args.out}")
    return 0


def cmd_masks(args) -> int:
    cfg = _load_config(args)
    rasterizer.set_default_threads(args.threads)
    data = _load_scene(Path(args.scene), cfg)
    cloud = ply.read_splat_ply(args.cloud)
    renders = pipeline.render_matched_views(cloud, data.cameras_inf)
    spec = features.FeatureExtractorSpec(
        kind="external-files" if args.features else "builtin-patchstat",
        external_dir=args.features)
    candidate = pipeline.build_candidate_masks(renders, data.images_inf, spec)
    out = Path(args.out)
    os.makedirs(out, exist_ok=True)
    for k, m in enumerate(candidate):
        png.save_mask(m, out / f"candidate_{k:04d}.png")
    print(f"wrote {len(candidate)} candidate masks to {out}")
    return 0


def cmd_train_change(args) -> int:
    cfg = _load_config(args)
    rasterizer.set_default_threads(args.threads)
    data = _load_scene(Path(args.scene), cfg)
    cloud = ply.read_splat_ply(args.cloud)
    mask_dir = Path(args.masks)
    paths = sorted(mask_dir.glob("candidate_*.png"))
    if len(paths) != len(data.cameras_inf):
        raise ValueError(
            f"mask/view count mismatch: {len(paths)} masks in {mask_dir} for "
            f"{len(data.cameras_inf)} inference views")
    # Training targets are binarized at the same threshold the rendered
    # masks are decided at (see pipeline.run_full).
    targets = [masks_mod.binarize(png.load_mask(p)) for p in paths]
    change_cloud = trainer.train_change(
        cloud, data.images_inf, data.cameras_inf, targets, cfg,
        progress=_progress(args))
    if args.augment and cfg.iters_change_finetune > 0:
        spec = features.FeatureExtractorSpec()
        augmented = pipeline.augment_masks(
            change_cloud, data.images_ref, data.cameras_ref, spec)
        change_cloud = trainer.finetune_change(
            change_cloud,
            list(data.cameras_inf) + list(data.cameras_ref),
            targets + [masks_mod.binarize(m) for m in augmented],
            cfg, progress=_progress(args))
    ply.write_splat_ply(change_cloud, args.out)
    print(f"trained change cloud with {len(change_cloud)} Gaussians -> {args.out}")
    return 0


def cmd_render(args) -> int:
    cfg = _load_config(args)
    rasterizer.set_default_threads(args.threads)
    data = _load_scene(Path(args.scene), cfg)
    cloud = ply.read_splat_ply(args.cloud)
    out = Path(args.out)
    os.makedirs(out, exist_ok=True)
    masks = pipeline.render_change_masks(cloud, data.cameras_inf,
                                         threshold=args.threshold)
    for k, (cam, m) in enumerate(zip(data.cameras_inf, masks)):
        ren = rasterizer.rasterize(cloud, cam)
        png.save_image(ren.rgb, out / f"rgb_{k:04d}.png")
        png.save_image(ren.change, out / f"change_{k:04d}.png")
        png.save_mask(m, out / f"mask_{k:04d}.png")
    print(f"rendered {len(masks)} views to {out}")
    return 0


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    pred_paths = sorted(pred_dir.glob("*.png"))
    gt_paths = sorted(gt_dir.glob("*.png"))
    if len(pred_paths) == 0:
        raise ValueError(f"no PNG masks found in {pred_dir}")
    if len(pred_paths) != len(gt_paths):
        raise ValueError(
            f"mask count mismatch: {len(pred_paths)} predictions vs "
            f"{len(gt_paths)} ground-truth masks")
    mious, f1s = [], []
    for pp, gp in zip(pred_paths, gt_paths):
        pred = png.load_mask(pp, binary=True)
        gt = png.load_mask(gp, binary=True)
        m = evalmetrics.miou(pred, gt)
        f = evalmetrics.f1(pred, gt)
        mious.append(m)
        f1s.append(f)
        print(f"{pp.name} miou={m:.6f} f1={f:.6f}")
    print(f"mean_miou={np.mean(mious):.6f} mean_f1={np.mean(f1s):.6f}")
    return 0


def cmd_run(args) -> int:
    cfg = _load_config(args)
    rasterizer.set_default_threads(args.threads)
    result = pipeline.run_full(args.scene, args.out, cfg=cfg,
                               augment=not args.no_augment,
                               progress=_progress(args))
    sys.stdout.write(result.report)
    print(f"artifacts written to {args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="changesplat",
        description="Label-free scene change localization with change-aware "
                    "Gaussian splatting.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic change-scene fixture")
    p.add_argument("--out", required=True)
    p.add_argument("--n-gaussians", type=int, default=200)
    p.add_argument("--n-ref", type=int, default=20)
    p.add_argument("--n-inf", type=int, default=10)
    p.add_argument("--layout", choices=("orbit", "hemisphere"), default="orbit")
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--backdrop", type=int, default=0,
                   help="extra static Gaussians forming a tabletop disk "
                        "below the scene content")
    p.add_argument("--noise", type=float, default=0.0,
                   help="sensor-noise std added to captured images")
    p.add_argument("--pose-jitter", type=float, default=0.0,
                   help="rotation std (radians) mis-registering the "
                        "inference captures from their nominal poses")
    _add_common(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train-ref", help="optimize the reference-scene cloud")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True, help="output PLY path")
    p.add_argument("--config", help="JSON training config")
    p.add_argument("--iters-reference", type=int, dest="iters_reference")
    _add_common(p)
    p.set_defaults(fn=cmd_train_ref)

    p = sub.add_parser("masks", help="build candidate change masks")
    p.add_argument("--scene", required=True)
    p.add_argument("--cloud", required=True, help="reference cloud PLY")
    p.add_argument("--out", required=True)
    p.add_argument("--features", help="directory of precomputed .csfm feature files")
    _add_common(p)
    p.set_defaults(fn=cmd_masks)

    p = sub.add_parser("train-change", help="learn change channels on the inference scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--cloud", required=True, help="reference cloud PLY")
    p.add_argument("--masks", required=True, help="candidate mask directory")
    p.add_argument("--out", required=True, help="output PLY path")
    p.add_argument("--config", help="JSON training config")
    p.add_argument("--iters-change", type=int, dest="iters_change")
    p.add_argument("--iters-change-finetune", type=int, dest="iters_change_finetune")
    p.add_argument("--augment", action="store_true",
                   help="reverse-comparison augmentation + fine-tune phase")
    _add_common(p)
    p.set_defaults(fn=cmd_train_change)

    p = sub.add_parser("render", help="render change masks at inference poses")
    p.add_argument("--scene", required=True)
    p.add_argument("--cloud", required=True, help="change cloud PLY")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    _add_common(p)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("eval", help="score predicted masks against ground truth")
    p.add_argument("--pred", required=True, help="directory of predicted masks")
    p.add_argument("--gt", required=True, help="directory of ground-truth masks")
    _add_common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("run", help="execute the full pipeline end to end")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON training config")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--iters-reference", type=int, dest="iters_reference")
    p.add_argument("--iters-change", type=int, dest="iters_change")
    p.add_argument("--iters-change-finetune", type=int, dest="iters_change_finetune")
    _add_common(p)
    p.set_defaults(fn=cmd_run)

    return ap


def main(argv=None) -> int:
    _setup_logging()
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        # Missing or malformed inputs are usage errors (exit 2); failures
        # during processing are runtime errors (exit 1).
        cause = e.__cause__ if isinstance(e, pipeline.PipelineError) else e
        if isinstance(cause, FileNotFoundError):
            return 2
        return 1


if __name__ == "__main__":
    sys.exit(main())
