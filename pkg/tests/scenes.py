"""Shared random-scene helpers for tests."""

import numpy as np

from changesplat.scene import Camera, GaussianCloud, logit


def look_at_camera(center, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0),
                   fx=70.0, fy=70.0, width=64, height=64):
    center = np.asarray(center, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - center
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])  # world-to-camera rows
    t = -R @ center
    return Camera(fx=fx, fy=fy, cx=width / 2, cy=height / 2,
                  width=width, height=height, rotation_w2c=R, translation_w2c=t)


def random_cloud(rng, n, scale_range=(0.02, 0.08), box=0.6, with_change=True,
                 sh_rest_scale=0.15):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    sh = np.zeros((n, 16, 3))
    sh[:, 0, :] = rng.uniform(-1.0, 1.2, size=(n, 3))
    sh[:, 1:, :] = rng.normal(scale=sh_rest_scale, size=(n, 15, 3))
    change_dc = logit(rng.uniform(0.05, 0.95, size=n)) if with_change else logit(
        np.full(n, 0.01))
    change_op = logit(rng.uniform(0.05, 0.95, size=n)) if with_change else logit(
        np.full(n, 0.01))
    return GaussianCloud(
        positions=rng.uniform(-box, box, size=(n, 3)),
        rotations=q,
        log_scales=np.log(rng.uniform(*scale_range, size=(n, 3))),
        opacity_logits=logit(rng.uniform(0.2, 0.95, size=n)),
        sh_color=sh,
        change_sh=change_dc[:, None],
        change_opacity_logits=change_op,
        scene_extent=2.0,
    )
