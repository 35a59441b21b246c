"""Synthetic multi-view change scenes: ground-truth Gaussian clouds, camera
orbits, scripted changes, and photometric ground-truth change masks.

Randomness comes from numpy's PCG64 generator seeded explicitly, so fixtures
are reproducible across platforms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rasterizer import rasterize
from .scene import Camera, ChangeMask, GaussianCloud, ImageBuffer, logit

GT_PHOTO_THRESHOLD = 0.05  # |delta RGB| above this marks a changed pixel


@dataclass
class ChangeOp:
    kind: str                  # add | remove | move | recolor
    indices: list              # Gaussian indices in the ground-truth cloud
    delta: tuple = (0.0, 0.0, 0.0)   # translation for move ops
    color: tuple = (1.0, 0.1, 0.1)   # target color for recolor ops
    seed: int = 0                    # for add ops


@dataclass
class ChangeScript:
    ops: list = field(default_factory=list)

    def validate(self, n: int) -> None:
        seen = set()
        for op in self.ops:
            if op.kind not in ("add", "remove", "move", "recolor"):
                raise ValueError(f"unknown change op {op.kind!r}")
            idx = set(int(i) for i in op.indices)
            if op.kind != "add":
                if any(i < 0 or i >= n for i in idx):
                    raise ValueError(f"change op indices out of range for {n} Gaussians")
                if idx & seen:
                    raise ValueError("change ops must target disjoint index sets")
                seen |= idx

    def to_dict(self) -> list:
        return [
            dict(kind=op.kind, indices=list(map(int, op.indices)),
                 delta=list(op.delta), color=list(op.color), seed=op.seed)
            for op in self.ops
        ]

    @classmethod
    def from_dict(cls, data: list) -> "ChangeScript":
        return cls(ops=[
            ChangeOp(kind=d["kind"], indices=d["indices"],
                     delta=tuple(d.get("delta", (0, 0, 0))),
                     color=tuple(d.get("color", (1.0, 0.1, 0.1))),
                     seed=d.get("seed", 0))
            for d in data
        ])


def _look_at(center: np.ndarray, target: np.ndarray, fx: float, width: int,
             height: int) -> Camera:
    fwd = target - center
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 1.0, 0.0])
    if abs(fwd @ up) > 0.99:
        up = np.array([1.0, 0.0, 0.0])
    right = np.cross(fwd, up)
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return Camera(fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0,
                  width=width, height=height,
                  rotation_w2c=R, translation_w2c=-R @ center)


def generate_scene(seed: int, n_gaussians: int, n_cameras: int,
                   layout: str = "orbit", image_size: int = 64,
                   n_clusters: int = 8, radius: float = 2.2,
                   focal: float = 70.0, backdrop: int = 0):
    """Ground-truth cloud of Gaussian clusters plus cameras on an orbit or
    hemisphere looking at the cluster centroid.  Deterministic per seed.

    `backdrop` appends that many static Gaussians on an enclosing shell
    outside the camera layout, so every ray through the content terminates on
    reconstructable geometry instead of empty space (as it would in a real
    capture).  Backdrop rows come after the `n_gaussians` content rows and are
    never targeted by change scripts.
    """
    if n_gaussians < 1:
        raise ValueError("n_gaussians must be >= 1")
    if n_cameras < 2:
        raise ValueError("n_cameras must be >= 2")
    if layout not in ("orbit", "hemisphere"):
        raise ValueError(f"unknown layout {layout!r}")
    rng = np.random.default_rng(seed)

    n_clusters = min(n_clusters, n_gaussians)
    centers = rng.uniform(-0.45, 0.45, size=(n_clusters, 3))
    cluster_colors = rng.uniform(0.15, 0.95, size=(n_clusters, 3))
    assign = np.sort(rng.integers(0, n_clusters, size=n_gaussians))
    positions = centers[assign] + rng.normal(scale=0.06, size=(n_gaussians, 3))
    colors = np.clip(
        cluster_colors[assign] + rng.normal(scale=0.04, size=(n_gaussians, 3)),
        0.02, 0.98,
    )
    q = rng.normal(size=(n_gaussians, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)

    from .sh import SH_C0

    log_scales = np.log(rng.uniform(0.04, 0.09, size=(n_gaussians, 3)))
    opacities = rng.uniform(0.7, 0.98, size=n_gaussians)

    target = positions.mean(axis=0)

    if backdrop:
        # Tabletop disk under the content.  Cameras are raised to a steep
        # downward view (see below) so rays through the content terminate on
        # the disk instead of empty space, as they would on a real captured
        # surface.  A surface that enclosed the cameras would not work: a
        # Gaussian straddling a camera's z=0 plane degenerates under the
        # projected-covariance linearization and splats across the whole
        # image, so the backdrop must stay well in front of every camera.
        disk_r = 1.25 * radius
        floor_y = -0.27 * radius
        i = np.arange(backdrop)
        golden = np.pi * (3.0 - np.sqrt(5.0))
        rr = disk_r * np.sqrt((i + 0.5) / backdrop)
        theta = golden * i
        disk = target + np.stack(
            [rr * np.cos(theta), np.full(backdrop, floor_y), rr * np.sin(theta)],
            axis=1)
        # Just over half the inter-point spacing tiles the disk opaquely.
        sigma = 0.55 * np.sqrt(np.pi * disk_r**2 / backdrop)
        positions = np.concatenate([positions, disk])
        colors = np.concatenate(
            [colors, rng.uniform(0.1, 0.9, size=(backdrop, 3))])
        q_b = np.tile([1.0, 0.0, 0.0, 0.0], (backdrop, 1))
        q = np.concatenate([q, q_b])
        log_scales = np.concatenate(
            [log_scales, np.full((backdrop, 3), np.log(sigma))])
        opacities = np.concatenate([opacities, np.full(backdrop, 0.97)])

    n_total = n_gaussians + int(backdrop)
    sh = np.zeros((n_total, 16, 3))
    sh[:, 0, :] = (colors - 0.5) / SH_C0
    cloud = GaussianCloud(
        positions=positions,
        rotations=q,
        log_scales=log_scales,
        opacity_logits=logit(opacities),
        sh_color=sh,
        change_sh=np.full((n_total, 1), float(logit(0.01))),
        change_opacity_logits=np.full(n_total, float(logit(0.01))),
        scene_extent=radius,
    )

    # With a tabletop backdrop the orbit rises to a steep downward view so
    # the disk fills the background behind the content.
    orbit_height = 1.0 if backdrop else 0.25
    cameras = []
    for i in range(n_cameras):
        theta = 2.0 * np.pi * i / n_cameras
        if layout == "orbit":
            center = target + radius * np.array(
                [np.cos(theta), orbit_height, np.sin(theta)])
        else:
            phi = np.pi / 8 + (np.pi / 4) * ((i * 7919) % n_cameras) / n_cameras
            center = target + radius * np.array(
                [np.cos(theta) * np.cos(phi), np.sin(phi), np.sin(theta) * np.cos(phi)])
        cameras.append(_look_at(center, target, focal, image_size, image_size))
    return cloud, cameras


def apply_changes(cloud_gt: GaussianCloud, script: ChangeScript) -> GaussianCloud:
    """Ground-truth post-change cloud per the script (add/remove/move/recolor)."""
    script.validate(len(cloud_gt))
    out = cloud_gt.copy()
    remove = np.zeros(len(out), dtype=bool)
    from .sh import SH_C0

    for op in script.ops:
        idx = np.asarray(op.indices, dtype=int)
        if op.kind == "remove":
            remove[idx] = True
        elif op.kind == "move":
            out.positions[idx] += np.asarray(op.delta, dtype=np.float64)
        elif op.kind == "recolor":
            out.sh_color[idx, 0, :] = (np.asarray(op.color) - 0.5) / SH_C0
            out.sh_color[idx, 1:, :] = 0.0
        elif op.kind == "add":
            rng = np.random.default_rng(op.seed)
            n_new = len(op.indices) if op.indices else 10
            center = rng.uniform(-0.4, 0.4, size=3)
            color = rng.uniform(0.15, 0.95, size=3)
            rows = GaussianCloud(
                positions=center + rng.normal(scale=0.05, size=(n_new, 3)),
                rotations=np.tile([1.0, 0, 0, 0], (n_new, 1)),
                log_scales=np.log(rng.uniform(0.04, 0.09, size=(n_new, 3))),
                opacity_logits=logit(rng.uniform(0.7, 0.98, size=n_new)),
                sh_color=np.zeros((n_new, 16, 3)),
                change_sh=np.full((n_new, 1), float(logit(0.01))),
                change_opacity_logits=np.full(n_new, float(logit(0.01))),
            )
            rows.sh_color[:, 0, :] = (color - 0.5) / SH_C0
            for name in ("positions", "rotations", "log_scales", "opacity_logits",
                         "sh_color", "change_sh", "change_opacity_logits"):
                setattr(out, name, np.concatenate([getattr(out, name), getattr(rows, name)]))
            remove = np.concatenate([remove, np.zeros(n_new, dtype=bool)])
    if remove.any():
        keep = ~remove
        for name in ("positions", "rotations", "log_scales", "opacity_logits",
                     "sh_color", "change_sh", "change_opacity_logits"):
            setattr(out, name, getattr(out, name)[keep])
    return out


def gt_change_mask(cloud_gt: GaussianCloud, cloud_changed: GaussianCloud,
                   cam: Camera, tau: float = GT_PHOTO_THRESHOLD) -> ChangeMask:
    """Photometric ground truth: pixels whose ground-truth renders differ by
    more than tau in any channel, restricted to reconstructed area."""
    before = rasterize(cloud_gt, cam, with_depth=False)
    after = rasterize(cloud_changed, cam, with_depth=False)
    delta = np.abs(before.rgb.data - after.rgb.data).max(axis=2)
    seen = np.maximum(before.alpha.data[:, :, 0], after.alpha.data[:, :, 0]) >= 0.5
    values = ((delta > tau) & seen).astype(np.float64)
    return ChangeMask(values, binary_flag=True)


# ---------------------------------------------------------------------------
# fixture manifests


def default_script(cloud: GaussianCloud, seed: int,
                   n_content: int | None = None) -> ChangeScript:
    """One removed, one added, and one recolored cluster, chosen by spatial
    clustering of the ground-truth Gaussians.  Only the first `n_content`
    Gaussians are eligible (backdrop rows, if any, stay unchanged)."""
    rng = np.random.default_rng(seed + 1)
    n_content = len(cloud) if n_content is None else int(n_content)
    pts = cloud.positions[:n_content]
    # Greedy cluster recovery: group Gaussians by proximity to k anchors.
    k = 4
    anchors = pts[rng.choice(n_content, size=k, replace=False)]
    d = np.linalg.norm(pts[:, None, :] - anchors[None, :, :], axis=2)
    group = np.argmin(d, axis=1)
    sizes = [(g, int((group == g).sum())) for g in range(k)]
    sizes.sort(key=lambda t: -t[1])
    remove_g, recolor_g = sizes[0][0], sizes[1][0]
    return ChangeScript(ops=[
        ChangeOp("remove", np.nonzero(group == remove_g)[0].tolist()),
        # Near-white: a recolor that moves luminance as well as hue, so both
        # photometric and structural detectors can see it.
        ChangeOp("recolor", np.nonzero(group == recolor_g)[0].tolist(),
                 color=(0.97, 0.96, 0.92)),
        ChangeOp("add", list(range(25)), seed=seed + 2),
    ])


def capture_images(cloud: GaussianCloud, cams, noise: float = 0.0,
                   seed: int = 0, offset: int = 0):
    """Render each camera's view and, when `noise` > 0, add iid Gaussian
    sensor noise (std `noise` in [0,1] intensity units, clipped).  The noise
    stream is seeded per image from (seed, offset + index), so captures are
    reproducible and independent of batching.  Ground-truth change masks are
    always computed from clean renders; noise only affects the captures a
    real camera would have produced."""
    out = []
    for k, cam in enumerate(cams):
        img = rasterize(cloud, cam).rgb
        if noise > 0.0:
            rng = np.random.default_rng([seed, offset + k])
            data = img.data + rng.normal(scale=noise, size=img.data.shape)
            img = ImageBuffer(np.clip(data, 0.0, 1.0))
        out.append(img)
    return out


def jitter_cameras(cams, sigma: float, seed: int = 0):
    """Perturb each camera's orientation by a small random rotation (angle in
    radians ~ N(0, sigma) about a random axis).  Models the pose-registration
    error a structure-from-motion solve leaves between capture sessions: the
    pipeline keeps believing the nominal poses while the actual captures were
    taken from slightly different ones."""
    out = []
    rng = np.random.default_rng([seed, 17])
    for cam in cams:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = rng.normal(scale=sigma)
        K = np.array([[0.0, -axis[2], axis[1]],
                      [axis[2], 0.0, -axis[0]],
                      [-axis[1], axis[0], 0.0]])
        dR = np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)
        # Re-orthonormalize so accumulated float error never trips validation.
        u, _, vt = np.linalg.svd(dR @ cam.rotation_w2c)
        out.append(Camera(fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy,
                          width=cam.width, height=cam.height,
                          rotation_w2c=u @ vt,
                          translation_w2c=cam.translation_w2c.copy()))
    return out


def write_manifest(path, seed: int, n_gaussians: int, n_ref: int, n_inf: int,
                   layout: str = "orbit", image_size: int = 64,
                   script: ChangeScript | None = None,
                   backdrop: int = 0, noise: float = 0.0,
                   pose_jitter: float = 0.0) -> None:
    data = dict(seed=seed, n_gaussians=n_gaussians, n_ref_cameras=n_ref,
                n_inf_cameras=n_inf, layout=layout, image_size=image_size,
                backdrop=backdrop, noise=noise, pose_jitter=pose_jitter,
                script=None if script is None else script.to_dict())
    with open(path, "w") as f:
        json.dump(data, f, indent=2)
        f.write("\n")


def load_fixture(path):
    """Instantiate (cloud_gt, cloud_changed, cams_ref, cams_inf, script) from
    a manifest file."""
    with open(path) as f:
        data = json.load(f)
    seed = int(data["seed"])
    n_ref = int(data["n_ref_cameras"])
    n_inf = int(data["n_inf_cameras"])
    n_content = int(data["n_gaussians"])
    cloud_gt, cams = generate_scene(
        seed, n_content, n_ref + n_inf,
        layout=data.get("layout", "orbit"),
        image_size=int(data.get("image_size", 64)),
        backdrop=int(data.get("backdrop", 0)),
    )
    # Interleave so reference and inference orbits cover the full circle.
    idx = np.arange(n_ref + n_inf)
    inf_idx = set(idx[:: max((n_ref + n_inf) // max(n_inf, 1), 1)][:n_inf].tolist())
    cams_inf = [cams[i] for i in sorted(inf_idx)]
    cams_ref = [cams[i] for i in idx if i not in inf_idx][:n_ref]
    if data.get("script") is None:
        script = default_script(cloud_gt, seed, n_content=n_content)
    else:
        script = ChangeScript.from_dict(data["script"])
    cloud_changed = apply_changes(cloud_gt, script)
    return cloud_gt, cloud_changed, cams_ref, cams_inf, script
