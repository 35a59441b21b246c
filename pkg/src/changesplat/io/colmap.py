"""COLMAP sparse-model reading and writing (cameras, images, points3D).

Supports the public text and binary formats for the PINHOLE and
SIMPLE_PINHOLE camera models.  Parsers are total: any malformed input
raises :class:`ColmapError`, never an uncaught exception.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..scene import Camera, quat_to_rotation


class ColmapError(ValueError):
    pass


# COLMAP model ids for the two supported pinhole models.
MODEL_IDS = {"SIMPLE_PINHOLE": 0, "PINHOLE": 1}
MODEL_NAMES = {v: k for k, v in MODEL_IDS.items()}
MODEL_NUM_PARAMS = {"SIMPLE_PINHOLE": 3, "PINHOLE": 4}
# All COLMAP camera model names, used to produce a helpful error for
# recognized-but-unsupported models.
_KNOWN_UNSUPPORTED = {
    2: "SIMPLE_RADIAL", 3: "RADIAL", 4: "OPENCV", 5: "OPENCV_FISHEYE",
    6: "FULL_OPENCV", 7: "FOV", 8: "SIMPLE_RADIAL_FISHEYE",
    9: "RADIAL_FISHEYE", 10: "THIN_PRISM_FISHEYE",
}


@dataclass
class ColmapCamera:
    camera_id: int
    model: str
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float

    def params(self):
        if self.model == "SIMPLE_PINHOLE":
            return [self.fx, self.cx, self.cy]
        return [self.fx, self.fy, self.cx, self.cy]


@dataclass
class ColmapImage:
    image_id: int
    qvec: np.ndarray   # (w, x, y, z), normalized after parse
    tvec: np.ndarray
    camera_id: int
    name: str


@dataclass
class ColmapModel:
    cameras: dict = field(default_factory=dict)   # id -> ColmapCamera
    images: dict = field(default_factory=dict)    # id -> ColmapImage
    points: list = field(default_factory=list)    # [(xyz (3,), rgb (3,) uint8)]

    def camera_for_image(self, image_id: int) -> Camera:
        img = self.images[image_id]
        cam = self.cameras[img.camera_id]
        return Camera(
            fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy,
            width=cam.width, height=cam.height,
            rotation_w2c=quat_to_rotation(img.qvec),
            translation_w2c=img.tvec,
        )

    def points_array(self):
        """(N, 3) positions and (N, 3) float colors in [0, 1]."""
        if not self.points:
            return np.zeros((0, 3)), np.zeros((0, 3))
        xyz = np.stack([p[0] for p in self.points])
        rgb = np.stack([p[1] for p in self.points]).astype(np.float64) / 255.0
        return xyz, rgb


def _camera_from_params(camera_id, model_name, width, height, params):
    if model_name == "SIMPLE_PINHOLE":
        f, cx, cy = params
        fx = fy = f
    else:
        fx, fy, cx, cy = params
    return ColmapCamera(camera_id, model_name, int(width), int(height), fx, fy, cx, cy)


def _check_integrity(model: ColmapModel) -> ColmapModel:
    for image_id, img in model.images.items():
        if img.camera_id not in model.cameras:
            raise ColmapError(
                f"image {image_id} references unknown camera {img.camera_id}"
            )
        norm = float(np.linalg.norm(img.qvec))
        if not np.isfinite(norm) or norm < 1e-12:
            raise ColmapError(f"image {image_id} has a degenerate quaternion")
        img.qvec = img.qvec / norm
    return model


# ---------------------------------------------------------------------------
# text format


def _text_lines(path: Path):
    try:
        text = path.read_text(errors="replace")
    except OSError as e:
        raise ColmapError(f"cannot read {path}: {e}") from e
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if line and not line.startswith("#"):
            yield lineno, line


def _parse_cameras_text(path: Path) -> dict:
    cameras = {}
    for lineno, line in _text_lines(path):
        parts = line.split()
        if len(parts) < 4:
            raise ColmapError(f"{path.name}:{lineno}: malformed camera line")
        try:
            camera_id = int(parts[0])
            model_name = parts[1]
            width, height = int(parts[2]), int(parts[3])
            params = [float(p) for p in parts[4:]]
        except ValueError as e:
            raise ColmapError(f"{path.name}:{lineno}: {e}") from e
        if model_name not in MODEL_NUM_PARAMS:
            raise ColmapError(
                f"{path.name}:{lineno}: unsupported camera model {model_name!r}"
            )
        if len(params) != MODEL_NUM_PARAMS[model_name]:
            raise ColmapError(
                f"{path.name}:{lineno}: {model_name} expects "
                f"{MODEL_NUM_PARAMS[model_name]} params, got {len(params)}"
            )
        cameras[camera_id] = _camera_from_params(camera_id, model_name, width, height, params)
    return cameras


def _parse_images_text(path: Path) -> dict:
    # Image records alternate pose line / points2D line; the points2D line
    # may be empty, so blank lines must be kept (unlike the other files).
    try:
        text = path.read_text(errors="replace")
    except OSError as e:
        raise ColmapError(f"cannot read {path}: {e}") from e
    images = {}
    expecting_pose = True
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if line.startswith("#"):
            continue
        if not expecting_pose:
            # points2D line (possibly empty); content ignored.
            expecting_pose = True
            continue
        if not line:
            continue
        parts = line.split()
        if len(parts) < 10:
            raise ColmapError(f"{path.name}:{lineno}: malformed image line")
        try:
            image_id = int(parts[0])
            qvec = np.array([float(p) for p in parts[1:5]])
            tvec = np.array([float(p) for p in parts[5:8]])
            camera_id = int(parts[8])
        except ValueError as e:
            raise ColmapError(f"{path.name}:{lineno}: {e}") from e
        name = " ".join(parts[9:])
        images[image_id] = ColmapImage(image_id, qvec, tvec, camera_id, name)
        expecting_pose = False
    return images


def _parse_points_text(path: Path) -> list:
    points = []
    for lineno, line in _text_lines(path):
        parts = line.split()
        if len(parts) < 8:
            raise ColmapError(f"{path.name}:{lineno}: malformed point3D line")
        try:
            xyz = np.array([float(p) for p in parts[1:4]])
            rgb = np.array([int(p) for p in parts[4:7]], dtype=np.uint8)
        except (ValueError, OverflowError) as e:
            raise ColmapError(f"{path.name}:{lineno}: {e}") from e
        points.append((xyz, rgb))
    return points


# ---------------------------------------------------------------------------
# binary format


class _BinReader:
    def __init__(self, path: Path):
        try:
            self.data = path.read_bytes()
        except OSError as e:
            raise ColmapError(f"cannot read {path}: {e}") from e
        self.pos = 0
        self.name = path.name

    def read(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise ColmapError(
                f"{self.name}: truncated stream at byte offset {self.pos}"
            )
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out

    def read_cstring(self, max_len: int = 4096) -> str:
        end = self.data.find(b"\x00", self.pos)
        if end < 0:
            raise ColmapError(f"{self.name}: truncated stream at byte offset {self.pos}")
        if end - self.pos > max_len:
            raise ColmapError(f"{self.name}: unreasonably long string at byte offset {self.pos}")
        s = self.data[self.pos:end].decode("utf-8", errors="replace")
        self.pos = end + 1
        return s

    def check_remaining(self, count: int, min_record: int):
        # Guards against corrupted counts triggering huge allocations.
        if count < 0 or count * min_record > len(self.data) - self.pos:
            raise ColmapError(
                f"{self.name}: truncated stream, record count {count} exceeds "
                f"remaining bytes at byte offset {self.pos}"
            )


def _parse_cameras_binary(path: Path) -> dict:
    r = _BinReader(path)
    (num,) = r.read("<Q")
    r.check_remaining(num, 24)
    cameras = {}
    for _ in range(num):
        camera_id, model_id = r.read("<ii")
        width, height = r.read("<QQ")
        if model_id in MODEL_NAMES:
            model_name = MODEL_NAMES[model_id]
        elif model_id in _KNOWN_UNSUPPORTED:
            raise ColmapError(
                f"{path.name}: unsupported camera model "
                f"{_KNOWN_UNSUPPORTED[model_id]} (id {model_id})"
            )
        else:
            raise ColmapError(f"{path.name}: unknown camera model id {model_id}")
        n_params = MODEL_NUM_PARAMS[model_name]
        params = r.read(f"<{n_params}d")
        if width > 10**6 or height > 10**6:
            raise ColmapError(f"{path.name}: implausible camera dimensions")
        cameras[camera_id] = _camera_from_params(camera_id, model_name, width, height, params)
    return cameras


def _parse_images_binary(path: Path) -> dict:
    r = _BinReader(path)
    (num,) = r.read("<Q")
    r.check_remaining(num, 4 + 7 * 8 + 4 + 1 + 8)
    images = {}
    for _ in range(num):
        (image_id,) = r.read("<i")
        qvec = np.array(r.read("<4d"))
        tvec = np.array(r.read("<3d"))
        (camera_id,) = r.read("<i")
        name = r.read_cstring()
        (n_pts2d,) = r.read("<Q")
        r.check_remaining(n_pts2d, 24)
        r.pos += int(n_pts2d) * 24  # skip (x, y, point3D_id) triplets
        images[image_id] = ColmapImage(image_id, qvec, tvec, camera_id, name)
    return images


def _parse_points_binary(path: Path) -> list:
    r = _BinReader(path)
    (num,) = r.read("<Q")
    r.check_remaining(num, 8 + 24 + 3 + 8 + 8)
    points = []
    for _ in range(num):
        r.read("<Q")  # point3D_id
        xyz = np.array(r.read("<3d"))
        rgb = np.array(r.read("<3B"), dtype=np.uint8)
        r.read("<d")  # reprojection error
        (track_len,) = r.read("<Q")
        r.check_remaining(track_len, 8)
        r.pos += int(track_len) * 8  # skip (image_id, point2D_idx) pairs
        points.append((xyz, rgb))
    return points


# ---------------------------------------------------------------------------
# public API


def parse_colmap_model(dir_path, format: str = "auto") -> ColmapModel:
    """Parse a COLMAP sparse model directory ({cameras,images,points3D}.{txt,bin})."""
    dir_path = Path(dir_path)
    if format == "auto":
        format = "binary" if (dir_path / "cameras.bin").exists() else "text"
    if format not in ("text", "binary"):
        raise ColmapError(f"unknown format {format!r}")
    ext = ".txt" if format == "text" else ".bin"
    paths = {name: dir_path / f"{name}{ext}" for name in ("cameras", "images", "points3D")}
    for name, p in paths.items():
        if not p.is_file():
            raise ColmapError(f"missing COLMAP file: {p}")
    if format == "text":
        model = ColmapModel(
            cameras=_parse_cameras_text(paths["cameras"]),
            images=_parse_images_text(paths["images"]),
            points=_parse_points_text(paths["points3D"]),
        )
    else:
        model = ColmapModel(
            cameras=_parse_cameras_binary(paths["cameras"]),
            images=_parse_images_binary(paths["images"]),
            points=_parse_points_binary(paths["points3D"]),
        )
    return _check_integrity(model)


def write_colmap_model(model: ColmapModel, dir_path, format: str = "binary") -> None:
    """Write a model in COLMAP's text or binary layout (round-trip compatible)."""
    dir_path = Path(dir_path)
    os.makedirs(dir_path, exist_ok=True)
    if format == "text":
        _write_text(model, dir_path)
    elif format == "binary":
        _write_binary(model, dir_path)
    else:
        raise ColmapError(f"unknown format {format!r}")


def _write_text(model: ColmapModel, dir_path: Path) -> None:
    with open(dir_path / "cameras.txt", "w") as f:
        for cam in model.cameras.values():
            params = " ".join(repr(float(p)) for p in cam.params())
            f.write(f"{cam.camera_id} {cam.model} {cam.width} {cam.height} {params}\n")
    with open(dir_path / "images.txt", "w") as f:
        for img in model.images.values():
            q = " ".join(repr(float(v)) for v in img.qvec)
            t = " ".join(repr(float(v)) for v in img.tvec)
            f.write(f"{img.image_id} {q} {t} {img.camera_id} {img.name}\n\n")
    with open(dir_path / "points3D.txt", "w") as f:
        for i, (xyz, rgb) in enumerate(model.points, 1):
            coords = " ".join(repr(float(v)) for v in xyz)
            colors = " ".join(str(int(v)) for v in rgb)
            f.write(f"{i} {coords} {colors} 0.0\n")


def _write_binary(model: ColmapModel, dir_path: Path) -> None:
    with open(dir_path / "cameras.bin", "wb") as f:
        f.write(struct.pack("<Q", len(model.cameras)))
        for cam in model.cameras.values():
            f.write(struct.pack("<iiQQ", cam.camera_id, MODEL_IDS[cam.model],
                                cam.width, cam.height))
            params = cam.params()
            f.write(struct.pack(f"<{len(params)}d", *params))
    with open(dir_path / "images.bin", "wb") as f:
        f.write(struct.pack("<Q", len(model.images)))
        for img in model.images.values():
            f.write(struct.pack("<i", img.image_id))
            f.write(struct.pack("<4d", *img.qvec))
            f.write(struct.pack("<3d", *img.tvec))
            f.write(struct.pack("<i", img.camera_id))
            f.write(img.name.encode("utf-8") + b"\x00")
            f.write(struct.pack("<Q", 0))
    with open(dir_path / "points3D.bin", "wb") as f:
        f.write(struct.pack("<Q", len(model.points)))
        for i, (xyz, rgb) in enumerate(model.points, 1):
            f.write(struct.pack("<Q", i))
            f.write(struct.pack("<3d", *xyz))
            f.write(struct.pack("<3B", *(int(v) for v in rgb)))
            f.write(struct.pack("<d", 0.0))
            f.write(struct.pack("<Q", 0))
