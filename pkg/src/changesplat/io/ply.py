"""Extended splat PLY reader/writer.

The layout follows the common 3DGS vertex properties (x, y, z, f_dc_*,
f_rest_*, opacity, scale_*, rot_*) with two extension properties,
``change_dc`` and ``change_opacity``, that third-party viewers can ignore.
Files are binary little-endian; properties are written as float64 so that
read(write(cloud)) is bit-preserving.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..scene import GaussianCloud, logit

N_REST = 45  # 15 higher-order SH coefficients x 3 channels

# Activated value assigned to the change channels when a legacy PLY without
# them is loaded (matches the trainer's near-zero change prior).
CHANGE_INIT_ACTIVATED = 0.01


class SplatIOError(ValueError):
    pass


def _property_names(n_change_rest: int):
    names = ["x", "y", "z"]
    names += [f"f_dc_{i}" for i in range(3)]
    names += [f"f_rest_{i}" for i in range(N_REST)]
    names += ["opacity"]
    names += [f"scale_{i}" for i in range(3)]
    names += [f"rot_{i}" for i in range(4)]
    names += ["change_dc", "change_opacity"]
    names += [f"change_rest_{i}" for i in range(n_change_rest)]
    return names


def write_splat_ply(cloud: GaussianCloud, path) -> None:
    if len(cloud) == 0:
        raise SplatIOError("empty cloud")
    n = len(cloud)
    n_change_rest = cloud.change_sh.shape[1] - 1
    names = _property_names(n_change_rest)

    cols = [cloud.positions]
    cols.append(cloud.sh_color[:, 0, :])                      # f_dc
    # f_rest is channel-major: index = channel * 15 + coeff.
    rest = cloud.sh_color[:, 1:, :].transpose(0, 2, 1).reshape(n, N_REST)
    cols.append(rest)
    cols.append(cloud.opacity_logits[:, None])
    cols.append(cloud.log_scales)
    cols.append(cloud.rotations)
    cols.append(cloud.change_sh[:, :1])
    cols.append(cloud.change_opacity_logits[:, None])
    if n_change_rest:
        cols.append(cloud.change_sh[:, 1:])
    table = np.concatenate(cols, axis=1).astype("<f8")
    assert table.shape[1] == len(names)

    header = ["ply", "format binary_little_endian 1.0",
              f"comment scene_extent {cloud.scene_extent!r}",
              f"element vertex {n}"]
    header += [f"property double {name}" for name in names]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(table.tobytes())


def read_splat_ply(path) -> GaussianCloud:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise SplatIOError(f"cannot read {path}: {e}") from e

    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise SplatIOError(f"{path.name}: not a PLY file")
    header_lines = raw[:end].decode("ascii", errors="replace").splitlines()
    body = raw[end + len(b"end_header\n"):]

    if not any(l.strip() == "format binary_little_endian 1.0" for l in header_lines):
        raise SplatIOError(f"{path.name}: only binary_little_endian 1.0 is supported")

    n_vertices = None
    props = []  # (name, numpy dtype char) in file order
    scene_extent = 1.0
    in_vertex = False
    type_map = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8"}
    for line in header_lines:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "comment" and len(parts) == 3 and parts[1] == "scene_extent":
            try:
                scene_extent = float(parts[2])
            except ValueError:
                pass
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                try:
                    n_vertices = int(parts[2])
                except (IndexError, ValueError):
                    raise SplatIOError(f"{path.name}: malformed element line")
        elif parts[0] == "property" and in_vertex:
            if len(parts) != 3 or parts[1] not in type_map:
                raise SplatIOError(f"{path.name}: unsupported property line {line!r}")
            props.append((parts[2], type_map[parts[1]]))
    if n_vertices is None:
        raise SplatIOError(f"{path.name}: no vertex element")

    names = [name for name, _ in props]
    if len(set(names)) != len(names):
        raise SplatIOError(f"{path.name}: duplicate vertex property name")
    if n_vertices and not props:
        raise SplatIOError(f"{path.name}: vertex element has no properties")
    dtype = np.dtype([(name, t) for name, t in props])
    if n_vertices * dtype.itemsize > len(body):
        raise SplatIOError(
            f"{path.name}: body holds {len(body)} bytes, need {n_vertices * dtype.itemsize}"
        )
    rows = np.frombuffer(body, dtype=dtype, count=n_vertices)
    have = {name for name, _ in props}

    def col(name):
        if name not in have:
            raise SplatIOError(f"{path.name}: missing required property {name!r}")
        return rows[name].astype(np.float64)

    required = _property_names(0)[:-2]  # change channels are optional
    for name in required:
        if name not in have:
            raise SplatIOError(f"{path.name}: missing required property {name!r}")

    n = n_vertices
    positions = np.stack([col("x"), col("y"), col("z")], axis=1)
    sh_color = np.zeros((n, 16, 3))
    for ch in range(3):
        sh_color[:, 0, ch] = col(f"f_dc_{ch}")
        for k in range(15):
            sh_color[:, 1 + k, ch] = col(f"f_rest_{ch * 15 + k}")
    log_scales = np.stack([col(f"scale_{i}") for i in range(3)], axis=1)
    rotations = np.stack([col(f"rot_{i}") for i in range(4)], axis=1)
    opacity = col("opacity")

    if "change_dc" in have and "change_opacity" in have:
        change_cols = [col("change_dc")]
        i = 0
        while f"change_rest_{i}" in have:
            change_cols.append(col(f"change_rest_{i}"))
            i += 1
        change_sh = np.stack(change_cols, axis=1)
        change_opacity = col("change_opacity")
    else:
        init = float(logit(CHANGE_INIT_ACTIVATED))
        change_sh = np.full((n, 1), init)
        change_opacity = np.full(n, init)

    all_fields = np.concatenate(
        [positions, sh_color.reshape(n, -1), log_scales, rotations,
         opacity[:, None], change_sh, change_opacity[:, None]], axis=1)
    bad = ~np.all(np.isfinite(all_fields), axis=1)
    if np.any(bad):
        raise SplatIOError(f"{path.name}: NaN/Inf at vertex index {int(np.argmax(bad))}")

    cloud = GaussianCloud(
        positions=positions,
        rotations=rotations,
        log_scales=log_scales,
        opacity_logits=opacity,
        sh_color=sh_color,
        change_sh=change_sh,
        change_opacity_logits=change_opacity,
        scene_extent=scene_extent,
    )
    if len(cloud) == 0:
        raise SplatIOError("empty cloud")
    return cloud
