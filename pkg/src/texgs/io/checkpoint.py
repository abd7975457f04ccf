"""Checkpoint directories: ``point_cloud.ply`` with the usual Gaussian
splatting property names, ``textures.tgtx`` for textured variants and
``meta.json``."""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np

from texgs.scene import Scene
from texgs.texture import TextureVariant, read_tgtx, write_tgtx

CHECKPOINT_VERSION = 1
PLY_NAME = "point_cloud.ply"
TGTX_NAME = "textures.tgtx"
META_NAME = "meta.json"

_PLY_TYPES = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8"}


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncated(CheckpointError):
    pass


class CheckpointCountMismatch(CheckpointError):
    pass


def _ply_fields(n_sh: int):
    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(3 * (n_sh - 1))]
    names += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    return names


def write_ply(path, scene: Scene) -> None:
    n, k = len(scene), scene.sh.shape[1]
    dt = np.dtype(scene.means.dtype).newbyteorder("<")
    ply_type = "double" if dt.itemsize == 8 else "float"
    names = _ply_fields(k)
    table = np.zeros(n, dtype=[(name, dt) for name in names])
    table["x"], table["y"], table["z"] = scene.means.T
    table["f_dc_0"], table["f_dc_1"], table["f_dc_2"] = scene.sh[:, 0, :].T
    # rest coefficients are stored channel-major, matching common viewers
    rest = scene.sh[:, 1:, :].transpose(0, 2, 1).reshape(n, -1)
    for i in range(rest.shape[1]):
        table[f"f_rest_{i}"] = rest[:, i]
    table["opacity"] = scene.opacity_logits
    for i in range(3):
        table[f"scale_{i}"] = scene.log_scales[:, i]
    for i in range(4):
        table[f"rot_{i}"] = scene.quats[:, i]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property {ply_type} {name}" for name in names]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(table.tobytes())


def read_ply(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise CheckpointTruncated(f"{path}: missing or truncated PLY header")
    lines = raw[:end].decode("ascii").splitlines()
    n, props, fmt = None, [], None
    for line in lines[1:]:
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            if parts[1] != "vertex":
                raise CheckpointError(f"{path}: unsupported element {parts[1]}")
            n = int(parts[2])
        elif parts[0] == "property":
            if parts[1] not in _PLY_TYPES:
                raise CheckpointError(f"{path}: unsupported property type {parts[1]}")
            props.append((parts[2], _PLY_TYPES[parts[1]]))
    if fmt != "binary_little_endian" or n is None:
        raise CheckpointError(f"{path}: only binary little-endian vertex PLY is supported")
    dtype = np.dtype(props)
    body = raw[end + len(b"end_header\n"):]
    if len(body) < n * dtype.itemsize:
        raise CheckpointTruncated(f"{path}: truncated PLY body ({len(body)} of {n * dtype.itemsize} bytes)")
    return np.frombuffer(body, dtype=dtype, count=n)


def _scene_from_table(table: np.ndarray, meta: dict) -> Scene:
    names = table.dtype.names
    n_rest = sum(1 for x in names if x.startswith("f_rest_"))
    if n_rest % 3:
        raise CheckpointError("f_rest property count is not a multiple of 3")
    k = n_rest // 3 + 1
    dt = table.dtype["x"].newbyteorder("=")
    col = lambda *keys: np.stack([table[x] for x in keys], axis=1).astype(dt)
    n = table.shape[0]
    sh = np.zeros((n, k, 3), dtype=dt)
    sh[:, 0, :] = col("f_dc_0", "f_dc_1", "f_dc_2")
    if k > 1:
        rest = col(*[f"f_rest_{i}" for i in range(n_rest)])
        sh[:, 1:, :] = rest.reshape(n, 3, k - 1).transpose(0, 2, 1)
    return Scene(
        means=col("x", "y", "z"),
        quats=col("rot_0", "rot_1", "rot_2", "rot_3"),
        log_scales=col("scale_0", "scale_1", "scale_2"),
        opacity_logits=table["opacity"].astype(dt),
        sh=sh,
        m=float(meta.get("m", 3.0)),
        sh_degree=int(meta.get("sh_degree", 0)),
        background=meta.get("background", (0.0, 0.0, 0.0)),
    )


def save_checkpoint(scene: Scene, meta: dict, path) -> Path:
    """Atomically writes a checkpoint directory (temp dir, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        write_ply(tmp / PLY_NAME, scene)
        if scene.textures is not None:
            write_tgtx(tmp / TGTX_NAME, scene.textures)
        info = {
            "version": CHECKPOINT_VERSION,
            "variant": scene.variant.value,
            "n_gaussians": len(scene),
            "tex_res": scene.tex_res,
            "m": scene.m,
            "sh_degree": scene.sh_degree,
            "background": [float(x) for x in scene.background],
            "meta": meta or {},
        }
        (tmp / META_NAME).write_text(json.dumps(info, indent=2, sort_keys=True))
        if path.exists():
            old = path.with_name(f".{path.name}.old")
            shutil.rmtree(old, ignore_errors=True)
            os.replace(path, old)
            os.replace(tmp, path)
            shutil.rmtree(old, ignore_errors=True)
        else:
            os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def load_checkpoint(path, with_meta: bool = False):
    path = Path(path)
    if not (path / META_NAME).is_file() or not (path / PLY_NAME).is_file():
        raise FileNotFoundError(f"no checkpoint at {path}")
    try:
        info = json.loads((path / META_NAME).read_text())
    except json.JSONDecodeError as e:
        raise CheckpointTruncated(f"{path / META_NAME}: {e}") from e
    if info.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {info.get('version')} != {CHECKPOINT_VERSION}")
    table = read_ply(path / PLY_NAME)
    if table.shape[0] != info.get("n_gaussians", table.shape[0]):
        raise CheckpointCountMismatch(f"PLY holds {table.shape[0]} Gaussians, metadata says {info['n_gaussians']}")
    scene = _scene_from_table(table, info)
    variant = TextureVariant.parse(info.get("variant", "none"))
    if variant is not TextureVariant.NONE:
        tgtx = path / TGTX_NAME
        if not tgtx.is_file():
            raise FileNotFoundError(f"variant {variant.value} checkpoint lacks {TGTX_NAME}")
        try:
            tex = read_tgtx(tgtx)
        except ValueError as e:
            if "version" in str(e):
                raise CheckpointVersionError(str(e)) from e
            raise CheckpointTruncated(str(e)) from e
        if tex.shape[0] != len(scene):
            raise CheckpointCountMismatch(f"TGTX holds {tex.shape[0]} maps, PLY holds {len(scene)} Gaussians")
        scene.variant = variant
        scene.textures = tex
        scene.__post_init__()
    return (scene, info.get("meta", {})) if with_meta else scene
