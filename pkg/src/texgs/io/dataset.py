"""NeRF-synthetic style datasets: transforms_{split}.json plus images."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from texgs.camera import Camera
from texgs.io.images import read_image

RIGID_TOL = 1e-5


class DatasetError(Exception):
    pass


class DatasetFileMissing(DatasetError, FileNotFoundError):
    pass


class MalformedDataset(DatasetError, ValueError):
    pass


class InconsistentImages(DatasetError, ValueError):
    pass


@dataclass
class Dataset:
    cameras: list
    images: list          # (H, W, 3) float32, already composited on background
    names: list
    background: np.ndarray
    width: int
    height: int
    points: Optional[np.ndarray] = None   # optional init point cloud (M, 3)
    colors: Optional[np.ndarray] = None   # matching colors (M, 3)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (len(self.cameras) == len(self.images) == len(self.names)):
            raise InconsistentImages("cameras, images and names differ in length")
        for name, img in zip(self.names, self.images):
            if img.shape[:2] != (self.height, self.width):
                raise InconsistentImages(f"{name}: image {img.shape[:2]} != {(self.height, self.width)}")
        for name, cam in zip(self.names, self.cameras):
            check_rigid(cam.world_to_cam, name)

    def __len__(self):
        return len(self.cameras)

    def __iter__(self):
        return iter(zip(self.cameras, self.images))


def check_rigid(M, name="pose"):
    R = np.asarray(M, dtype=np.float64)[:3, :3]
    if np.abs(R @ R.T - np.eye(3)).max() > RIGID_TOL or abs(np.linalg.det(R) - 1.0) > RIGID_TOL:
        raise MalformedDataset(f"{name}: camera pose is not a rigid transform")


def parse_background(value) -> np.ndarray:
    if isinstance(value, str):
        named = {"black": (0.0, 0.0, 0.0), "white": (1.0, 1.0, 1.0)}
        if value.lower() in named:
            return np.array(named[value.lower()])
        try:
            value = [float(x) for x in value.split(",")]
        except ValueError:
            raise ValueError(f"background must be black, white or R,G,B; got {value!r}") from None
    bg = np.asarray(value, dtype=np.float64).reshape(-1)
    if bg.size != 3 or np.any(bg < 0) or np.any(bg > 1):
        raise ValueError(f"background must be three values in [0, 1], got {value!r}")
    return bg


def composite(img: np.ndarray, background) -> np.ndarray:
    """Straight-alpha RGBA over a constant background; RGB passes through."""
    if img.shape[-1] == 3:
        return img.astype(np.float32)
    a = img[..., 3:4]
    out = img[..., :3] * a + np.asarray(background, dtype=np.float32) * (1 - a)
    return out.astype(np.float32)


def _resolve_image(root: Path, file_path: str) -> Path:
    p = root / file_path
    if p.suffix == "":
        for ext in (".png", ".tgim"):
            if p.with_suffix(ext).exists():
                return p.with_suffix(ext)
        return p.with_suffix(".png")
    return p


def load_dataset(path, split: str = "train", background="black", threads: int = 1) -> Dataset:
    root = Path(path)
    meta_path = root / f"transforms_{split}.json"
    if not meta_path.is_file():
        raise DatasetFileMissing(f"missing {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
        fov = float(meta["camera_angle_x"])
        frames = list(meta["frames"])
        entries = [(str(fr["file_path"]), np.asarray(fr["transform_matrix"], dtype=np.float64)) for fr in frames]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise MalformedDataset(f"{meta_path}: {e}") from e
    for fp, M in entries:
        if M.shape != (4, 4):
            raise MalformedDataset(f"{meta_path}: transform_matrix of {fp} is not 4x4")
    if not entries:
        raise MalformedDataset(f"{meta_path}: no frames")
    paths = [_resolve_image(root, fp) for fp, _ in entries]
    for p in paths:
        if not p.is_file():
            raise DatasetFileMissing(f"missing image {p}")
    bg = parse_background(background)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as ex:
        raw = list(ex.map(read_image, paths))
    h, w = raw[0].shape[:2]
    for p, img in zip(paths, raw):
        if img.shape[:2] != (h, w):
            raise InconsistentImages(f"{p}: size {img.shape[1]}x{img.shape[0]} differs from {w}x{h}")
    focal = 0.5 * w / math.tan(0.5 * fov)
    cams = []
    for fp, M in entries:
        check_rigid(M, fp)
        cams.append(Camera.from_c2w_gl(w, h, focal, focal, w / 2.0, h / 2.0, M))
    return Dataset(
        cameras=cams,
        images=[composite(img, bg) for img in raw],
        names=[fp for fp, _ in entries],
        background=bg,
        width=w,
        height=h,
        meta={"camera_angle_x": fov, "split": split, "path": str(root)},
    )


def write_dataset(ds: Dataset, path, split: str) -> None:
    """Inverse of :func:`load_dataset` for square-pixel, centred cameras."""
    from texgs.io.images import write_image

    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    frames = []
    for i, (cam, img) in enumerate(zip(ds.cameras, ds.images)):
        name = f"{split}/r_{i:03d}"
        (root / split).mkdir(exist_ok=True)
        write_image(root / f"{name}.png", img)
        frames.append({"file_path": name, "transform_matrix": cam.c2w_gl().tolist()})
    fov = 2.0 * math.atan(0.5 * ds.width / ds.cameras[0].fx)
    (root / f"transforms_{split}.json").write_text(json.dumps({"camera_angle_x": fov, "frames": frames}, indent=2))
