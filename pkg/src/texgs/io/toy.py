"""Procedural toy scenes with analytically ray-cast ground truth.

Nothing here touches the splatting renderer: images come from exact
ray/quad and ray/sphere hits, box-filtered over a supersampling grid.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np

from texgs.camera import Camera, look_at
from texgs.io.dataset import Dataset, parse_background

CHECK_A = np.array([0.92, 0.85, 0.25])
CHECK_B = np.array([0.10, 0.20, 0.70])


@dataclass(frozen=True)
class ToySpec:
    name: str = "checkerboard-quad"
    n_views: int = 8
    n_test: int = 4
    width: int = 64
    height: int = 64
    seed: int = 0
    supersample: int = 4
    checks: int = 4
    fov_deg: float = 45.0
    radius: float = 3.5
    n_points: int = 256
    background: tuple = (0.0, 0.0, 0.0)


def _rng(seed: int, name: str):
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


# ---- analytic surfaces -------------------------------------------------
# each returns (t, rgb) per ray, t = inf where missed

def _quad_hit(o, d, z0, half, color_fn):
    dz = d[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (z0 - o[2]) / dz
    x = o[0] + t * d[:, 0]
    y = o[1] + t * d[:, 1]
    hit = (np.abs(dz) > 1e-12) & (t > 0) & (np.abs(x) <= half) & (np.abs(y) <= half)
    t = np.where(hit, t, np.inf)
    return t, color_fn(x, y)


def _checker(checks, half=1.0):
    def fn(x, y):
        i = np.floor((x + half) / (2 * half) * checks)
        j = np.floor((y + half) / (2 * half) * checks)
        odd = ((i + j) % 2).astype(bool)[:, None]
        return np.where(odd, CHECK_B, CHECK_A)
    return fn


def _solid(rgb):
    rgb = np.asarray(rgb, dtype=np.float64)
    return lambda x, y: np.broadcast_to(rgb, (x.shape[0], 3))


def _sphere_color(p, r=1.0):
    lat = np.arcsin(np.clip(p[:, 2] / r, -1, 1))
    lon = np.arctan2(p[:, 1], p[:, 0])
    band = np.floor(lat / (np.pi / 8)).astype(int) % 2
    stripe = np.floor(lon / (np.pi / 6)).astype(int) % 2
    rgb = np.where(((band + stripe) % 2).astype(bool)[:, None], CHECK_B, CHECK_A)
    polar = np.abs(p[:, 2]) > 0.92 * r
    return np.where(polar[:, None], np.array([0.85, 0.15, 0.15]), rgb)


def _sphere_hit(o, d, r=1.0):
    b = d @ o
    c = o @ o - r * r
    disc = b * b - c
    t = -b - np.sqrt(np.maximum(disc, 0))
    hit = (disc >= 0) & (t > 0)
    p = o + np.where(hit, t, 0)[:, None] * d
    return np.where(hit, t, np.inf), _sphere_color(p, r)


def _surfaces(spec: ToySpec):
    if spec.name == "checkerboard-quad":
        return [lambda o, d: _quad_hit(o, d, 0.0, 1.0, _checker(spec.checks))]
    if spec.name == "two-quads-occlusion":
        return [
            lambda o, d: _quad_hit(o, d, 0.0, 1.0, _checker(spec.checks)),
            lambda o, d: _quad_hit(o, d, 0.5, 0.5, _solid((0.2, 0.8, 0.3))),
        ]
    if spec.name == "textured-sphere-poles":
        return [_sphere_hit]
    raise ValueError(f"unknown toy generator {spec.name!r}; choose from {sorted(TOY_GENERATORS)}")


def _surface_points(spec: ToySpec, rng):
    n = spec.n_points
    if spec.name == "textured-sphere-poles":
        v = rng.standard_normal((n, 3))
        p = v / np.linalg.norm(v, axis=1, keepdims=True)
        return p, _sphere_color(p)
    xy = rng.uniform(-1, 1, (n, 2))
    pts = np.column_stack([xy, np.zeros(n)])
    rgb = _checker(spec.checks)(xy[:, 0], xy[:, 1])
    if spec.name == "two-quads-occlusion":
        front = rng.uniform(-0.5, 0.5, (n // 4, 2))
        pts = np.vstack([pts, np.column_stack([front, np.full(len(front), 0.5)])])
        rgb = np.vstack([rgb, np.tile([0.2, 0.8, 0.3], (len(front), 1))])
    return pts, rgb


# ---- cameras -----------------------------------------------------------

def _poses(spec: ToySpec, split: str, rng):
    n = spec.n_views if split == "train" else spec.n_test
    phase = 0.0 if split == "train" else 0.5
    az = 2 * np.pi * (np.arange(n) + phase) / max(n, 1) + rng.uniform(-0.05, 0.05, n)
    if spec.name == "textured-sphere-poles":
        el = np.where(np.arange(n) % 2 == 0, 0.9, -0.9) * (0.7 + 0.2 * (np.arange(n) % 3) / 2)
    else:
        el = np.deg2rad(40.0 + 25.0 * ((np.arange(n) + (1 if split == "test" else 0)) % 3) / 2)
    eyes = spec.radius * np.column_stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    if spec.name == "two-quads-occlusion" and split == "train":
        eyes[0] = (0.0, 0.0, spec.radius)  # head-on view
    return [look_at(e, (0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) for e in eyes]


def _cast(spec: ToySpec, cam: Camera, surfaces, bg):
    """Box-filtered analytic render: ``supersample``^2 rays per pixel."""
    s = spec.supersample
    off = (np.arange(s) + 0.5) / s
    ys, xs = np.mgrid[0:cam.height, 0:cam.width]
    shape = (cam.height, cam.width, s, s)
    px = np.broadcast_to(xs[..., None, None] + off[None, None, None, :], shape).reshape(-1)
    py = np.broadcast_to(ys[..., None, None] + off[None, None, :, None], shape).reshape(-1)
    local = np.stack([(px - cam.cx) / cam.fx, (py - cam.cy) / cam.fy, np.ones_like(px)], axis=1)
    R = cam.world_to_cam[:3, :3]
    d = local @ R
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = -R.T @ cam.world_to_cam[:3, 3]
    best_t = np.full(d.shape[0], np.inf)
    rgb = np.broadcast_to(bg, d.shape).copy()
    for surf in surfaces:
        t, c = surf(o, d)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        rgb[closer] = c[closer]
    return rgb.reshape(cam.height, cam.width, s * s, 3).mean(axis=2).astype(np.float32)


def make_toy_scene(spec="checkerboard-quad", split: str = "train", **overrides) -> Dataset:
    """Dataset for one split of a named toy scene. ``spec`` is a generator
    name or a :class:`ToySpec`; keyword overrides replace spec fields."""
    if isinstance(spec, str):
        spec = ToySpec(name=spec)
    spec = replace(spec, **overrides)
    if split not in ("train", "test"):
        raise ValueError(f"unknown split {split!r}")
    surfaces = _surfaces(spec)
    bg = parse_background(spec.background)
    rng = _rng(spec.seed, f"toy/{spec.name}/{split}")
    f = 0.5 * spec.width / math.tan(0.5 * math.radians(spec.fov_deg))
    cams = [Camera(spec.width, spec.height, f, f, spec.width / 2, spec.height / 2, w2c) for w2c in _poses(spec, split, rng)]
    images = [_cast(spec, cam, surfaces, bg) for cam in cams]
    pts, cols = _surface_points(spec, _rng(spec.seed, f"toy/{spec.name}/points"))
    meta = {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(spec).items()}
    meta["split"] = split
    return Dataset(
        cameras=cams,
        images=images,
        names=[f"{split}_{i:03d}" for i in range(len(cams))],
        background=bg,
        width=spec.width,
        height=spec.height,
        points=pts,
        colors=cols,
        meta=meta,
    )


TOY_GENERATORS = ("checkerboard-quad", "two-quads-occlusion", "textured-sphere-poles")
