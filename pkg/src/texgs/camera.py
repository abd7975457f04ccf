"""Pinhole cameras (OpenCV axes: x right, y down, z forward)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from texgs.geometry import Ray

# NeRF/OpenGL camera axes (y up, looking down -z) to OpenCV axes
_GL_TO_CV = np.diag([1.0, -1.0, -1.0, 1.0])


@dataclass(frozen=True)
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_cam: np.ndarray  # 4x4 rigid transform

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        object.__setattr__(self, "world_to_cam", np.asarray(self.world_to_cam, dtype=np.float64))

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_cam[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_cam[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @classmethod
    def from_fov(cls, width, height, fov_x, world_to_cam) -> "Camera":
        f = 0.5 * width / np.tan(0.5 * fov_x)
        return cls(width, height, f, f, width / 2.0, height / 2.0, world_to_cam)

    @classmethod
    def from_c2w_gl(cls, width, height, fx, fy, cx, cy, c2w) -> "Camera":
        """Build from a NeRF-style (OpenGL axes) camera-to-world matrix."""
        c2w = np.asarray(c2w, dtype=np.float64) @ _GL_TO_CV
        return cls(width, height, fx, fy, cx, cy, np.linalg.inv(c2w))

    def c2w_gl(self) -> np.ndarray:
        return np.linalg.inv(self.world_to_cam) @ _GL_TO_CV


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera matrix for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    W = np.eye(4)
    W[:3, :3] = R
    W[:3, 3] = -R @ eye
    return W


def pixel_dirs(cam: Camera, xs, ys, dtype=np.float64) -> np.ndarray:
    """Unit world-space directions through pixel centres ``(xs+0.5, ys+0.5)``."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    d = np.stack(
        [(xs + 0.5 - cam.cx) / cam.fx, (ys + 0.5 - cam.cy) / cam.fy, np.ones_like(xs)],
        axis=-1,
    )
    d = d @ cam.rotation  # == (R^T d^T)^T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return d.astype(dtype)


def pixel_ray(cam: Camera, px) -> Ray:
    i, j = px
    if not (0 <= i < cam.width and 0 <= j < cam.height):
        raise ValueError(f"pixel {px} outside {cam.width}x{cam.height} image")
    return Ray(cam.center, pixel_dirs(cam, i, j))
