"""Gaussian primitive math: rotations, covariances, exact evaluation,
ray/plane intersection, UV mapping and spherical harmonics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

SCALE_FLOOR = 1e-7
EPS_PARALLEL = 1e-8

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def num_sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


@dataclass
class Gaussian:
    """A single primitive. The renderer works on the batched arrays held by
    :class:`texgs.scene.Scene`; this type is the scalar view of one row."""

    mu: np.ndarray
    quat: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    sh: np.ndarray = field(default_factory=lambda: np.zeros((1, 3)))
    tex_id: Optional[int] = None

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.quat = np.asarray(self.quat, dtype=np.float64)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64)
        self.sh = np.asarray(self.sh, dtype=np.float64).reshape(-1, 3)
        self.opacity_logit = float(self.opacity_logit)

    @property
    def scales(self) -> np.ndarray:
        return np.maximum(np.exp(self.log_scale), SCALE_FLOOR)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_rotation(self.quat)

    @property
    def covariance(self) -> np.ndarray:
        return build_covariance(self.rotation, self.scales)


@dataclass(frozen=True)
class IntersectionFrame:
    n: np.ndarray
    r1: np.ndarray
    r2: np.ndarray
    s1: float
    s2: float


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    dir: np.ndarray

    @classmethod
    def through(cls, origin, target) -> "Ray":
        origin = np.asarray(origin, dtype=np.float64)
        d = np.asarray(target, dtype=np.float64) - origin
        return cls(origin, d / np.linalg.norm(d))


# --------------------------------------------------------------------------
# rotations / covariance


def quat_to_rotation(quat) -> np.ndarray:
    """Rotation matrix of a (w, x, y, z) quaternion. Works on (..., 4)."""
    q = np.asarray(quat)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("degenerate rotation: zero-norm quaternion")
    q = q / norm
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotation_grad_to_quat(quat, dR) -> np.ndarray:
    """Backpropagate dL/dR (..., 3, 3) to the raw (unnormalized) quaternion."""
    q = np.asarray(quat)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    g = dR
    dw = 2 * (
        -z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
        - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1]
    )
    dx = 2 * (
        y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0]
        - 2 * x * g[..., 1, 1] - w * g[..., 1, 2]
        + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2]
    )
    dy = 2 * (
        -2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2]
        + x * g[..., 1, 0] + z * g[..., 1, 2]
        - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2]
    )
    dz = 2 * (
        -2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2]
        + w * g[..., 1, 0] - 2 * z * g[..., 1, 1] + y * g[..., 1, 2]
        + x * g[..., 2, 0] + y * g[..., 2, 1]
    )
    dqn = np.stack([dw, dx, dy, dz], axis=-1)
    # through q / |q|
    return (dqn - qn * np.sum(dqn * qn, axis=-1, keepdims=True)) / norm


def build_covariance(R, scales) -> np.ndarray:
    R = np.asarray(R)
    s = np.asarray(scales)
    if np.any(s <= 0):
        raise ValueError("scales must be positive")
    M = R * s[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def eval_gaussian(g: Gaussian, x) -> float:
    d = np.asarray(x, dtype=np.float64) - g.mu
    local = g.rotation.T @ d / g.scales
    return float(np.exp(-0.5 * local @ local))


# --------------------------------------------------------------------------
# intersection plane / uv


def frame_order(scales) -> np.ndarray:
    """Axis permutation (r1, r2, n): descending scale, ties by axis index."""
    s = np.asarray(scales)
    return np.argsort(-s, axis=-1, kind="stable")


def intersection_frame(g: Gaussian) -> IntersectionFrame:
    s = g.scales
    R = g.rotation
    i1, i2, i3 = frame_order(s)
    return IntersectionFrame(n=R[:, i3], r1=R[:, i1], r2=R[:, i2], s1=float(s[i1]), s2=float(s[i2]))


def intersect_ray_plane(ray: Ray, frame: IntersectionFrame, mu) -> Optional[np.ndarray]:
    denom = float(ray.dir @ frame.n)
    if abs(denom) < EPS_PARALLEL:
        return None
    t = float((np.asarray(mu) - ray.origin) @ frame.n) / denom
    if t <= 0:
        return None
    return ray.origin + t * ray.dir


def uv_map(x, mu, frame: IntersectionFrame, m: float, T: int):
    rel = np.asarray(x, dtype=np.float64) - np.asarray(mu, dtype=np.float64)
    a = rel @ frame.r1
    b = rel @ frame.r2
    u = (m * frame.s1 + a) / (2 * m * frame.s1) * (T - 1)
    v = (m * frame.s2 + b) / (2 * m * frame.s2) * (T - 1)
    in_range = bool(abs(a) <= m * frame.s1 and abs(b) <= m * frame.s2)
    return float(u), float(v), in_range


# --------------------------------------------------------------------------
# spherical harmonics


def sh_basis(dirs, degree: int) -> np.ndarray:
    """Real SH basis values, shape (..., (degree+1)**2)."""
    d = np.asarray(dirs)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = [np.full_like(x, SH_C0)]
    if degree >= 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2 * zz - xx - yy),
            SH_C2[3] * x * z,
            SH_C2[4] * (xx - yy),
        ]
    if degree >= 3:
        out += [
            SH_C3[0] * y * (3 * xx - yy),
            SH_C3[1] * x * y * z,
            SH_C3[2] * y * (4 * zz - xx - yy),
            SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            SH_C3[4] * x * (4 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3 * yy),
        ]
    return np.stack(out, axis=-1)


def sh_basis_jacobian(dirs, degree: int) -> np.ndarray:
    """d basis / d(x, y, z) treating the components as free; shape (..., K, 3)."""
    d = np.asarray(dirs)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    zero = np.zeros_like(x)
    rows = [(zero, zero, zero)]
    if degree >= 1:
        c = SH_C1
        rows += [(zero, -c + zero, zero), (zero, zero, c + zero), (-c + zero, zero, zero)]
    if degree >= 2:
        c = SH_C2
        rows += [
            (c[0] * y, c[0] * x, zero),
            (zero, c[1] * z, c[1] * y),
            (-2 * c[2] * x, -2 * c[2] * y, 4 * c[2] * z),
            (c[3] * z, zero, c[3] * x),
            (2 * c[4] * x, -2 * c[4] * y, zero),
        ]
    if degree >= 3:
        c = SH_C3
        xx, yy, zz = x * x, y * y, z * z
        rows += [
            (c[0] * 6 * x * y, c[0] * (3 * xx - 3 * yy), zero),
            (c[1] * y * z, c[1] * x * z, c[1] * x * y),
            (-2 * c[2] * x * y, c[2] * (4 * zz - xx - 3 * yy), 8 * c[2] * y * z),
            (-6 * c[3] * x * z, -6 * c[3] * y * z, c[3] * (6 * zz - 3 * xx - 3 * yy)),
            (c[4] * (4 * zz - 3 * xx - yy), -2 * c[4] * x * y, 8 * c[4] * x * z),
            (2 * c[5] * x * z, -2 * c[5] * y * z, c[5] * (xx - yy)),
            (c[6] * (3 * xx - 3 * yy), -6 * c[6] * x * y, zero),
        ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def eval_sh(coeffs, dir, degree: int) -> np.ndarray:
    """View-dependent RGB: SH expansion + 0.5, clamped at zero."""
    coeffs = np.asarray(coeffs).reshape(-1, 3)
    k = num_sh_coeffs(degree)
    if coeffs.shape[0] < k:
        raise ValueError(f"need {k} SH coefficients for degree {degree}, got {coeffs.shape[0]}")
    basis = sh_basis(np.asarray(dir, dtype=coeffs.dtype), degree)
    return np.maximum(basis @ coeffs[:k] + 0.5, 0.0)


# --------------------------------------------------------------------------


def effective_rank(scales) -> float:
    s = np.asarray(scales, dtype=np.float64)
    if np.any(s <= 0):
        raise ValueError("scales must be positive")
    p = s / s.sum(axis=-1, keepdims=True)
    return np.exp(-np.sum(p * np.log(p), axis=-1))
