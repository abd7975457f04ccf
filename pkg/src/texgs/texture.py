"""Per-Gaussian texture maps: variants, bilinear lookup and its adjoint,
initialization, texel budgets and the TGTX blob format."""

from __future__ import annotations

import enum
import logging
import math
import struct
from dataclasses import dataclass

import numpy as np

from texgs.geometry import sigmoid

log = logging.getLogger(__name__)

RGB_INIT = 25.0 / 255.0
ALPHA_LOGIT_INIT = 10.0

TGTX_MAGIC = b"TGTX"
TGTX_VERSION = 1
_TGTX_HEADER = struct.Struct("<4sIIII")


class TextureVariant(enum.Enum):
    NONE = "none"
    ALPHA = "alpha"
    RGB = "rgb"
    RGBA = "rgba"

    @property
    def channels(self) -> int:
        return {"none": 0, "alpha": 1, "rgb": 3, "rgba": 4}[self.value]

    @property
    def has_rgb(self) -> bool:
        return self in (TextureVariant.RGB, TextureVariant.RGBA)

    @property
    def has_alpha(self) -> bool:
        return self in (TextureVariant.ALPHA, TextureVariant.RGBA)

    @property
    def alpha_channel(self):
        if self is TextureVariant.ALPHA:
            return 0
        if self is TextureVariant.RGBA:
            return 3
        return None

    @classmethod
    def parse(cls, value) -> "TextureVariant":
        if isinstance(value, cls):
            return value
        return cls(str(value).lower())


@dataclass
class TextureMap:
    """One Gaussian's T x T x K texel grid, indexed ``texels[u, v, k]``.

    RGB channels hold an additive colour residual, the alpha channel a logit.
    """

    variant: TextureVariant
    texels: np.ndarray

    @property
    def resolution(self) -> int:
        return self.texels.shape[0]

    def __post_init__(self):
        K = self.variant.channels
        if K == 0:
            raise ValueError("variant none carries no texture")
        t = self.texels
        if t.ndim != 3 or t.shape[0] != t.shape[1] or t.shape[2] != K:
            raise ValueError(f"texel array must be T x T x {K}, got {t.shape}")


def init_texels(n: int, T: int, variant: TextureVariant, dtype=np.float32) -> np.ndarray:
    if T < 1:
        raise ValueError("texture resolution must be >= 1")
    K = variant.channels
    tex = np.full((n, T, T, K), RGB_INIT, dtype=dtype)
    if variant.alpha_channel is not None:
        tex[..., variant.alpha_channel] = ALPHA_LOGIT_INIT
    return tex


def create_texture(T: int, variant: TextureVariant) -> TextureMap:
    variant = TextureVariant.parse(variant)
    if variant is TextureVariant.NONE:
        raise ValueError("variant none carries no texture")
    return TextureMap(variant, init_texels(1, T, variant, dtype=np.float64)[0])


def bilinear_setup(u, v, T: int):
    """Clamp (u, v) to the texel lattice and return corner indices, fractional
    weights, and masks marking coordinates that were clamped."""
    u = np.asarray(u)
    v = np.asarray(v)
    hi = T - 1
    uc = np.clip(u, 0, hi)
    vc = np.clip(v, 0, hi)
    i0 = np.minimum(np.floor(uc), max(hi - 1, 0)).astype(np.intp)
    j0 = np.minimum(np.floor(vc), max(hi - 1, 0)).astype(np.intp)
    fu = uc - i0
    fv = vc - j0
    i1 = np.minimum(i0 + 1, hi)
    j1 = np.minimum(j0 + 1, hi)
    u_free = (u > 0) & (u < hi)
    v_free = (v > 0) & (v < hi)
    return i0, i1, j0, j1, fu, fv, u_free, v_free


def activate(texels: np.ndarray, variant: TextureVariant) -> np.ndarray:
    """Texel values as sampled: alpha logits squashed, RGB untouched."""
    ac = variant.alpha_channel
    if ac is None:
        return texels
    out = texels.copy()
    out[..., ac] = sigmoid(texels[..., ac])
    return out


def lookup(values: np.ndarray, u, v) -> np.ndarray:
    T = values.shape[0]
    i0, i1, j0, j1, fu, fv, _, _ = bilinear_setup(u, v, T)
    fu = fu[..., None]
    fv = fv[..., None]
    return (
        values[i0, j0] * (1 - fu) * (1 - fv)
        + values[i1, j0] * fu * (1 - fv)
        + values[i0, j1] * (1 - fu) * fv
        + values[i1, j1] * fu * fv
    )


def split_channels(sampled, variant: TextureVariant):
    """Map sampled channels to ``(c_tex, alpha_tex)``, filling neutral values
    for channels the variant lacks."""
    shape = sampled.shape[:-1]
    if variant.has_rgb:
        c = sampled[..., :3]
    else:
        c = np.zeros(shape + (3,), dtype=sampled.dtype)
    ac = variant.alpha_channel
    if ac is not None:
        a = sampled[..., ac]
    else:
        a = np.ones(shape, dtype=sampled.dtype)
    return c, a


def sample_bilinear(tex: TextureMap, u, v):
    """Returns ``(c_tex, alpha_tex)`` at texture coordinates (u, v).

    Each texel's alpha is squashed before blending, so the result stays in
    (0, 1].
    """
    return split_channels(lookup(activate(tex.texels, tex.variant), u, v), tex.variant)


def sample_bilinear_grad(tex: TextureMap, u: float, v: float, upstream):
    """Adjoint of :func:`sample_bilinear` for one lookup.

    ``upstream`` is dL/d(sampled channel), length K. Returns the gradient on the
    texel *values* (alpha already squashed; use :func:`alpha_logit_grad` to
    reach the stored logits) and ``(du, dv)``. Positional gradients vanish
    along a clamped axis.
    """
    g = np.asarray(upstream, dtype=np.float64).reshape(-1)
    values = activate(tex.texels, tex.variant)
    T = values.shape[0]
    i0, i1, j0, j1, fu, fv, u_free, v_free = bilinear_setup(u, v, T)
    grad = np.zeros(values.shape, dtype=np.float64)
    for (i, j, w) in (
        (i0, j0, (1 - fu) * (1 - fv)),
        (i1, j0, fu * (1 - fv)),
        (i0, j1, (1 - fu) * fv),
        (i1, j1, fu * fv),
    ):
        grad[i, j] += w * g
    t00, t10, t01, t11 = values[i0, j0], values[i1, j0], values[i0, j1], values[i1, j1]
    du = ((t10 - t00) * (1 - fv) + (t11 - t01) * fv) @ g if (u_free and T > 1) else 0.0
    dv = ((t01 - t00) * (1 - fu) + (t11 - t10) * fu) @ g if (v_free and T > 1) else 0.0
    return grad, (float(du), float(dv))


def alpha_logit_grad(value_grad: np.ndarray, texels: np.ndarray, variant: TextureVariant) -> np.ndarray:
    """Chain a texel-value gradient through the alpha squashing."""
    ac = variant.alpha_channel
    if ac is None:
        return value_grad
    out = value_grad.copy()
    a = sigmoid(texels[..., ac])
    out[..., ac] *= a * (1 - a)
    return out


def texel_budget_alloc(n_gaussians: int, total_texels: int, K: int | None = None) -> int:
    """Shared per-Gaussian resolution for a fixed texel budget.

    ``K`` is accepted for symmetry with the storage layout; the budget counts
    texels, not channels.
    """
    if n_gaussians < 1:
        raise ValueError("need at least one Gaussian")
    if total_texels < n_gaussians:
        log.warning("texel budget %d below Gaussian count %d; using T=1", total_texels, n_gaussians)
        return 1
    T = max(1, math.isqrt(total_texels // n_gaussians))
    while T > 1 and n_gaussians * T * T > total_texels:
        T -= 1
    return T


# --------------------------------------------------------------------------
# TGTX sidecar


def write_tgtx(path, texels: np.ndarray) -> None:
    texels = np.asarray(texels)
    n, T, T2, K = texels.shape
    if T != T2:
        raise ValueError("texture maps must be square")
    with open(path, "wb") as f:
        f.write(_TGTX_HEADER.pack(TGTX_MAGIC, TGTX_VERSION, n, T, K))
        f.write(np.ascontiguousarray(texels, dtype="<f4").tobytes())


def read_tgtx(path) -> np.ndarray:
    with open(path, "rb") as f:
        head = f.read(_TGTX_HEADER.size)
        if len(head) < _TGTX_HEADER.size:
            raise ValueError(f"{path}: truncated TGTX header")
        magic, version, n, T, K = _TGTX_HEADER.unpack(head)
        if magic != TGTX_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != TGTX_VERSION:
            raise ValueError(f"{path}: unsupported TGTX version {version}")
        body = f.read()
    expected = n * T * T * K * 4
    if len(body) != expected:
        raise ValueError(f"{path}: truncated TGTX payload ({len(body)} of {expected} bytes)")
    return np.frombuffer(body, dtype="<f4").reshape(n, T, T, K).astype(np.float32)
