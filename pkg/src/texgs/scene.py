"""Batched scene storage (structure of arrays) and the matching gradient buffer."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np

from texgs.geometry import Gaussian, num_sh_coeffs
from texgs.texture import TextureMap, TextureVariant, init_texels

PARAM_NAMES = ("means", "quats", "log_scales", "opacity_logits", "sh", "textures")


@dataclass
class Scene:
    means: np.ndarray           # (N, 3)
    quats: np.ndarray           # (N, 4) w, x, y, z
    log_scales: np.ndarray      # (N, 3)
    opacity_logits: np.ndarray  # (N,)
    sh: np.ndarray              # (N, (max_sh_degree+1)**2, 3)
    variant: TextureVariant = TextureVariant.NONE
    textures: Optional[np.ndarray] = None  # (N, T, T, K)
    m: float = 3.0
    sh_degree: int = 0          # active degree used for shading
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.variant = TextureVariant.parse(self.variant)
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        n = self.means.shape[0]
        for name in ("quats", "log_scales", "opacity_logits", "sh"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"{name} has {getattr(self, name).shape[0]} rows, expected {n}")
        if self.variant is TextureVariant.NONE:
            if self.textures is not None:
                raise ValueError("variant none must not carry textures")
        else:
            if self.textures is None:
                raise ValueError(f"variant {self.variant.value} needs textures")
            t = self.textures
            if t.shape[0] != n or t.ndim != 4 or t.shape[1] != t.shape[2] or t.shape[3] != self.variant.channels:
                raise ValueError(f"texture array shape {t.shape} inconsistent with {n} Gaussians / {self.variant.value}")
        if num_sh_coeffs(self.sh_degree) > self.sh.shape[1]:
            raise ValueError("active SH degree exceeds stored coefficients")

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def max_sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh.shape[1]))) - 1

    @property
    def tex_res(self) -> int:
        return 0 if self.textures is None else self.textures.shape[1]

    @property
    def dtype(self):
        return self.means.dtype

    def params(self) -> dict:
        out = {name: getattr(self, name) for name in PARAM_NAMES}
        if out["textures"] is None:
            del out["textures"]
        return out

    def copy(self) -> "Scene":
        kw = {name: (None if getattr(self, name) is None else getattr(self, name).copy()) for name in PARAM_NAMES}
        return replace(self, background=self.background.copy(), **kw)

    def astype(self, dtype) -> "Scene":
        kw = {name: (None if getattr(self, name) is None else getattr(self, name).astype(dtype)) for name in PARAM_NAMES}
        return replace(self, background=self.background.copy(), **kw)

    def subset(self, idx) -> "Scene":
        idx = np.asarray(idx)
        kw = {name: (None if getattr(self, name) is None else getattr(self, name)[idx].copy()) for name in PARAM_NAMES}
        return replace(self, background=self.background.copy(), **kw)

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(
            mu=self.means[i],
            quat=self.quats[i],
            log_scale=self.log_scales[i],
            opacity_logit=float(self.opacity_logits[i]),
            sh=self.sh[i],
            tex_id=None if self.textures is None else i,
        )

    def texture(self, i: int) -> Optional[TextureMap]:
        if self.textures is None:
            return None
        return TextureMap(self.variant, self.textures[i])

    def with_textures(self, variant, T: int) -> "Scene":
        """Copy of the scene carrying freshly initialized textures."""
        variant = TextureVariant.parse(variant)
        out = self.copy()
        out.variant = variant
        out.textures = None if variant is TextureVariant.NONE else init_texels(len(self), T, variant, self.dtype)
        return out

    @classmethod
    def empty(cls, max_sh_degree: int = 0, dtype=np.float32, **kw) -> "Scene":
        k = num_sh_coeffs(max_sh_degree)
        return cls(
            means=np.zeros((0, 3), dtype),
            quats=np.zeros((0, 4), dtype),
            log_scales=np.zeros((0, 3), dtype),
            opacity_logits=np.zeros((0,), dtype),
            sh=np.zeros((0, k, 3), dtype),
            **kw,
        )


def concat(a: Scene, b: Scene) -> Scene:
    kw = {}
    for name in PARAM_NAMES:
        x, y = getattr(a, name), getattr(b, name)
        kw[name] = None if x is None else np.concatenate([x, y], axis=0)
    return replace(a, background=a.background.copy(), **kw)


@dataclass
class GradientBuffer:
    """Per-parameter gradients mirroring :class:`Scene`, plus the per-Gaussian
    screen-space statistics consumed by densification."""

    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    textures: Optional[np.ndarray]
    # sum over pixels of |per-pixel screen-space positional gradient|
    screen_sum_of_norms: np.ndarray
    # |sum over pixels of the same gradient|
    screen_norm_of_sum: np.ndarray
    visible: np.ndarray

    @classmethod
    def zeros_like(cls, scene: Scene, dtype=np.float64) -> "GradientBuffer":
        n = len(scene)
        return cls(
            means=np.zeros(scene.means.shape, dtype),
            quats=np.zeros(scene.quats.shape, dtype),
            log_scales=np.zeros(scene.log_scales.shape, dtype),
            opacity_logits=np.zeros(scene.opacity_logits.shape, dtype),
            sh=np.zeros(scene.sh.shape, dtype),
            textures=None if scene.textures is None else np.zeros(scene.textures.shape, dtype),
            screen_sum_of_norms=np.zeros(n, dtype),
            screen_norm_of_sum=np.zeros(n, dtype),
            visible=np.zeros(n, bool),
        )

    def params(self) -> dict:
        out = {name: getattr(self, name) for name in PARAM_NAMES}
        if out["textures"] is None:
            del out["textures"]
        return out

    def all_arrays(self):
        return [getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None]
