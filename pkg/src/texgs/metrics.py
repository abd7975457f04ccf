"""PSNR and SSIM. The SSIM code here also backs the training loss."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - size // 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


def _filter_valid(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation over the two leading image axes of
    ``x`` with shape (..., H, W, C)."""
    k = w.size
    H, W = x.shape[-3], x.shape[-2]
    rows = sum(w[i] * x[..., i:i + H - k + 1, :, :] for i in range(k))
    return sum(w[i] * rows[..., :, i:i + W - k + 1, :] for i in range(k))


def _filter_adjoint(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    k = w.size
    pad = [(0, 0)] * (g.ndim - 3) + [(k - 1, k - 1), (k - 1, k - 1), (0, 0)]
    gp = np.pad(g, pad)
    H, W = g.shape[-3] + k - 1, g.shape[-2] + k - 1
    wf = w[::-1]
    rows = sum(wf[i] * gp[..., i:i + H, :, :] for i in range(k))
    return sum(wf[i] * rows[..., :, i:i + W, :] for i in range(k))


def _as_hwc(x):
    return x[..., None] if x.ndim == 2 else x


def ssim_map(a, b, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, return_grad: bool = False):
    """Local SSIM over every fully-covered window position, per channel.

    With ``return_grad`` also returns a function mapping dL/d(map) to dL/da.
    """
    a, b = _check_pair(a, b)
    a, b = _as_hwc(a), _as_hwc(b)
    if min(a.shape[0], a.shape[1]) < window:
        raise ValueError(f"image {a.shape[:2]} smaller than the {window}x{window} SSIM window")
    w = gaussian_window(window, sigma)
    stats = _filter_valid(np.stack([a, b, a * a, b * b, a * b]), w)
    mx, my, exx, eyy, exy = stats
    A1 = 2 * mx * my + C1
    A2 = 2 * (exy - mx * my) + C2
    B1 = mx * mx + my * my + C1
    B2 = (exx - mx * mx) + (eyy - my * my) + C2
    S = (A1 * A2) / (B1 * B2)
    if not return_grad:
        return S

    def backward(gS):
        den = B1 * B2
        d_mx = 2 * (my * (A2 - A1) - S * mx * (B2 - B1)) / den
        d_exx = -S / B2
        d_exy = 2 * A1 / den
        back = _filter_adjoint(np.stack([gS * d_mx, gS * d_exx, gS * d_exy]), w)
        return back[0] + 2 * a * back[1] + b * back[2]

    return S, backward


def ssim(a, b) -> float:
    return float(np.mean(ssim_map(a, b)))


@dataclass
class MetricReport:
    names: list = field(default_factory=list)
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    n_gaussians: int = 0
    texel_count: int = 0
    bytes: int = 0

    def add(self, name, rendered, gt):
        self.names.append(name)
        self.psnr.append(psnr(rendered, gt))
        self.ssim.append(ssim(rendered, gt))

    def summary(self) -> dict:
        return {
            "n_images": len(self.names),
            "psnr_mean": float(np.mean(self.psnr)) if self.psnr else None,
            "ssim_mean": float(np.mean(self.ssim)) if self.ssim else None,
            "n_gaussians": self.n_gaussians,
            "texel_count": self.texel_count,
            "bytes": self.bytes,
        }

    def rows(self):
        return list(zip(self.names, self.psnr, self.ssim))


def model_bytes(scene) -> int:
    """Float32 storage estimate: Gaussian attributes plus texels."""
    per = 3 + 4 + 3 + 1 + scene.sh.shape[1] * 3
    texels = 0 if scene.textures is None else scene.textures.size
    return 4 * (len(scene) * per + texels)
