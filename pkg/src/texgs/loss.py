"""Weighted L1 + D-SSIM photometric loss with its image gradient."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from texgs.metrics import ssim_map


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.8

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")


def photometric_loss(render, gt, w: LossWeights = LossWeights()):
    """Returns ``(loss, dloss/drender)`` for
    ``lam * L1 + (1 - lam) * (1 - SSIM)``."""
    r = np.asarray(render, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if r.shape != g.shape:
        raise ValueError(f"shape mismatch: {r.shape} vs {g.shape}")
    diff = r - g
    l1 = float(np.mean(np.abs(diff)))
    grad = w.lam * np.sign(diff) / diff.size
    loss = w.lam * l1
    if w.lam < 1.0:
        S, back = ssim_map(r, g, return_grad=True)
        loss += (1.0 - w.lam) * (1.0 - float(S.mean()))
        gS = np.full(S.shape, -(1.0 - w.lam) / S.size)
        grad = grad + back(gS).reshape(r.shape)
    return loss, grad
