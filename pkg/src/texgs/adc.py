"""Adaptive density control: clone / split / prune driven by a
sum-of-magnitudes screen-gradient score, plus importance pruning."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from texgs.geometry import logit, quat_to_rotation, sigmoid
from texgs.scene import GradientBuffer, Scene

# rounding slack when asserting sum-of-norms >= norm-of-sum
_TRI_RTOL = 1e-9


@dataclass
class AdcConfig:
    tau: float = 1e-3
    interval: int = 100
    start: int = 500
    until: int = 15000
    opacity_reset_interval: int = 3000
    prune_opacity: float = 0.005
    split_factor: float = 1.6
    split_children: int = 2
    percent_dense: float = 0.01
    max_gaussians: Optional[int] = None


@dataclass
class AdcState:
    """Per-Gaussian accumulators. ``score`` is the sum over views and pixels
    of per-pixel gradient magnitudes; ``score_sum_first`` is the classic
    statistic (per view, magnitude of the pixel sum), kept for comparison."""

    score: np.ndarray
    score_sum_first: np.ndarray
    count: np.ndarray
    check_triangle: bool = True

    @classmethod
    def zeros(cls, n: int, **kw) -> "AdcState":
        return cls(np.zeros(n), np.zeros(n), np.zeros(n, dtype=np.int64), **kw)

    def __len__(self):
        return self.score.shape[0]

    def mean_scores(self):
        c = np.maximum(self.count, 1)
        return self.score / c, self.score_sum_first / c

    def reset(self, n: Optional[int] = None):
        n = len(self) if n is None else n
        self.score = np.zeros(n)
        self.score_sum_first = np.zeros(n)
        self.count = np.zeros(n, dtype=np.int64)


def _pixel_stats(per_gaussian_pixel_grads):
    """(sum of norms, norm of sum, visible) from a list holding one (P_i, 2)
    array of per-pixel screen gradients per Gaussian."""
    n = len(per_gaussian_pixel_grads)
    son, nos, vis = np.zeros(n), np.zeros(n), np.zeros(n, bool)
    for i, g in enumerate(per_gaussian_pixel_grads):
        g = np.asarray(g, dtype=np.float64).reshape(-1, 2)
        if g.shape[0] == 0:
            continue
        son[i] = np.sum(np.hypot(g[:, 0], g[:, 1]))
        s = g.sum(axis=0)
        nos[i] = np.hypot(s[0], s[1])
        vis[i] = True
    return son, nos, vis


def densify_score_update(adc: AdcState, per_gaussian_pixel_grads) -> AdcState:
    """Accumulate one view's statistics. Accepts a :class:`GradientBuffer`
    or a per-Gaussian list of per-pixel (dx, dy) gradients."""
    if isinstance(per_gaussian_pixel_grads, GradientBuffer):
        gb = per_gaussian_pixel_grads
        son, nos, vis = gb.screen_sum_of_norms, gb.screen_norm_of_sum, gb.visible
    else:
        son, nos, vis = _pixel_stats(per_gaussian_pixel_grads)
    if len(son) != len(adc):
        raise ValueError(f"{len(son)} Gaussians in gradients, {len(adc)} in ADC state")
    if adc.check_triangle:
        bad = son < nos * (1 - _TRI_RTOL)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise AssertionError(f"sum-of-norms {son[i]} < norm-of-sum {nos[i]} for Gaussian {i}")
    adc.score = adc.score + np.where(vis, son, 0.0)
    adc.score_sum_first = adc.score_sum_first + np.where(vis, nos, 0.0)
    adc.count = adc.count + vis
    return adc


def _sample_in(scene: Scene, idx, rng, n_per: int):
    """Offsets drawn from each selected Gaussian's own distribution."""
    R = quat_to_rotation(scene.quats[idx].astype(np.float64))
    s = np.exp(scene.log_scales[idx].astype(np.float64))
    z = rng.standard_normal((n_per, len(idx), 3))
    return np.einsum("nij,knj->kni", R, z * s)


def _grow(scene: Scene, rows: dict) -> Scene:
    out = scene.copy()
    for name, arr in rows.items():
        cur = getattr(out, name)
        if cur is None:
            continue
        setattr(out, name, np.concatenate([cur, arr.astype(cur.dtype)], axis=0))
    return out


def densify(scene: Scene, adc: AdcState, cfg: AdcConfig, extent: float, rng):
    """Clone and split. Returns ``(scene, src)`` where ``src[i]`` is the old
    row that new row ``i`` inherits optimizer state from (-1 for new rows)."""
    n = len(scene)
    score, _ = adc.mean_scores()
    hot = score >= cfg.tau
    big = np.exp(scene.log_scales.astype(np.float64)).max(axis=1) > cfg.percent_dense * extent
    clone = np.flatnonzero(hot & ~big)
    split = np.flatnonzero(hot & big)
    if cfg.max_gaussians is not None:
        room = max(cfg.max_gaussians - n, 0)
        # each clone adds one Gaussian, each split adds split_children - 1
        cand = np.concatenate([clone, split])
        cost = np.concatenate([np.ones(len(clone), int), np.full(len(split), cfg.split_children - 1)])
        order = np.lexsort((cand, -score[cand]))
        take = order[np.cumsum(cost[order]) <= room]
        chosen = np.zeros(n, bool)
        chosen[cand[take]] = True
        clone = clone[chosen[clone]]
        split = split[chosen[split]]

    params = {name: getattr(scene, name) for name in ("means", "quats", "log_scales", "opacity_logits", "sh", "textures")}
    new_rows = {k: [] for k in params}
    if len(clone):
        off = _sample_in(scene, clone, rng, 1)[0]
        for k, v in params.items():
            if v is not None:
                new_rows[k].append(v[clone] + off if k == "means" else v[clone].copy())
    if len(split):
        k_child = cfg.split_children
        off = _sample_in(scene, split, rng, k_child)
        for k, v in params.items():
            if v is None:
                continue
            if k == "means":
                rows = (v[split][None].astype(np.float64) + off).reshape(-1, 3)
            elif k == "log_scales":
                rows = np.tile(v[split] - np.log(cfg.split_factor), (k_child,) + (1,) * (v.ndim - 1))
            else:
                rows = np.tile(v[split], (k_child,) + (1,) * (v.ndim - 1))
            new_rows[k].append(rows)
    stacked = {k: np.concatenate(v, axis=0) for k, v in new_rows.items() if v}
    grown = _grow(scene, stacked) if stacked else scene.copy()
    n_added = len(grown) - n
    keep = np.ones(len(grown), bool)
    keep[split] = False
    src = np.concatenate([np.arange(n), np.full(n_added, -1)])
    return grown.subset(np.flatnonzero(keep)), src[keep]


def prune_low_opacity(scene: Scene, threshold: float):
    keep = np.flatnonzero(sigmoid(scene.opacity_logits.astype(np.float64)) >= threshold)
    return scene.subset(keep), keep


def reset_opacity(scene: Scene, ceiling: float = 0.01) -> Scene:
    out = scene.copy()
    o = np.minimum(sigmoid(out.opacity_logits.astype(np.float64)), ceiling)
    out.opacity_logits = logit(o).astype(out.opacity_logits.dtype)
    return out


def adc_step(scene: Scene, adc: AdcState, cfg: AdcConfig, extent: float, rng, opt=None,
             reset: bool = False) -> Scene:
    """One densify/prune event. Optimizer moments in ``opt`` are remapped to
    the new rows and the ADC accumulators are cleared."""
    if scene.textures is not None:
        raise ValueError("density control runs on untextured scenes only")
    dense, src = densify(scene, adc, cfg, extent, rng)
    pruned, keep = prune_low_opacity(dense, cfg.prune_opacity)
    if len(pruned) == 0:
        # never prune the scene to nothing; keep the most opaque Gaussian
        keep = np.array([int(np.argmax(dense.opacity_logits))])
        pruned = dense.subset(keep)
    src = src[keep]
    if opt is not None:
        opt.remap(src)
    if reset:
        pruned = reset_opacity(pruned)
        if opt is not None:
            opt.reset_rows("opacity_logits", slice(None))
    adc.reset(len(pruned))
    return pruned


def importance(scene: Scene) -> np.ndarray:
    s = scene.log_scales.astype(np.float64)
    return sigmoid(scene.opacity_logits.astype(np.float64)) * np.exp(s.sum(axis=1))


def prune_to_fraction(scene: Scene, fraction: float, base_count: Optional[int] = None) -> Scene:
    """Keep the ``ceil(fraction * base_count)`` most important Gaussians
    (opacity times volume, ties to the lower index), in original order.
    ``base_count`` defaults to the current count; pass the reference model's
    count to make repeated calls idempotent."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    n = len(scene)
    base = n if base_count is None else int(base_count)
    target = math.ceil(fraction * base)
    if target <= 0 or n == 0:
        raise ValueError("pruning would leave an empty scene")
    if target >= n:
        return scene.copy()
    imp = importance(scene)
    order = np.lexsort((np.arange(n), -imp))
    return scene.subset(np.sort(order[:target]))
