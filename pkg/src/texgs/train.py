"""Two-stage training: untextured Gaussians with density control, then
jointly optimized textures at a fixed Gaussian count."""

from __future__ import annotations

import json
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.spatial import cKDTree

from texgs.adam import OptimizerState, adam_step, exp_lr
from texgs.adc import AdcConfig, AdcState, adc_step, densify_score_update, prune_to_fraction, reset_opacity
from texgs.geometry import SH_C0, logit, num_sh_coeffs
from texgs.io.dataset import Dataset, load_dataset, parse_background
from texgs.io.toy import ToySpec, make_toy_scene
from texgs.loss import LossWeights, photometric_loss
from texgs.metrics import psnr
from texgs.render import RenderOptions, render_backward, render_forward
from texgs.scene import Scene
from texgs.texture import TextureVariant, texel_budget_alloc

log = logging.getLogger("texgs.train")


class TrainingDiverged(FloatingPointError):
    pass


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator per named consumer, all derived from one seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


@dataclass
class TrainConfig:
    dataset: str = "toy:checkerboard-quad"
    variant: str = "rgba"
    tex_res: Optional[int] = None
    texel_budget: Optional[int] = None
    m: float = 3.0
    lam: float = 0.8
    iters_stage1: int = 2000
    iters_stage2: int = 2000
    fraction: float = 1.0
    seed: int = 0
    threads: int = 1
    out: Optional[str] = None
    background: str = "black"
    # model
    sh_degree: int = 3
    sh_interval: int = 1000
    init: str = "points"
    n_init: int = 0
    init_opacity: float = 0.1
    # learning rates
    lr_position: float = 0.00016
    lr_position_final: float = 0.0000016
    lr_feature: float = 0.0025
    lr_opacity: float = 0.05
    lr_scaling: float = 0.005
    lr_rotation: float = 0.001
    lr_texture: float = 0.001
    lr_texture_alpha: float = 0.05
    # density control
    densify_from: int = 500
    densify_until: int = 15000
    densify_interval: int = 100
    densify_tau: float = 1e-3  # calibrate_tau() on the toy scenes, 90th percentile
    opacity_reset_interval: int = 3000
    prune_opacity: float = 0.005
    split_factor: float = 1.6
    percent_dense: float = 0.01
    max_gaussians: int = 0
    # toy scenes and logging
    toy_views: int = 8
    toy_test_views: int = 4
    toy_res: int = 64
    log_interval: int = 100

    # config-file / flag name for fields whose python name differs
    KEY_ALIASES = {"lam": "lambda"}

    def __post_init__(self):
        TextureVariant.parse(self.variant)
        if self.tex_res is not None and self.texel_budget is not None:
            raise ValueError("tex_res and texel_budget are mutually exclusive")
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError("fraction must lie in (0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.init not in ("points", "random"):
            raise ValueError("init must be 'points' or 'random'")
        parse_background(self.background)

    @classmethod
    def keys(cls) -> dict:
        """Config key -> field name."""
        return {cls.KEY_ALIASES.get(f.name, f.name): f.name for f in fields(cls)}

    @classmethod
    def from_mapping(cls, data: dict, base: Optional["TrainConfig"] = None) -> "TrainConfig":
        keys = cls.keys()
        unknown = sorted(set(data) - set(keys))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        kw = asdict(base) if base is not None else {}
        kw.update({keys[k]: v for k, v in data.items()})
        return cls(**kw)

    def to_mapping(self) -> dict:
        inv = {v: k for k, v in self.keys().items()}
        return {inv[k]: v for k, v in asdict(self).items()}

    def digest(self) -> str:
        blob = json.dumps(self.to_mapping(), sort_keys=True, default=str).encode()
        return f"{zlib.crc32(blob):08x}"

    def adc(self) -> AdcConfig:
        return AdcConfig(
            tau=self.densify_tau,
            interval=self.densify_interval,
            start=self.densify_from,
            until=self.densify_until,
            opacity_reset_interval=self.opacity_reset_interval,
            prune_opacity=self.prune_opacity,
            split_factor=self.split_factor,
            percent_dense=self.percent_dense,
            max_gaussians=self.max_gaussians or None,
        )


@dataclass
class TrainResult:
    scene: Scene
    stage1_scene: Optional[Scene]
    history: list = field(default_factory=list)
    extent: float = 1.0
    meta: dict = field(default_factory=dict)


def load_split(cfg: TrainConfig, split: str) -> Dataset:
    if cfg.dataset.startswith("toy:"):
        spec = ToySpec(
            name=cfg.dataset[4:],
            n_views=cfg.toy_views,
            n_test=cfg.toy_test_views,
            width=cfg.toy_res,
            height=cfg.toy_res,
            seed=cfg.seed,
            background=tuple(parse_background(cfg.background)),
        )
        return make_toy_scene(spec, split)
    return load_dataset(cfg.dataset, split, cfg.background, threads=cfg.threads)


def scene_extent(cameras) -> float:
    """Radius enclosing the camera centres, padded by 10%."""
    centers = np.stack([c.center for c in cameras])
    mid = centers.mean(axis=0)
    return 1.1 * float(np.linalg.norm(centers - mid, axis=1).max()) or 1.0


def init_scene(ds: Dataset, cfg: TrainConfig, extent: float, rng) -> Scene:
    if cfg.init == "points" and ds.points is not None:
        pts, cols = np.asarray(ds.points, float), np.asarray(ds.colors, float)
        if cfg.n_init and cfg.n_init < len(pts):
            pick = np.sort(rng.choice(len(pts), cfg.n_init, replace=False))
            pts, cols = pts[pick], cols[pick]
    else:
        n = cfg.n_init or 1000
        pts = rng.uniform(-0.5, 0.5, (n, 3)) * extent
        cols = rng.uniform(0, 1, (n, 3))
    n = len(pts)
    if n > 1:
        k = min(4, n)
        d, _ = cKDTree(pts).query(pts, k=k)
        dist = np.sqrt(np.mean(d[:, 1:] ** 2, axis=1))
    else:
        dist = np.full(n, 0.1 * extent)
    dist = np.maximum(dist, 1e-7)
    sh = np.zeros((n, num_sh_coeffs(cfg.sh_degree), 3))
    sh[:, 0, :] = (cols - 0.5) / SH_C0
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    return Scene(
        means=pts.astype(np.float32),
        quats=quats.astype(np.float32),
        log_scales=np.repeat(np.log(dist)[:, None], 3, axis=1).astype(np.float32),
        opacity_logits=np.full(n, logit(cfg.init_opacity), np.float32),
        sh=sh.astype(np.float32),
        m=cfg.m,
        sh_degree=0,
        background=ds.background,
    )


def learning_rates(cfg: TrainConfig, scene: Scene, extent: float, stage: int) -> dict:
    lr = {
        "means": cfg.lr_position * extent,
        "quats": cfg.lr_rotation,
        "log_scales": cfg.lr_scaling,
        "opacity_logits": cfg.lr_opacity,
        "sh": np.array([cfg.lr_feature] + [cfg.lr_feature / 20.0] * (scene.sh.shape[1] - 1))[:, None],
    }
    if scene.textures is not None:
        per = []
        if scene.variant.has_rgb:
            per += [cfg.lr_texture] * 3
        if scene.variant.has_alpha:
            per.append(cfg.lr_texture_alpha)
        lr["textures"] = np.array(per)
    return lr


class _ViewCycler:
    """Draws views from a fresh random permutation each epoch."""

    def __init__(self, n, rng):
        self.n, self.rng, self.queue = n, rng, []

    def __call__(self) -> int:
        if not self.queue:
            self.queue = list(self.rng.permutation(self.n))
        return int(self.queue.pop(0))


def _train_loop(scene: Scene, ds: Dataset, cfg: TrainConfig, stage: int, iters: int, extent: float,
                history: list, use_adc: bool, on_step: Optional[Callable] = None) -> Scene:
    opts = RenderOptions(dtype=np.float32, threads=cfg.threads)
    weights = LossWeights(cfg.lam)
    opt = OptimizerState(lr=learning_rates(cfg, scene, extent, stage))
    views = _ViewCycler(len(ds), rng_stream(cfg.seed, f"views/stage{stage}"))
    adc_rng = rng_stream(cfg.seed, "adc")
    acfg = cfg.adc()
    adc = AdcState.zeros(len(scene)) if use_adc else None
    pos_lr = cfg.lr_position * extent
    pos_lr_final = cfg.lr_position_final * extent
    for it in range(1, iters + 1):
        if stage == 1:
            opt.lr["means"] = exp_lr(it - 1, pos_lr, pos_lr_final, iters)
            if cfg.sh_interval > 0 and it % cfg.sh_interval == 0:
                scene.sh_degree = min(scene.sh_degree + 1, scene.max_sh_degree)
        v = views()
        cam, gt = ds.cameras[v], ds.images[v]
        fwd = render_forward(scene, cam, opts)
        loss, g_img = photometric_loss(fwd.color_raw, gt, weights)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at stage {stage} iteration {it} (view {ds.names[v]}, "
                                   f"{len(scene)} Gaussians)")
        gb = render_backward(scene, cam, g_img, fwd)
        if adc is not None:
            adc = densify_score_update(adc, gb)
        if on_step is not None:
            on_step(stage=stage, iteration=it, scene=scene, grads=gb, adc=adc, loss=loss)
        try:
            adam_step(opt, scene.params(), gb.params())
        except FloatingPointError as e:
            raise TrainingDiverged(f"stage {stage} iteration {it}: {e}") from e
        rec = {"stage": stage, "iteration": it, "loss": loss, "n_gaussians": len(scene)}
        history.append(rec)
        if cfg.log_interval and it % cfg.log_interval == 0:
            log.info("stage %d it %d loss %.5f psnr %.2f N=%d", stage, it, loss,
                     psnr(np.clip(fwd.color_raw, 0, 1), gt), len(scene))
        if adc is not None and it < acfg.until:
            if it >= acfg.start and it % acfg.interval == 0:
                scene = adc_step(scene, adc, acfg, extent, adc_rng, opt)
            if acfg.opacity_reset_interval and it % acfg.opacity_reset_interval == 0:
                scene = reset_opacity(scene)
                opt.reset_rows("opacity_logits", slice(None))
    return scene


def run_stage1(cfg: TrainConfig, train: Dataset, history: Optional[list] = None,
               on_step: Optional[Callable] = None):
    """Untextured optimization with density control. Returns (scene, extent)."""
    history = [] if history is None else history
    extent = scene_extent(train.cameras)
    scene = init_scene(train, cfg, extent, rng_stream(cfg.seed, "init"))
    scene = _train_loop(scene, train, cfg, 1, cfg.iters_stage1, extent, history, use_adc=True, on_step=on_step)
    return scene, extent


def resolve_tex_res(cfg: TrainConfig, n: int) -> int:
    if cfg.tex_res is not None:
        return int(cfg.tex_res)
    if cfg.texel_budget is not None:
        return texel_budget_alloc(n, int(cfg.texel_budget))
    return 4


def run_stage2(stage1: Scene, cfg: TrainConfig, train: Dataset, extent: float, base_count: Optional[int] = None,
               history: Optional[list] = None, on_step: Optional[Callable] = None) -> Scene:
    """Optional importance pruning, texture attachment, joint optimization
    without density control."""
    history = [] if history is None else history
    scene = stage1
    if cfg.fraction < 1.0:
        scene = prune_to_fraction(scene, cfg.fraction, base_count)
    variant = TextureVariant.parse(cfg.variant)
    if variant is TextureVariant.NONE:
        return scene.copy()
    scene = scene.with_textures(variant, resolve_tex_res(cfg, len(scene)))
    return _train_loop(scene, train, cfg, 2, cfg.iters_stage2, extent, history, use_adc=False, on_step=on_step)


def evaluate(scene: Scene, ds: Dataset, threads: int = 1) -> list:
    opts = RenderOptions(dtype=np.float32, threads=threads)
    return [psnr(render_forward(scene, cam, opts).color, gt) for cam, gt in ds]


def train_two_stage(cfg: TrainConfig, on_step: Optional[Callable] = None) -> TrainResult:
    train = load_split(cfg, "train")
    history: list = []
    s1, extent = run_stage1(cfg, train, history, on_step)
    s2 = run_stage2(s1, cfg, train, extent, history=history, on_step=on_step)
    meta = {
        "iterations": {"stage1": cfg.iters_stage1,
                       "stage2": 0 if TextureVariant.parse(cfg.variant) is TextureVariant.NONE else cfg.iters_stage2},
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "stage1_count": len(s1),
        "final_loss": history[-1]["loss"] if history else None,
        "config": cfg.to_mapping(),
    }
    res = TrainResult(scene=s2, stage1_scene=s1, history=history, extent=extent, meta=meta)
    if cfg.out:
        from texgs.io.checkpoint import save_checkpoint

        out = Path(cfg.out)
        save_checkpoint(s2, meta, out / "checkpoint")
        write_history(history, out / "loss.csv")
    return res


def write_history(history: list, path) -> None:
    import csv

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["stage", "iteration", "loss", "n_gaussians"])
        for r in history:
            w.writerow([r["stage"], r["iteration"], repr(r["loss"]), r["n_gaussians"]])


def calibrate_tau(cfg: TrainConfig, iters: int = 500, quantile: float = 0.9) -> dict:
    """Densification threshold for the sum-of-magnitudes score.

    Runs untextured training with density control switched off, then
    returns the ``quantile`` of the per-Gaussian mean score (so roughly the
    top ``1 - quantile`` would densify at the first event), together with
    the same quantile of the classic statistic and their median ratio.
    """
    from dataclasses import replace

    probe = replace(cfg, iters_stage1=iters, densify_from=iters + 1, opacity_reset_interval=0)
    train = load_split(probe, "train")
    state = {}

    def grab(stage, iteration, scene, grads, adc, loss):
        state["adc"] = adc

    run_stage1(probe, train, on_step=grab)
    a6, a5 = state["adc"].mean_scores()
    seen = state["adc"].count > 0
    ratio = a6[seen] / np.maximum(a5[seen], 1e-30)
    return {
        "tau": float(np.quantile(a6[seen], quantile)),
        "tau_classic": float(np.quantile(a5[seen], quantile)),
        "median_ratio": float(np.median(ratio)),
        "iters": iters,
        "quantile": quantile,
    }
