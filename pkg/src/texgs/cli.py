"""``texgs`` command line: train, render, eval, diag and toy export."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import typing
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from texgs.train import TrainConfig

log = logging.getLogger("texgs")

# keys that only steer a subcommand; they live in the same namespace as the
# training keys so config files and flags stay one-to-one
COMMAND_KEYS = {
    "checkpoint": (str, None, "checkpoint directory (default: OUT/checkpoint)"),
    "split": (str, "test", "dataset split used by render/eval"),
    "decompose": (bool, False, "also write base and texture images"),
    "orbit": (int, 0, "render N poses on a circle about the scene centroid instead of dataset cameras"),
}

KEY_HELP = {
    "dataset": "dataset directory, or toy:NAME for a generated scene",
    "variant": "texture variant: none, alpha, rgb or rgba",
    "tex_res": "fixed texture resolution T per Gaussian",
    "texel_budget": "total texel budget shared by all Gaussians",
    "m": "texture extent in standard deviations",
    "lambda": "SSIM weight complement: loss = lambda*L1 + (1-lambda)*(1-SSIM)",
    "iters_stage1": "iterations of untextured training with density control",
    "iters_stage2": "iterations of joint texture training",
    "fraction": "keep this fraction of stage-1 Gaussians before stage 2",
    "seed": "master random seed",
    "threads": "renderer worker threads",
    "out": "output directory",
    "background": "black, white or R,G,B in [0, 1]",
}


@dataclass
class CliConfig:
    train: TrainConfig
    checkpoint: Optional[str] = None
    split: str = "test"
    decompose: bool = False
    orbit: int = 0

    @property
    def out_dir(self) -> Path:
        return Path(self.train.out or "out")

    @property
    def seed(self) -> int:
        return self.train.seed

    @property
    def checkpoint_dir(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else self.out_dir / "checkpoint"


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def _key_types() -> dict:
    hints = typing.get_type_hints(TrainConfig)
    out = {}
    for key, name in TrainConfig.keys().items():
        t = hints[name]
        args = [a for a in typing.get_args(t) if a is not type(None)]
        out[key] = args[0] if args else t
    for key, (t, _, _) in COMMAND_KEYS.items():
        out[key] = t
    return out


def all_keys() -> list:
    return list(TrainConfig.keys()) + list(COMMAND_KEYS)


def _add_config_flags(p: argparse.ArgumentParser):
    defaults = TrainConfig().to_mapping()
    types = _key_types()
    g = p.add_argument_group("configuration (each flag is also a config-file key)")
    g.add_argument("--config", metavar="PATH", help="TOML file of key = value pairs")
    for key in all_keys():
        t = types[key]
        default = defaults[key] if key in defaults else COMMAND_KEYS[key][1]
        text = KEY_HELP.get(key) or (COMMAND_KEYS[key][2] if key in COMMAND_KEYS else key.replace("_", " "))
        text = f"{text} [key: {key}; default: {default}]"
        if t is bool:
            g.add_argument(_flag(key), dest=key, action="store_true", default=argparse.SUPPRESS, help=text)
        elif key == "variant":
            g.add_argument(_flag(key), dest=key, choices=["none", "alpha", "rgb", "rgba"],
                           default=argparse.SUPPRESS, help=text)
        else:
            g.add_argument(_flag(key), dest=key, type=t, default=argparse.SUPPRESS, metavar=key.upper(), help=text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="texgs",
        description="Train, render, evaluate and inspect textured Gaussian splatting models. "
                    "Verbosity follows the TEXSPLAT_LOG environment variable (DEBUG, INFO, WARNING).",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in [
        ("train", "two-stage training; writes checkpoint, loss curve, renders and metrics"),
        ("render", "render a checkpoint from dataset cameras or an orbit"),
        ("eval", "PSNR/SSIM report of a checkpoint on a dataset split"),
        ("diag", "effective-rank histogram and summary of a checkpoint"),
        ("toy", "write a toy scene to disk in the transforms.json layout"),
    ]:
        _add_config_flags(sub.add_parser(name, help=text, description=text))
    return parser


def _read_toml(path) -> dict:
    if sys.version_info >= (3, 11):
        import tomllib
    else:
        import tomli as tomllib
    with open(path, "rb") as f:
        return tomllib.load(f)


def resolve_config(args: argparse.Namespace) -> CliConfig:
    data = {}
    if getattr(args, "config", None):
        data = _read_toml(args.config)
        unknown = sorted(set(data) - set(all_keys()))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    given = {k: v for k, v in vars(args).items() if k in all_keys()}
    data.update(given)
    train_part = {k: v for k, v in data.items() if k not in COMMAND_KEYS}
    cmd_part = {k: data.get(k, COMMAND_KEYS[k][1]) for k in COMMAND_KEYS}
    if "background" in train_part and not isinstance(train_part["background"], str):
        train_part["background"] = ",".join(str(x) for x in train_part["background"])
    return CliConfig(train=TrainConfig.from_mapping(train_part), **cmd_part)


# ---- helpers --------------------------------------------------------------

def _write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


def _load(cfg: CliConfig):
    from texgs.io.checkpoint import load_checkpoint

    if not cfg.checkpoint_dir.exists():
        raise FileNotFoundError(f"checkpoint {cfg.checkpoint_dir} not found")
    return load_checkpoint(cfg.checkpoint_dir)


def orbit_cameras(scene, template, n: int, radius: float, height: float):
    from texgs.camera import Camera, look_at

    center = scene.means.astype(np.float64).mean(axis=0)
    cams = []
    for k in range(n):
        phi = 2 * math.pi * k / n
        eye = center + np.array([radius * math.cos(phi), radius * math.sin(phi), height])
        w2c = look_at(eye, center, up=(0.0, 0.0, 1.0))
        cams.append(Camera(template.width, template.height, template.fx, template.fy, template.cx, template.cy, w2c))
    return cams


def evaluate_scene(scene, ds, threads: int):
    from texgs.metrics import MetricReport, model_bytes
    from texgs.render import RenderOptions, render_forward

    opts = RenderOptions(dtype=np.float32, threads=threads)
    rep = MetricReport(n_gaussians=len(scene), texel_count=0 if scene.textures is None else int(scene.textures[..., 0].size),
                       bytes=model_bytes(scene))
    renders = []
    for name, cam, gt in zip(ds.names, ds.cameras, ds.images):
        img = render_forward(scene, cam, opts).color
        rep.add(name, img, gt)
        renders.append(img)
    return rep, renders


def write_report(rep, out: Path, stem: str = "metrics"):
    from texgs.plotting import plot_metrics

    _write_csv(out / f"{stem}.csv", ["image_name", "psnr", "ssim"], [(n, repr(p), repr(s)) for n, p, s in rep.rows()])
    _write_json(out / f"{stem}.json", rep.summary())
    if rep.names:
        plot_metrics(rep.names, rep.psnr, out / f"{stem}_psnr.png")


# ---- subcommands ----------------------------------------------------------

def cmd_train(cfg: CliConfig) -> int:
    from dataclasses import replace

    from texgs.io.images import write_image
    from texgs.plotting import plot_loss
    from texgs.train import load_split, train_two_stage

    out = cfg.out_dir
    tcfg = replace(cfg.train, out=str(out))
    _write_json(out / "config.json", tcfg.to_mapping())
    res = train_two_stage(tcfg)
    plot_loss(res.history, out / "loss.png")
    test = load_split(tcfg, cfg.split)
    rep, renders = evaluate_scene(res.scene, test, tcfg.threads)
    write_report(rep, out / "eval")
    for name, img in zip(test.names, renders):
        write_image(out / "renders" / f"{Path(name).name}.png", img)
    s = rep.summary()
    log.info("final %s PSNR %.3f dB, SSIM %.4f, %d Gaussians", cfg.split, s["psnr_mean"], s["ssim_mean"], len(res.scene))
    print(f"checkpoint: {out / 'checkpoint'}")
    print(f"final {cfg.split} PSNR {s['psnr_mean']:.3f} dB  SSIM {s['ssim_mean']:.4f}  Gaussians {len(res.scene)}")
    return 0


def cmd_render(cfg: CliConfig) -> int:
    from texgs.io.images import write_image
    from texgs.metrics import psnr
    from texgs.plotting import plot_decomposition
    from texgs.render import RenderOptions, render_forward
    from texgs.train import load_split

    scene = _load(cfg)
    opts = RenderOptions(dtype=np.float32, threads=cfg.train.threads, decompose=cfg.decompose)
    ds = load_split(cfg.train, cfg.split)
    out = cfg.out_dir / "render"
    if cfg.orbit > 0:
        centers = np.stack([c.center for c in ds.cameras])
        mid = scene.means.astype(np.float64).mean(axis=0)
        rel = centers - mid
        radius = float(np.median(np.linalg.norm(rel[:, :2], axis=1)))
        height = float(np.median(rel[:, 2]))
        cams = orbit_cameras(scene, ds.cameras[0], cfg.orbit, radius, height)
        names, gts = [f"orbit_{k:03d}" for k in range(cfg.orbit)], [None] * cfg.orbit
    else:
        cams, names, gts = ds.cameras, [Path(n).name for n in ds.names], ds.images
    rows = []
    for name, cam, gt in zip(names, cams, gts):
        r = render_forward(scene, cam, opts)
        write_image(out / f"{name}.png", r.color)
        if cfg.decompose:
            write_image(out / f"{name}_base.png", r.base)
            write_image(out / f"{name}_tex.png", r.tex)
            plot_decomposition(r.color, r.base, r.tex, out / f"{name}_panels.png", gt=gt)
        if gt is not None:
            rows.append((name, repr(psnr(r.color, gt))))
    if rows:
        _write_csv(out / "psnr.csv", ["image_name", "psnr"], rows)
    print(f"{len(cams)} images written to {out}")
    return 0


def cmd_eval(cfg: CliConfig) -> int:
    from texgs.train import load_split

    scene = _load(cfg)
    ds = load_split(cfg.train, cfg.split)
    rep, _ = evaluate_scene(scene, ds, cfg.train.threads)
    write_report(rep, cfg.out_dir / "eval")
    s = rep.summary()
    print(f"{cfg.split}: PSNR {s['psnr_mean']:.3f} dB  SSIM {s['ssim_mean']:.4f}  "
          f"Gaussians {s['n_gaussians']}  texels {s['texel_count']}  bytes {s['bytes']}")
    return 0


RANK_BINS = 20
RANK_RANGE = (1.0, 3.0)
FLAT_BAND = (1.9, 2.1)


def rank_histogram(scene):
    from texgs.geometry import effective_rank

    ranks = effective_rank(np.exp(scene.log_scales.astype(np.float64))) if len(scene) else np.zeros(0)
    counts, edges = np.histogram(np.clip(ranks, *RANK_RANGE), bins=RANK_BINS, range=RANK_RANGE)
    return ranks, counts, edges


def cmd_diag(cfg: CliConfig) -> int:
    from texgs.plotting import plot_rank_histogram

    scene = _load(cfg)
    ranks, counts, edges = rank_histogram(scene)
    out = cfg.out_dir / "diag"
    _write_csv(out / "effective_rank_hist.csv", ["bin_lo", "bin_hi", "count"],
               [(repr(float(lo)), repr(float(hi)), int(c)) for lo, hi, c in zip(edges[:-1], edges[1:], counts)])
    flat = float(np.mean((ranks >= FLAT_BAND[0]) & (ranks <= FLAT_BAND[1]))) if len(ranks) else 0.0
    summary = {
        "n_gaussians": len(scene),
        "effective_rank_mean": float(ranks.mean()) if len(ranks) else None,
        "effective_rank_median": float(np.median(ranks)) if len(ranks) else None,
        "fraction_flat": flat,
        "flat_band": list(FLAT_BAND),
        "variant": scene.variant.value,
        "tex_res": scene.tex_res,
    }
    _write_json(out / "summary.json", summary)
    plot_rank_histogram(edges, counts, out / "effective_rank_hist.png", band=FLAT_BAND)
    print(f"{len(scene)} Gaussians, {100 * flat:.1f}% with effective rank in [{FLAT_BAND[0]}, {FLAT_BAND[1]}]")
    return 0


def cmd_toy(cfg: CliConfig) -> int:
    from texgs.io.dataset import write_dataset
    from texgs.train import load_split

    if not cfg.train.dataset.startswith("toy:"):
        raise ValueError("toy export needs --dataset toy:NAME")
    out = cfg.out_dir / cfg.train.dataset[4:]
    for split in ("train", "test"):
        write_dataset(load_split(cfg.train, split), out, split)
    print(f"toy scene written to {out}")
    return 0


COMMANDS = {"train": cmd_train, "render": cmd_render, "eval": cmd_eval, "diag": cmd_diag, "toy": cmd_toy}


def setup_logging():
    level = os.environ.get("TEXSPLAT_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except Exception as e:  # every module error becomes a nonzero exit with a message
        log.debug("traceback", exc_info=True)
        print(f"texgs {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
