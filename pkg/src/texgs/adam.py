"""Adam over named parameter groups, with row-wise state surgery for
densification and pruning."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BETAS = (0.9, 0.999)
EPS = 1e-15


@dataclass
class OptimizerState:
    lr: dict                                   # group -> float or per-channel array
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    betas: tuple = BETAS
    eps: float = EPS

    def ensure(self, params: dict):
        for name, p in params.items():
            if name not in self.m or self.m[name].shape != p.shape:
                self.m[name] = np.zeros(p.shape, dtype=np.float64)
                self.v[name] = np.zeros(p.shape, dtype=np.float64)

    def remap(self, src: np.ndarray):
        """Row surgery after densify/prune: new row i takes the moments of old
        row ``src[i]``, or zeros where ``src[i] < 0``."""
        src = np.asarray(src)
        fresh = src < 0
        for store in (self.m, self.v):
            for name, arr in store.items():
                out = arr[np.where(fresh, 0, src)] if len(arr) else np.zeros((len(src),) + arr.shape[1:])
                out[fresh] = 0
                store[name] = out

    def reset_rows(self, name: str, rows):
        if name in self.m:
            self.m[name][rows] = 0
            self.v[name][rows] = 0


def adam_step(state: OptimizerState, params: dict, grads: dict) -> None:
    """In-place Adam update of every group present in ``grads``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter group '{name}'")
        if params[name].shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for '{name}'")
    state.ensure({k: params[k] for k in grads})
    state.step += 1
    b1, b2 = state.betas
    bc1 = 1 - b1**state.step
    bc2 = 1 - b2**state.step
    for name, g in grads.items():
        lr = state.lr.get(name, 0.0)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = np.asarray(lr) * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p = params[name]
        p -= update.astype(p.dtype)


def exp_lr(step: int, lr_init: float, lr_final: float, max_steps: int,
           delay_steps: int = 0, delay_mult: float = 1.0) -> float:
    """Log-linear decay from ``lr_init`` to ``lr_final`` over ``max_steps``."""
    if lr_init == 0.0 and lr_final == 0.0:
        return 0.0
    if delay_steps > 0:
        delay = delay_mult + (1 - delay_mult) * np.sin(0.5 * np.pi * np.clip(step / delay_steps, 0, 1))
    else:
        delay = 1.0
    t = np.clip(step / max(max_steps, 1), 0, 1)
    return float(delay * np.exp(np.log(lr_init) * (1 - t) + np.log(lr_final) * t))
