"""Shared builders for random scenes, cameras and finite differences."""

import numpy as np

from texgs.camera import Camera, look_at
from texgs.render import RenderOptions, render_forward
from texgs.scene import Scene
from texgs.texture import TextureVariant

F64 = RenderOptions(dtype=np.float64)


def small_camera(size=8, eye=(0.3, -0.2, 4.0)):
    return Camera(size, size, float(size), float(size), size / 2, size / 2, look_at(eye, (0, 0, 0), up=(0, 1, 0)))


def rand_scene(rng, variant="rgba", n=5, T=4, deg=3, spread=0.6, scale=(0.3, 0.9), dtype=np.float64):
    v = TextureVariant.parse(variant)
    means = rng.uniform(-spread, spread, (n, 3))
    means[:, 2] = rng.uniform(-0.5, 0.5, n)
    tex = None
    if v.channels:
        tex = rng.normal(scale=0.3, size=(n, T, T, v.channels))
        if v.alpha_channel is not None:
            tex[..., v.alpha_channel] = rng.uniform(-2, 3, (n, T, T))
    s = Scene(
        means=means,
        quats=rng.normal(size=(n, 4)),
        log_scales=np.log(rng.uniform(*scale, (n, 3))),
        opacity_logits=rng.uniform(-1, 2, n),
        sh=rng.normal(scale=0.3, size=(n, (deg + 1) ** 2, 3)),
        variant=v,
        textures=tex,
        sh_degree=deg,
        background=rng.uniform(0, 1, 3),
    )
    return s.astype(dtype)


def fd_check(scene, cam, upstream, grads, h=1e-6, rtol=1e-4, atol=1e-6, opts=F64):
    """Central differences of sum(upstream * color_raw) for every scalar
    parameter. Returns a list of mismatches (name, index, analytic, numeric)."""
    bad = []
    for name, arr in scene.params().items():
        g = getattr(grads, name)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + h
            lp = float(np.sum(render_forward(scene, cam, opts).color_raw * upstream))
            flat[k] = old - h
            lm = float(np.sum(render_forward(scene, cam, opts).color_raw * upstream))
            flat[k] = old
            fd = (lp - lm) / (2 * h)
            if abs(gflat[k] - fd) > atol + rtol * abs(fd):
                bad.append((name, np.unravel_index(k, arr.shape), float(gflat[k]), fd))
    return bad
