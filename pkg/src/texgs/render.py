"""Ray-exact tiled renderer for textured Gaussians, with an analytic backward pass.

Every pixel ray is intersected with each candidate Gaussian's major-axis
plane; the exact 3D Gaussian value at the hit drives opacity, and the hit's
plane coordinates index the Gaussian's texture. Screen-space ellipses (EWA
projection) are only used to bound the work per tile.
"""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from texgs.camera import Camera, pixel_dirs
from texgs.geometry import (
    EPS_PARALLEL,
    SCALE_FLOOR,
    Gaussian,
    Ray,
    build_covariance,
    eval_gaussian,
    eval_sh,
    frame_order,
    intersect_ray_plane,
    intersection_frame,
    num_sh_coeffs,
    quat_to_rotation,
    rotation_grad_to_quat,
    sh_basis,
    sh_basis_jacobian,
    sigmoid,
    uv_map,
)
from texgs.scene import GradientBuffer, Scene
from texgs.texture import TextureMap, activate, alpha_logit_grad, bilinear_setup, sample_bilinear

log = logging.getLogger(__name__)

NEAR = 0.01
ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
T_MIN = 1e-4
TILE = 16


@dataclass
class RenderOptions:
    dtype: type = np.float32
    threads: int = 1
    tile_size: int = TILE
    # tiles evaluated together in one vectorized batch (each pixel still only
    # sees its own tile's bin list)
    tiles_per_batch: int = 16
    decompose: bool = False
    background: Optional[np.ndarray] = None


@dataclass
class ProjectedBound:
    index: int
    depth: float
    center_px: np.ndarray
    radius_px: float
    # conservative pixel-centre rectangle (xmin, ymin, xmax, ymax)
    rect: tuple


@dataclass
class RenderOutput:
    color: np.ndarray          # (H, W, 3) clamped to [0, 1]
    color_raw: np.ndarray      # before the output clamp
    alpha: np.ndarray          # (H, W)
    n_contrib: np.ndarray      # composited hits per pixel
    final_T: np.ndarray        # transmittance left after the last hit
    base: Optional[np.ndarray] = None
    tex: Optional[np.ndarray] = None
    _ctx: Optional[dict] = field(default=None, repr=False)


# --------------------------------------------------------------------------
# scalar reference path


def composite_pixel(hits, background):
    """Front-to-back compositing of ``[(rgb, alpha), ...]`` over ``background``."""
    c = np.zeros(3)
    T = 1.0
    for rgb, a in hits:
        if not 0.0 <= a < 1.0:
            raise ValueError(f"alpha {a} outside [0, 1)")
        c = c + np.asarray(rgb, dtype=np.float64) * a * T
        T *= 1.0 - a
        if T < T_MIN:
            break
    c = c + np.asarray(background, dtype=np.float64) * T
    return c, 1.0 - T


def shade_hit(g: Gaussian, tex: Optional[TextureMap], ray: Ray, m: float, sh_degree: Optional[int] = None,
              split: bool = False):
    """Colour and opacity one Gaussian contributes along ``ray``, or None.

    With ``split=True`` the colour is returned as ``(c_base, c_tex)``.
    """
    if sh_degree is None:
        sh_degree = int(round(np.sqrt(g.sh.shape[0]))) - 1
    frame = intersection_frame(g)
    x = intersect_ray_plane(ray, frame, g.mu)
    if x is None:
        return None
    view = g.mu - ray.origin
    c_base = eval_sh(g.sh, view / np.linalg.norm(view), sh_degree)
    c_tex = np.zeros(3)
    a_tex = 1.0
    if tex is not None:
        u, v, in_range = uv_map(x, g.mu, frame, m, tex.resolution)
        if in_range:
            c_tex, a_tex = sample_bilinear(tex, u, v)
            a_tex = float(a_tex)
    alpha = min(ALPHA_MAX, a_tex * eval_gaussian(g, x) * g.opacity)
    if alpha < ALPHA_MIN:
        return None
    if split:
        return (c_base, np.asarray(c_tex, dtype=np.float64)), alpha
    return c_base + c_tex, alpha


def render_reference(scene: Scene, cam: Camera, background=None):
    """Untiled, unbounded per-pixel rendering through :func:`shade_hit`.

    Slow; intended as an oracle for the tiled renderer.
    """
    bg = scene.background if background is None else np.asarray(background, dtype=np.float64)
    s64 = scene.astype(np.float64)
    depth = s64.means @ cam.rotation[2] + cam.translation[2]
    order = [i for i in np.lexsort((np.arange(len(scene)), depth)) if depth[i] > NEAR]
    gs = [s64.gaussian(i) for i in order]
    texs = [s64.texture(i) for i in order]
    img = np.zeros((cam.height, cam.width, 3))
    alpha = np.zeros((cam.height, cam.width))
    for j in range(cam.height):
        for i in range(cam.width):
            d = pixel_dirs(cam, i, j)
            ray = Ray(cam.center, d)
            hits = []
            for g, t in zip(gs, texs):
                h = shade_hit(g, t, ray, scene.m, scene.sh_degree)
                if h is not None:
                    hits.append(h)
            img[j, i], alpha[j, i] = composite_pixel(hits, bg)
    return img, alpha


# --------------------------------------------------------------------------
# per-Gaussian setup


def _prepare(scene: Scene, cam: Camera, dtype):
    n = len(scene)
    means = scene.means.astype(dtype)
    quats = scene.quats.astype(dtype)
    raw_scales = np.exp(scene.log_scales.astype(dtype))
    scales = np.maximum(raw_scales, dtype(SCALE_FLOOR))
    R = quat_to_rotation(quats) if n else np.zeros((0, 3, 3), dtype)
    perm = frame_order(scales) if n else np.zeros((0, 3), np.intp)
    rows = np.arange(n)
    axes = np.swapaxes(R, 1, 2)  # axes[:, k] is the k-th principal direction
    r1 = axes[rows, perm[:, 0]] if n else np.zeros((0, 3), dtype)
    r2 = axes[rows, perm[:, 1]] if n else np.zeros((0, 3), dtype)
    nrm = axes[rows, perm[:, 2]] if n else np.zeros((0, 3), dtype)
    s1 = scales[rows, perm[:, 0]] if n else np.zeros(0, dtype)
    s2 = scales[rows, perm[:, 1]] if n else np.zeros(0, dtype)
    opac = sigmoid(scene.opacity_logits.astype(dtype))

    origin = cam.center.astype(dtype)
    w = means - origin
    dist = np.linalg.norm(w, axis=1)
    view = w / np.maximum(dist, 1e-12)[:, None]
    deg = scene.sh_degree
    kd = num_sh_coeffs(deg)
    basis = sh_basis(view, deg) if n else np.zeros((0, kd), dtype)
    sh = scene.sh[:, :kd].astype(dtype)
    base_raw = np.einsum("nk,nkc->nc", basis, sh) + dtype(0.5)
    c_base = np.maximum(base_raw, 0)

    Rw = cam.rotation
    mc = means.astype(np.float64) @ Rw.T + cam.translation
    depth = mc[:, 2]
    return dict(
        n=n, means=means, quats=quats, raw_scales=raw_scales, scales=scales, R=R, perm=perm,
        r1=r1, r2=r2, nrm=nrm, s1=s1, s2=s2, opac=opac, origin=origin, w=w, dist=dist, view=view,
        basis=basis, base_raw=base_raw, c_base=c_base, mc=mc, depth=depth,
    )


def _bounds(prep, cam: Camera):
    """EWA screen ellipse (centre, 3-sigma radius) and a conservative pixel
    rectangle per Gaussian. Returns arrays; rect rows are NaN when culled."""
    n = prep["n"]
    mc = prep["mc"]
    x, y, z = mc[:, 0], mc[:, 1], mc[:, 2]
    front = z > NEAR
    zs = np.where(front, z, 1.0)
    center = np.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], axis=1)

    R = prep["R"].astype(np.float64)
    s = prep["scales"].astype(np.float64)
    cov = build_covariance(R, s) if n else np.zeros((0, 3, 3))
    Rw = cam.rotation
    cov_c = Rw @ cov @ Rw.T
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / zs
    J[:, 0, 2] = -cam.fx * x / zs**2
    J[:, 1, 1] = cam.fy / zs
    J[:, 1, 2] = -cam.fy * y / zs**2
    cov2d = J @ cov_c @ np.swapaxes(J, 1, 2)
    half_tr = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    lam = half_tr + np.sqrt(np.maximum(half_tr**2 - det, 0))
    radius = 3.0 * np.sqrt(np.maximum(lam, 0))

    # planar footprint where opacity can reach the skip threshold
    o = prep["opac"].astype(np.float64)
    reach = 255.0 * o > 1.0
    k = np.sqrt(2.0 * np.log(np.maximum(255.0 * o, 1.0))) * 1.01 + 1e-6
    e1 = (k * prep["s1"])[:, None] * prep["r1"]
    e2 = (k * prep["s2"])[:, None] * prep["r2"]
    mu = prep["means"].astype(np.float64)
    corners = np.stack([mu + e1 + e2, mu + e1 - e2, mu - e1 + e2, mu - e1 - e2], axis=1)
    cc = corners @ Rw.T + cam.translation
    cz = cc[..., 2]
    safe = np.all(cz > 1e-6, axis=1)
    czs = np.where(cz > 1e-6, cz, 1.0)
    px = cam.fx * cc[..., 0] / czs + cam.cx
    py = cam.fy * cc[..., 1] / czs + cam.cy
    big = 1e30
    xmin = np.where(safe, px.min(axis=1), -big)
    xmax = np.where(safe, px.max(axis=1), big)
    ymin = np.where(safe, py.min(axis=1), -big)
    ymax = np.where(safe, py.max(axis=1), big)
    xmin = np.minimum(xmin, center[:, 0] - radius) - 1.0
    xmax = np.maximum(xmax, center[:, 0] + radius) + 1.0
    ymin = np.minimum(ymin, center[:, 1] - radius) - 1.0
    ymax = np.maximum(ymax, center[:, 1] + radius) + 1.0
    on_screen = (xmax >= 0.5) & (xmin <= cam.width - 0.5) & (ymax >= 0.5) & (ymin <= cam.height - 0.5)
    keep = front & reach & on_screen & np.isfinite(radius)
    rect = np.stack([xmin, ymin, xmax, ymax], axis=1)
    rect[~keep] = np.nan
    return center, radius, rect, keep


def project_and_bound(g: Gaussian, cam: Camera, index: int = 0) -> Optional[ProjectedBound]:
    scene = Scene(
        means=g.mu[None], quats=g.quat[None], log_scales=g.log_scale[None],
        opacity_logits=np.array([g.opacity_logit]), sh=g.sh[None],
    )
    prep = _prepare(scene, cam, np.float64)
    center, radius, rect, keep = _bounds(prep, cam)
    if not keep[0]:
        return None
    return ProjectedBound(index, float(prep["depth"][0]), center[0], float(radius[0]), tuple(rect[0]))


# --------------------------------------------------------------------------
# tiled forward / backward


def _check_finite(scene: Scene):
    if len(scene) == 0:
        return
    bad = np.zeros(len(scene), bool)
    for name, arr in scene.params().items():
        bad |= ~np.isfinite(arr.reshape(len(scene), -1)).all(axis=1)
    if bad.any():
        raise FloatingPointError(f"non-finite parameters on Gaussian {int(np.flatnonzero(bad)[0])}")


def _fingerprint(scene: Scene, cam: Camera, bg) -> str:
    h = hashlib.blake2b(digest_size=16)
    for arr in scene.params().values():
        h.update(np.ascontiguousarray(arr).tobytes())
    h.update(np.ascontiguousarray(cam.world_to_cam).tobytes())
    h.update(repr((cam.width, cam.height, cam.fx, cam.fy, cam.cx, cam.cy, scene.m, scene.sh_degree,
                   scene.variant.value)).encode())
    h.update(np.asarray(bg, np.float64).tobytes())
    return h.hexdigest()


def _tiles(cam: Camera, size: int):
    for y0 in range(0, cam.height, size):
        for x0 in range(0, cam.width, size):
            yield x0, y0, min(x0 + size, cam.width), min(y0 + size, cam.height)


def _batches(cam: Camera, opts: RenderOptions):
    tiles = list(_tiles(cam, opts.tile_size))
    k = max(1, opts.tiles_per_batch)
    return [tiles[i:i + k] for i in range(0, len(tiles), k)]


def _bin(rect, order, tile):
    x0, y0, x1, y1 = tile
    r = rect[order]
    return (r[:, 2] >= x0 + 0.5) & (r[:, 0] <= x1 - 0.5) & (r[:, 3] >= y0 + 0.5) & (r[:, 1] <= y1 - 0.5)


def _quads(values):
    """Pack each texel with its +u, +v and +uv neighbours, channel-major, so a
    bilinear lookup is one flat gather. Returns ``(table, T, Tq)`` where
    ``table`` has shape (4 * C, N * Tq * Tq)."""
    N, T, _, C = values.shape
    if T == 1:
        q = np.repeat(values[:, :, :, None, :], 4, axis=3)
    else:
        q = np.stack([values[:, :-1, :-1], values[:, 1:, :-1], values[:, :-1, 1:], values[:, 1:, 1:]], axis=3)
    Tq = q.shape[1]
    table = np.ascontiguousarray(q.transpose(3, 4, 0, 1, 2).reshape(4 * C, N * Tq * Tq))
    return table, T, Tq


def _exclusive_cumprod(x):
    out = np.empty_like(x)
    out[0] = 1
    for k in range(1, x.shape[0]):
        out[k] = out[k - 1] * x[k - 1]
    return out


def _tile_forward(batch, prep, dirs, order, rect, values, scene: Scene, bg, dtype, decompose):
    # per-pair arrays are laid out (K Gaussians, P pixels); colours (3, K, P)
    ys, xs, owner = [], [], []
    bins = []
    for k, (x0, y0, x1, y1) in enumerate(batch):
        yy, xx = np.mgrid[y0:y1, x0:x1]
        ys.append(yy.ravel())
        xs.append(xx.ravel())
        owner.append(np.full(yy.size, k))
        bins.append(_bin(rect, order, batch[k]))
    ys, xs, owner = np.concatenate(ys), np.concatenate(xs), np.concatenate(owner)
    bins = np.stack(bins)
    used = bins.any(axis=0)
    gid = order[used]
    member = bins[:, used][owner].T  # Gaussian binned to this pixel's tile
    d = dirs[ys, xs]
    P = d.shape[0]
    K = gid.size
    st = dict(ys=ys, xs=xs, gid=gid)
    if K == 0:
        st.update(T_final=np.ones(P, dtype))
        color = np.broadcast_to(bg, (P, 3)).astype(dtype)
        out = dict(color=color, alpha=np.zeros(P, dtype), count=np.zeros(P, np.int32), T_final=st["T_final"])
        if decompose:
            out["base"] = color.copy()
            out["tex"] = np.zeros((P, 3), dtype)
        return st, out

    n, r1, r2 = prep["nrm"][gid], prep["r1"][gid], prep["r2"][gid]
    w = prep["w"][gid]
    s1, s2 = prep["s1"][gid][:, None], prep["s2"][gid][:, None]
    dT = d.T
    dn = n @ dT
    dr1 = r1 @ dT
    dr2 = r2 @ dT
    wn = np.sum(w * n, axis=1)[:, None]
    wr1 = np.sum(w * r1, axis=1)[:, None]
    wr2 = np.sum(w * r2, axis=1)[:, None]
    valid = (np.abs(dn) >= EPS_PARALLEL) & member
    dn_s = dn.copy()
    dn_s[~valid] = 1
    t = wn / dn_s
    valid &= t > 0
    t *= valid
    a = (t * dr1 - wr1) * valid
    b = (t * dr2 - wr2) * valid
    G = np.exp(-0.5 * ((a / s1) ** 2 + (b / s2) ** 2))

    c_tex = None
    a_tex = None
    if values is not None:
        m = dtype(scene.m)
        table, T, Tq = values
        C = table.shape[0] // 4
        inr = (np.abs(a) <= m * s1) & (np.abs(b) <= m * s2)
        u = (m * s1 + a) / (2 * m * s1) * (T - 1)
        v = (m * s2 + b) / (2 * m * s2) * (T - 1)
        i0, _, j0, _, fu, fv, u_free, v_free = bilinear_setup(u, v, T)
        idx = (gid[:, None] * Tq + i0) * Tq + j0
        quad = np.take(table, idx, axis=1).reshape(4, C, K, P)
        wq = np.stack([(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv])
        samp = np.einsum("qkp,qckp->ckp", wq, quad)
        variant = scene.variant
        if variant.has_rgb:
            c_tex = samp[:3] * inr
        ac = variant.alpha_channel
        if ac is not None:
            a_tex = np.where(inr, samp[ac], dtype(1))
        st.update(inr=inr, u_free=u_free, v_free=v_free, i0=i0, j0=j0, fu=fu, fv=fv, wq=wq, quad=quad)

    o = prep["opac"][gid][:, None]
    raw_alpha = G * o if a_tex is None else a_tex * G * o
    clamped = raw_alpha > ALPHA_MAX
    alpha = np.minimum(raw_alpha, dtype(ALPHA_MAX))
    hit = valid & (alpha >= ALPHA_MIN)
    alpha *= hit
    T_before = _exclusive_cumprod(1 - alpha)
    active = T_before >= T_MIN
    if not active.all():
        hit &= active
        alpha *= active
        T_before = _exclusive_cumprod(1 - alpha)
    T_final = T_before[-1] * (1 - alpha[-1])
    weight = alpha * T_before

    c_base = prep["c_base"][gid]
    base_part = c_base.T @ weight
    color = base_part + bg[:, None] * T_final
    tex_part = None
    if c_tex is not None:
        tex_part = np.einsum("kp,ckp->cp", weight, c_tex)
        color = color + tex_part
    out = dict(color=color.T, alpha=1 - T_final, count=hit.sum(axis=0).astype(np.int32), T_final=T_final)
    if decompose:
        out["base"] = (base_part + bg[:, None] * T_final).T
        out["tex"] = tex_part.T if tex_part is not None else np.zeros((P, 3), dtype)

    st.update(d=d, dn=dn_s, dr1=dr1, dr2=dr2, t=t, a=a, b=b, G=G, a_tex=a_tex, c_tex=c_tex, o=o,
              clamped=clamped, hit=hit, alpha=alpha, T_before=T_before, T_final=T_final, weight=weight)
    return st, out


def render_forward(scene: Scene, cam: Camera, opts: Optional[RenderOptions] = None) -> RenderOutput:
    opts = opts or RenderOptions()
    dtype = np.dtype(opts.dtype).type
    _check_finite(scene)
    bg = np.asarray(scene.background if opts.background is None else opts.background, dtype=dtype)
    prep = _prepare(scene, cam, dtype)
    center, radius, rect, keep = _bounds(prep, cam)
    idx = np.arange(prep["n"])
    order = np.lexsort((idx, prep["depth"]))
    order = order[keep[order]]
    values = None
    if scene.textures is not None:
        values = _quads(activate(scene.textures.astype(dtype), scene.variant))

    ys, xs = np.mgrid[0:cam.height, 0:cam.width]
    dirs = pixel_dirs(cam, xs, ys, dtype)
    batches = _batches(cam, opts)

    def work(batch):
        return _tile_forward(batch, prep, dirs, order, rect, values, scene, bg, dtype, opts.decompose)

    if opts.threads > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=opts.threads) as ex:
            results = list(ex.map(work, batches))
    else:
        results = [work(b) for b in batches]

    H, W = cam.height, cam.width
    color = np.zeros((H, W, 3), dtype)
    alpha = np.zeros((H, W), dtype)
    count = np.zeros((H, W), np.int32)
    T_final = np.zeros((H, W), dtype)
    base = np.zeros((H, W, 3), dtype) if opts.decompose else None
    tex = np.zeros((H, W, 3), dtype) if opts.decompose else None
    for (st, out) in results:
        ys, xs = st["ys"], st["xs"]
        color[ys, xs] = out["color"]
        alpha[ys, xs] = out["alpha"]
        count[ys, xs] = out["count"]
        T_final[ys, xs] = out["T_final"]
        if opts.decompose:
            base[ys, xs] = out["base"]
            tex[ys, xs] = out["tex"]

    ctx = dict(
        prep=prep, tiles=[st for st, _ in results], values=values, bg=bg, dtype=dtype, opts=opts,
        fingerprint=_fingerprint(scene, cam, bg), center=center, radius=radius, keep=keep,
    )
    return RenderOutput(
        color=np.clip(color, 0, 1), color_raw=color, alpha=alpha, n_contrib=count, final_T=T_final,
        base=base, tex=tex, _ctx=ctx,
    )


def _tile_backward(st, gC, prep, values, scene: Scene, bg, cam: Camera):
    gid = st["gid"]
    K = gid.size
    if K == 0:
        return None
    g = gC[st["ys"], st["xs"]].T  # (3, P)
    hit, alpha, T_before, weight = st["hit"], st["alpha"], st["T_before"], st["weight"]
    c_base = prep["c_base"][gid]
    c_tex = st["c_tex"]

    # compositing
    cg = c_base @ g
    if c_tex is not None:
        cg = cg + np.einsum("ckp,cp->kp", c_tex, g)
    contrib = weight * cg
    after = np.empty_like(contrib)
    after[-1] = st["T_final"] * (bg @ g)
    for k in range(K - 2, -1, -1):
        after[k] = after[k + 1] + contrib[k + 1]
    dalpha = (T_before * cg - after / (1 - alpha)) * (hit & ~st["clamped"])

    G, a_tex, o = st["G"], st["a_tex"], st["o"]
    a, b = st["a"], st["b"]
    s1, s2 = prep["s1"][gid][:, None], prep["s2"][gid][:, None]
    if a_tex is None:
        dG = dalpha * o
        d_o = np.sum(dalpha * G, axis=1)
    else:
        dG = dalpha * a_tex * o
        d_o = np.sum(dalpha * a_tex * G, axis=1)
    dq = -0.5 * G * dG
    da = dq * 2 * a / s1**2
    db = dq * 2 * b / s2**2
    ds1 = np.sum(dq * a**2, axis=1) * (-2 / s1[:, 0] ** 3)
    ds2 = np.sum(dq * b**2, axis=1) * (-2 / s2[:, 0] ** 3)

    tex_grad = None
    if values is not None:
        variant = scene.variant
        table, T, Tq = values
        C = table.shape[0] // 4
        inr = st["inr"]
        P = weight.shape[1]
        gv = np.zeros((C, K, P), dtype=weight.dtype)
        if variant.has_rgb:
            gv[:3] = weight * g[:, None, :]
        ac = variant.alpha_channel
        if ac is not None:
            gv[ac] = dalpha * G * o
        gv *= inr
        fu, fv, quad = st["fu"], st["fv"], st["quad"]
        size = K * T * T * C
        base = ((np.arange(K)[:, None] * T + st["i0"]) * T + st["j0"]) * C
        off = np.array([0, T * C, C, T * C + C]) if T > 1 else np.zeros(4, np.intp)
        flat = base + (off[:, None] + np.arange(C))[:, :, None, None]
        wts = st["wq"][:, None] * gv
        tex_grad = np.bincount(flat.ravel(), wts.ravel(), minlength=size).reshape(K, T, T, C)
        if T > 1:
            du = np.einsum("ckp,ckp->kp", (quad[1] - quad[0]) * (1 - fv) + (quad[3] - quad[2]) * fv, gv)
            dv = np.einsum("ckp,ckp->kp", (quad[2] - quad[0]) * (1 - fu) + (quad[3] - quad[1]) * fu, gv)
            du *= st["u_free"]
            dv *= st["v_free"]
            m = scene.m
            k1 = (T - 1) / (2 * m * s1)
            k2 = (T - 1) / (2 * m * s2)
            da = da + du * k1
            db = db + dv * k2
            ds1 = ds1 - np.sum(du * a, axis=1) * (k1 / s1)[:, 0]
            ds2 = ds2 - np.sum(dv * b, axis=1) * (k2 / s2)[:, 0]

    # ray/plane intersection: a = t (d.r1) - w.r1 with t = (w.n)/(d.n)
    d, t, dn = st["d"], st["t"], st["dn"]
    n, r1, r2 = prep["nrm"][gid], prep["r1"][gid], prep["r2"][gid]
    w = prep["w"][gid]
    kab = (da * st["dr1"] + db * st["dr2"]) / dn
    sum_kab, sum_da, sum_db = kab.sum(axis=1), da.sum(axis=1), db.sum(axis=1)
    dmu = sum_kab[:, None] * n - sum_da[:, None] * r1 - sum_db[:, None] * r2
    dr1_g = (da * t) @ d - sum_da[:, None] * w
    dr2_g = (db * t) @ d - sum_db[:, None] * w
    dn_g = sum_kab[:, None] * w - (kab * t) @ d

    # screen-space positional gradient per pixel, in units of one pixel of
    # image-plane motion at the Gaussian's depth
    Rw = cam.rotation
    z = prep["depth"][gid]
    proj = np.stack([n @ Rw[:2].T, r1 @ Rw[:2].T, r2 @ Rw[:2].T])  # (3, K, 2)
    scale = np.stack([z / cam.fx, z / cam.fy], axis=1)
    sx = (kab * proj[0, :, 0:1] - da * proj[1, :, 0:1] - db * proj[2, :, 0:1]) * scale[:, 0:1]
    sy = (kab * proj[0, :, 1:2] - da * proj[1, :, 1:2] - db * proj[2, :, 1:2]) * scale[:, 1:2]

    return dict(
        gid=gid,
        means=dmu,
        r1=dr1_g, r2=dr2_g, n=dn_g, s1=ds1, s2=ds2, o=d_o,
        c_base=weight @ g.T,
        tex=tex_grad,
        screen_sum_of_norms=np.sum(np.hypot(sx, sy), axis=1),
        screen_vec=np.stack([sx.sum(axis=1), sy.sum(axis=1)], axis=1),
        visible=hit.any(axis=1),
    )


def render_backward(scene: Scene, cam: Camera, upstream: np.ndarray, fwd: RenderOutput) -> GradientBuffer:
    """Gradients of ``sum(upstream * fwd.color_raw)`` w.r.t. every scene parameter."""
    ctx = fwd._ctx
    if ctx is None:
        raise ValueError("forward output carries no backward context")
    if _fingerprint(scene, cam, ctx["bg"]) != ctx["fingerprint"]:
        raise ValueError("backward inputs do not match the forward pass")
    upstream = np.asarray(upstream)
    if upstream.shape != (cam.height, cam.width, 3):
        raise ValueError(f"upstream gradient shape {upstream.shape} != image shape")
    if not np.all(np.isfinite(upstream)):
        raise FloatingPointError("non-finite upstream gradient")
    prep, values, bg, dtype = ctx["prep"], ctx["values"], ctx["bg"], ctx["dtype"]
    gC = upstream.astype(dtype)
    opts = ctx["opts"]

    def work(st):
        return _tile_backward(st, gC, prep, values, scene, bg, cam)

    tiles = ctx["tiles"]
    if opts.threads > 1 and len(tiles) > 1:
        with ThreadPoolExecutor(max_workers=opts.threads) as ex:
            parts = list(ex.map(work, tiles))
    else:
        parts = [work(st) for st in tiles]

    N = prep["n"]
    acc = dict(
        means=np.zeros((N, 3)), r1=np.zeros((N, 3)), r2=np.zeros((N, 3)), n=np.zeros((N, 3)),
        s1=np.zeros(N), s2=np.zeros(N), o=np.zeros(N), c_base=np.zeros((N, 3)),
        screen_sum_of_norms=np.zeros(N), screen_vec=np.zeros((N, 2)),
    )
    tex_acc = None if values is None else np.zeros(scene.textures.shape)
    visible = np.zeros(N, bool)
    # fixed tile order keeps the reduction independent of worker count
    for part in parts:
        if part is None:
            continue
        gid = part["gid"]
        for key in acc:
            acc[key][gid] += part[key]
        if tex_acc is not None:
            tex_acc[gid] += part["tex"]
        visible[gid] |= part["visible"]

    out = GradientBuffer.zeros_like(scene)
    out.visible = visible
    out.screen_sum_of_norms = acc["screen_sum_of_norms"]
    # hypot on both statistics so a single contributing pixel gives equal values
    out.screen_norm_of_sum = np.hypot(acc["screen_vec"][:, 0], acc["screen_vec"][:, 1])
    if N == 0:
        return out

    rows = np.arange(N)
    perm = prep["perm"]
    # base colour through the clamp and the SH expansion
    dcb = np.where(prep["base_raw"] > 0, acc["c_base"], 0)
    kd = prep["basis"].shape[1]
    out.sh[:, :kd] = prep["basis"][:, :, None] * dcb[:, None, :]
    sh = scene.sh[:, :kd].astype(np.float64)
    d_basis = np.einsum("nkc,nc->nk", sh, dcb)
    d_view = np.einsum("nk,nkj->nj", d_basis, sh_basis_jacobian(prep["view"].astype(np.float64), scene.sh_degree))
    view = prep["view"].astype(np.float64)
    d_w = (d_view - view * np.sum(d_view * view, axis=1, keepdims=True)) / prep["dist"].astype(np.float64)[:, None]
    out.means = acc["means"] + d_w

    dR_axes = np.zeros((N, 3, 3))
    dR_axes[rows, perm[:, 0]] = acc["r1"]
    dR_axes[rows, perm[:, 1]] = acc["r2"]
    dR_axes[rows, perm[:, 2]] = acc["n"]
    out.quats = rotation_grad_to_quat(prep["quats"].astype(np.float64), np.swapaxes(dR_axes, 1, 2))

    ds = np.zeros((N, 3))
    ds[rows, perm[:, 0]] = acc["s1"]
    ds[rows, perm[:, 1]] = acc["s2"]
    raw = prep["raw_scales"].astype(np.float64)
    out.log_scales = np.where(raw > SCALE_FLOOR, ds * raw, 0)

    o = prep["opac"].astype(np.float64)
    out.opacity_logits = acc["o"] * o * (1 - o)

    if tex_acc is not None:
        out.textures = alpha_logit_grad(tex_acc, scene.textures.astype(np.float64), scene.variant)
    return out


def render_decomposition(scene: Scene, cam: Camera, opts: Optional[RenderOptions] = None):
    """``(base_image, tex_image)``: compositing with only the SH colour (plus the
    background seen through the remaining transmittance) and with only the
    texture colour, both at unchanged opacity. The two sum to the render."""
    opts = opts or RenderOptions()
    o2 = RenderOptions(**{**opts.__dict__, "decompose": True})
    out = render_forward(scene, cam, o2)
    return out.base, out.tex
