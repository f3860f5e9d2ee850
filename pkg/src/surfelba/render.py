"""Differentiable tile-based rasterizer for 2D Gaussian surfels.

Every pixel ray is intersected exactly with each candidate surfel plane. The
resulting fragments are composited front to back in order of surfel center depth into color,
second color moment, depth, normal, accumulated weight and depth distortion
buffers in one pass. :func:`render_backward` propagates adjoints of all of these
buffers to every surfel parameter and to the camera pose tangent.

Work is batched over tiles: each tile gathers the surfels whose conservative
screen-space bounds overlap it, then evaluates all (pixel, surfel) pairs of the
tile at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import sh as shmod
from .geometry import Intrinsics, Pose, pixel_rays, quat_to_matrix, quat_to_matrix_backward
from .surfels import SurfelCloud, sigmoid

ACC_EPS = 1e-6


@dataclass
class RenderConfig:
    tile_size: int = 16
    background: tuple = (0.0, 0.0, 0.0)
    early_stop: bool = True
    stop_transmittance: float = 1.0 / 255.0
    min_alpha: float = 1.0 / 255.0
    # squared Mahalanobis radius kept, exp(-9/2) is the 3-sigma cutoff
    cutoff_rho: float = 9.0
    low_pass: bool = True
    filter_inv_square: float = 2.0
    near: float = 0.01
    # distortion is measured on m(t) = far / (far - near) * (1 - near / t)
    dist_near: float = 0.2
    dist_far: float = 100.0
    dtype: str = "float32"

    def map_depth(self, t):
        """Depth warp used by the distortion buffer, and its derivative."""
        A = self.dist_far / (self.dist_far - self.dist_near)
        with np.errstate(divide="ignore", invalid="ignore"):
            return A * (1 - self.dist_near / t), A * self.dist_near / (t * t)


@dataclass
class Fragment:
    index: int
    t: float
    weight: float
    alpha: float
    u: float = 0.0
    v: float = 0.0


@dataclass
class RenderTarget:
    color: np.ndarray
    color2: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    acc: np.ndarray
    distortion: np.ndarray
    depth_sum: np.ndarray
    transmittance: np.ndarray
    counts: np.ndarray
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ctx: Optional["_RenderContext"] = field(default=None, repr=False)

    @property
    def color_fg(self) -> np.ndarray:
        """Composited splat color without the background term."""
        return self.color - self.transmittance[..., None] * self.background

    @property
    def variance(self) -> np.ndarray:
        """Per-channel color variance ``E[c^2] - E[c]^2``, clamped at zero."""
        return np.maximum(self.color2 - self.color_fg**2, 0.0)


@dataclass
class RenderAdjoint:
    """Upstream gradients, one per output buffer; ``None`` means zero."""

    color: Optional[np.ndarray] = None
    color2: Optional[np.ndarray] = None
    depth: Optional[np.ndarray] = None
    normal: Optional[np.ndarray] = None
    acc: Optional[np.ndarray] = None
    distortion: Optional[np.ndarray] = None
    # adjoint of the color buffer without the background term
    color_fg: Optional[np.ndarray] = None

    def __add__(self, other: "RenderAdjoint") -> "RenderAdjoint":
        out = {}
        for name in ("color", "color2", "depth", "normal", "acc", "distortion", "color_fg"):
            a, b = getattr(self, name), getattr(other, name)
            out[name] = b if a is None else (a if b is None else a + b)
        return RenderAdjoint(**out)


@dataclass
class GradientBundle:
    d_center: np.ndarray
    d_quat: np.ndarray
    d_scale: np.ndarray
    d_opacity: np.ndarray
    d_sh: np.ndarray
    d_pose: np.ndarray

    @classmethod
    def zeros(cls, n: int, n_sh: int, n_views: int = 1) -> "GradientBundle":
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 2)), np.zeros(n),
                   np.zeros((n, n_sh, 3)), np.zeros((n_views, 6)))

    def add_surfels(self, other: "GradientBundle") -> None:
        self.d_center += other.d_center
        self.d_quat += other.d_quat
        self.d_scale += other.d_scale
        self.d_opacity += other.d_opacity
        self.d_sh += other.d_sh

    def scaled(self, k: float) -> "GradientBundle":
        return GradientBundle(self.d_center * k, self.d_quat * k, self.d_scale * k,
                              self.d_opacity * k, self.d_sh * k, self.d_pose * k)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in
                   (self.d_center, self.d_quat, self.d_scale, self.d_opacity, self.d_sh, self.d_pose))


# ---------------------------------------------------------------------------
# Single ray / surfel intersection
# ---------------------------------------------------------------------------


def intersect(center, frame, scale, origin, direction, cutoff_rho: float = 9.0) -> Optional[Fragment]:
    """Intersect one ray with one surfel plane.

    Args:
        center: surfel center (3,).
        frame: 3x3 matrix with columns ``[u, v, n]``.
        scale: tangent-plane standard deviations (2,).
        origin, direction: the ray; ``direction`` should be unit length.

    Returns:
        A :class:`Fragment` whose ``t`` is the ray parameter of the hit and
        ``weight`` the Gaussian value ``G``, or ``None`` when the ray is parallel
        to the plane, the hit is behind the origin, or ``G`` is below the cutoff.
    """
    center = np.asarray(center, dtype=np.float64)
    frame = np.asarray(frame, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    n = frame[:, 2]
    denom = float(n @ direction)
    if abs(denom) < 1e-12:
        return None
    t = float(n @ (center - origin)) / denom
    if t <= 0:
        return None
    offset = origin + t * direction - center
    u = float(offset @ frame[:, 0]) / scale[0]
    v = float(offset @ frame[:, 1]) / scale[1]
    rho = u * u + v * v
    if rho > cutoff_rho:
        return None
    g = float(np.exp(-0.5 * rho))
    return Fragment(index=-1, t=t, weight=g, alpha=g, u=u, v=v)


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------


@dataclass
class _Surfels:
    """Per-surfel camera-space quantities for one view (float64)."""

    Rq: np.ndarray
    cam: np.ndarray
    axes: np.ndarray
    sign: np.ndarray
    scales: np.ndarray
    alpha: np.ndarray
    dirs: np.ndarray
    dist: np.ndarray
    rgb: np.ndarray
    screen: np.ndarray
    visible: np.ndarray


@dataclass
class _RenderContext:
    cfg: RenderConfig
    surf: _Surfels
    tiles_pix: np.ndarray
    tiles_valid: np.ndarray
    rays: np.ndarray
    sid: np.ndarray
    inc: np.ndarray
    a: np.ndarray
    T: np.ndarray
    w: np.ndarray
    G: np.ndarray
    depth: np.ndarray
    use3: np.ndarray
    u: np.ndarray
    v: np.ndarray
    t3: np.ndarray
    dU: np.ndarray
    dV: np.ndarray
    nd: np.ndarray
    px: np.ndarray
    py: np.ndarray
    dist_w: np.ndarray
    dist_s: np.ndarray


def _preprocess(cloud: SurfelCloud, pose: Pose, K: Intrinsics, cfg: RenderConfig) -> _Surfels:
    Rc = pose.R
    Rq = quat_to_matrix(cloud.quats)
    cam = cloud.centers @ Rc.T + pose.t
    axes = np.einsum("ij,njk->nik", Rc, Rq)
    normal = axes[:, :, 2]
    sign = np.where(np.sum(normal * cam, axis=1) > 0, -1.0, 1.0)
    diff = cloud.centers - pose.center
    dist = np.linalg.norm(diff, axis=1)
    dirs = diff / np.maximum(dist, 1e-12)[:, None]
    rgb = shmod.evaluate_sh(cloud.sh, dirs)
    z = cam[:, 2]
    visible = z > cfg.near
    with np.errstate(divide="ignore", invalid="ignore"):
        screen = np.stack([K.fx * cam[:, 0] / z + K.cx, K.fy * cam[:, 1] / z + K.cy], axis=1)
    return _Surfels(Rq, cam, axes, sign, np.exp(cloud.log_scales), sigmoid(cloud.opacity_raw),
                    dirs, dist, rgb, screen, visible)


def _screen_bounds(surf: _Surfels, K: Intrinsics, cfg: RenderConfig) -> np.ndarray:
    """Conservative pixel-coordinate bounds ``(N, 4) = (x0, y0, x1, y1)`` of each surfel footprint."""
    n = len(surf.cam)
    r = np.sqrt(cfg.cutoff_rho)
    U = surf.axes[:, :, 0] * (r * surf.scales[:, :1])
    V = surf.axes[:, :, 1] * (r * surf.scales[:, 1:])
    corners = surf.cam[:, None, :] + np.stack([U + V, U - V, -U + V, -U - V], axis=1)
    z = corners[..., 2]
    in_front = np.all(z > cfg.near, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        xs = K.fx * corners[..., 0] / z + K.cx
        ys = K.fy * corners[..., 1] / z + K.cy
    bounds = np.empty((n, 4))
    bounds[:, 0] = np.where(in_front, xs.min(axis=1), -np.inf)
    bounds[:, 1] = np.where(in_front, ys.min(axis=1), -np.inf)
    bounds[:, 2] = np.where(in_front, xs.max(axis=1), np.inf)
    bounds[:, 3] = np.where(in_front, ys.max(axis=1), np.inf)
    if cfg.low_pass:
        r2 = np.sqrt(cfg.cutoff_rho / cfg.filter_inv_square)
        sx, sy = surf.screen[:, 0], surf.screen[:, 1]
        bounds[:, 0] = np.minimum(bounds[:, 0], sx - r2)
        bounds[:, 1] = np.minimum(bounds[:, 1], sy - r2)
        bounds[:, 2] = np.maximum(bounds[:, 2], sx + r2)
        bounds[:, 3] = np.maximum(bounds[:, 3], sy + r2)
    margin = 1e-3
    bounds[:, :2] -= margin
    bounds[:, 2:] += margin
    bounds[~surf.visible] = [np.inf, np.inf, -np.inf, -np.inf]
    return bounds


def _tiles(K: Intrinsics, ts: int):
    ntx = -(-K.width // ts)
    nty = -(-K.height // ts)
    ly, lx = np.meshgrid(np.arange(ts), np.arange(ts), indexing="ij")
    ox = (np.arange(ntx) * ts)[None, :].repeat(nty, 0).reshape(-1)
    oy = (np.arange(nty) * ts)[:, None].repeat(ntx, 1).reshape(-1)
    px = ox[:, None] + lx.reshape(1, -1)
    py = oy[:, None] + ly.reshape(1, -1)
    valid = (px < K.width) & (py < K.height)
    return ox, oy, px, py, valid


def _assign(bounds: np.ndarray, ox, oy, ts: int, K: Intrinsics):
    # pixel centers of tile i span [ox + 0.5, min(ox + ts, W) - 0.5]
    x0 = ox + 0.5
    x1 = np.minimum(ox + ts, K.width) - 0.5
    y0 = oy + 0.5
    y1 = np.minimum(oy + ts, K.height) - 0.5
    hit = ((bounds[None, :, 2] >= x0[:, None]) & (bounds[None, :, 0] <= x1[:, None])
           & (bounds[None, :, 3] >= y0[:, None]) & (bounds[None, :, 1] <= y1[:, None]))
    counts = hit.sum(axis=1)
    m = max(int(counts.max()) if len(counts) else 0, 1)
    n = bounds.shape[0]
    cand = np.full((len(ox), m), n, dtype=np.int64)
    for i in range(len(ox)):
        ids = np.flatnonzero(hit[i])
        cand[i, : len(ids)] = ids
    return cand


def _pad(arr: np.ndarray, fill=0.0) -> np.ndarray:
    pad = np.full((1,) + arr.shape[1:], fill, dtype=arr.dtype)
    return np.concatenate([arr, pad], axis=0)


def _to_tiles(img: np.ndarray, px, py, valid) -> np.ndarray:
    """Gather ``(H, W, ...)`` image values into ``(T, P, ...)`` tile layout, zeros outside the image."""
    h, w = img.shape[:2]
    out = img[np.clip(py, 0, h - 1), np.clip(px, 0, w - 1)]
    mask = valid.reshape(valid.shape + (1,) * (out.ndim - 2))
    return np.where(mask, out, 0)


def _from_tiles(vals: np.ndarray, px, py, valid, h: int, w: int) -> np.ndarray:
    out = np.zeros((h, w) + vals.shape[2:], dtype=vals.dtype)
    out[py[valid], px[valid]] = vals[valid]
    return out


def _pairwise_distortion(w: np.ndarray, t: np.ndarray, inc: np.ndarray):
    """``sum_ij w_i w_j |t_i - t_j|`` per pixel, plus ``sum_j w_j |t_i - t_j|`` and ``sum_j w_j sign(t_i - t_j)``.

    Included fragments form a prefix of each pixel's list, so only the first
    ``max(inc.sum(-1))`` slots take part.
    """
    k = max(int(inc.sum(axis=-1).max()), 1)
    wk, tk = w[..., :k], t[..., :k]
    diff = tk[..., :, None] - tk[..., None, :]
    pw = np.zeros_like(w)
    ps = np.zeros_like(w)
    pw[..., :k] = np.einsum("...ij,...j->...i", np.abs(diff), wk)
    ps[..., :k] = np.einsum("...ij,...j->...i", np.sign(diff), wk)
    return np.sum(w * pw, axis=-1), pw, ps


def render(cloud: SurfelCloud, pose: Pose, K: Intrinsics, cfg: Optional[RenderConfig] = None) -> RenderTarget:
    """Render every buffer for one camera.

    Returns:
        A :class:`RenderTarget`; its ``ctx`` keeps the forward state needed by
        :func:`render_backward`.
    """
    cfg = cfg or RenderConfig()
    if len(cloud) == 0:
        raise ValueError("cannot render an empty surfel cloud")
    dt = np.dtype(cfg.dtype)
    surf = _preprocess(cloud, pose, K, cfg)
    ts = int(cfg.tile_size)
    ox, oy, tpx, tpy, tvalid = _tiles(K, ts)
    bounds = _screen_bounds(surf, K, cfg)
    cand = _assign(bounds, ox, oy, ts, K)
    # front-to-back by center depth (float64, ties by index), shared by every pixel of a tile
    zc = np.append(surf.cam[:, 2], np.inf)
    cand = np.take_along_axis(cand, np.lexsort((cand, zc[cand]), axis=-1), axis=-1)

    rays_img = pixel_rays(K, dt)
    rays = _to_tiles(rays_img, tpx, tpy, tvalid)
    px = (tpx + 0.5).astype(dt)
    py = (tpy + 0.5).astype(dt)

    def gather(a, fill=0.0):
        return _pad(a.astype(dt), fill)[cand]

    cam = gather(surf.cam)
    U = gather(surf.axes[:, :, 0])
    V = gather(surf.axes[:, :, 1])
    Nn = gather(surf.axes[:, :, 2])
    su = gather(surf.scales[:, 0], 1.0)
    sv = gather(surf.scales[:, 1], 1.0)
    alpha = gather(surf.alpha)
    sx = gather(surf.screen[:, 0])
    sy = gather(surf.screen[:, 1])
    cvalid = cand < len(cloud)

    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        dU = rays @ U.transpose(0, 2, 1)
        dV = rays @ V.transpose(0, 2, 1)
        nd = rays @ Nn.transpose(0, 2, 1)
        cU = np.sum(cam * U, axis=-1)[:, None, :]
        cV = np.sum(cam * V, axis=-1)[:, None, :]
        nc = np.sum(cam * Nn, axis=-1)[:, None, :]
        t3 = nc / nd
        valid3 = np.isfinite(t3) & (t3 > cfg.near)
        u = (t3 * dU - cU) / su[:, None, :]
        v = (t3 * dV - cV) / sv[:, None, :]
        rho3 = np.where(valid3, u * u + v * v, np.inf)
        if cfg.low_pass:
            rho2 = dt.type(cfg.filter_inv_square) * ((px[:, :, None] - sx[:, None, :]) ** 2
                                                     + (py[:, :, None] - sy[:, None, :]) ** 2)
        else:
            rho2 = np.full_like(rho3, np.inf)
        use3 = rho3 <= rho2
        rho = np.where(use3, rho3, rho2)
        depth = np.where(use3, t3, cam[:, None, :, 2])
        G = np.exp(-0.5 * rho)
        a = alpha[:, None, :] * G
        valid = (cvalid[:, None, :] & tvalid[:, :, None] & (rho <= cfg.cutoff_rho)
                 & (a >= cfg.min_alpha) & (depth > cfg.near))
    order = np.argsort(~valid, axis=-1, kind="stable")
    mv = max(int(valid.sum(axis=-1).max()), 1)
    order = order[:, :, :mv]

    def srt(x):
        return np.take_along_axis(x, order, axis=-1)

    valid_s = srt(valid)
    a_s = np.where(valid_s, srt(a), 0)
    depth_s = np.where(valid_s, srt(depth), 0)
    T_incl = np.cumprod(1 - a_s, axis=-1)
    T = np.concatenate([np.ones_like(T_incl[..., :1]), T_incl[..., :-1]], axis=-1)
    inc = valid_s & (T >= cfg.stop_transmittance) if cfg.early_stop else valid_s
    a_e = np.where(inc, a_s, 0)
    depth_e = np.where(inc, depth_s, 0)
    w = a_e * T
    T_final = np.cumprod(1 - a_e, axis=-1)[..., -1]

    sid = np.where(inc, np.take_along_axis(np.broadcast_to(cand[:, None, :], order.shape[:2] + cand.shape[1:]),
                                           order, axis=-1), len(cloud))
    rgb = _pad(surf.rgb.astype(dt))[sid]
    nrm = _pad((surf.axes[:, :, 2] * surf.sign[:, None]).astype(dt))[sid]

    color = np.einsum("tpk,tpkc->tpc", w, rgb)
    color2 = np.einsum("tpk,tpkc->tpc", w, rgb * rgb)
    dsum = np.sum(w * depth_e, axis=-1)
    normal = np.einsum("tpk,tpkc->tpc", w, nrm)
    acc = np.sum(w, axis=-1)
    tm = np.where(inc, cfg.map_depth(np.where(inc, depth_e, 1))[0], 0).astype(dt)
    distortion, dist_w, dist_s = _pairwise_distortion(w, tm, inc)
    bg = np.asarray(cfg.background, dtype=dt)
    color_bg = color + T_final[..., None] * bg
    counts = inc.sum(axis=-1)

    h, wd_ = K.height, K.width

    def img(x):
        return _from_tiles(x, tpx, tpy, tvalid, h, wd_)

    acc_img = img(acc)
    dsum_img = img(dsum)
    ctx = _RenderContext(
        cfg=cfg, surf=surf, tiles_pix=np.stack([tpx, tpy], -1), tiles_valid=tvalid, rays=rays,
        sid=sid, inc=inc, a=a_e, T=T, w=w, G=srt(G), depth=depth_e, use3=srt(use3), u=srt(u), v=srt(v),
        t3=srt(t3), dU=srt(dU), dV=srt(dV), nd=srt(nd), px=px, py=py, dist_w=dist_w, dist_s=dist_s,
    )
    return RenderTarget(
        color=img(color_bg),
        color2=img(color2),
        depth=dsum_img / np.maximum(acc_img, dt.type(ACC_EPS)),
        normal=img(normal),
        acc=acc_img,
        distortion=img(distortion),
        depth_sum=dsum_img,
        transmittance=img(T_final),
        counts=img(counts),
        background=bg,
        ctx=ctx,
    )


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------


def _scatter(sid: np.ndarray, vals: np.ndarray, n: int) -> np.ndarray:
    """Sum ``vals`` (``sid.shape + (C,)`` or ``sid.shape``) into ``n`` surfel slots in fixed order."""
    flat = sid.reshape(-1)
    if vals.ndim == sid.ndim:
        return np.bincount(flat, weights=vals.reshape(-1).astype(np.float64), minlength=n + 1)[:n]
    c = vals.shape[-1]
    v = vals.reshape(-1, c).astype(np.float64)
    return np.stack([np.bincount(flat, weights=v[:, j], minlength=n + 1)[:n] for j in range(c)], axis=1)


def _rotation_tangent_grad(dR: np.ndarray, R: np.ndarray) -> np.ndarray:
    A = dR @ R.T
    return np.array([A[2, 1] - A[1, 2], A[0, 2] - A[2, 0], A[1, 0] - A[0, 1]])


def render_backward(cloud: SurfelCloud, pose: Pose, K: Intrinsics, target: RenderTarget,
                    upstream: RenderAdjoint) -> GradientBundle:
    """Exact gradients of ``<upstream, buffers>`` w.r.t. surfel parameters and the pose tangent.

    Surfel gradients are w.r.t. the stored parameterization (raw quaternion,
    log-scale, opacity logit). The pose gradient is w.r.t. the tangent
    ``(omega, dt)`` of :func:`surfelba.geometry.pose_retract` at zero.
    """
    ctx = target.ctx
    if ctx is None:
        raise ValueError("render target carries no forward state; render with the same cloud first")
    cfg = ctx.cfg
    surf = ctx.surf
    n = len(cloud)
    n_sh = cloud.sh.shape[1]
    h, w_img = K.height, K.width
    tpx, tpy = ctx.tiles_pix[..., 0], ctx.tiles_pix[..., 1]
    tvalid = ctx.tiles_valid
    f64 = np.float64

    def tiles(x, shape_tail=()):
        if x is None:
            return np.zeros(tpx.shape + shape_tail)
        x = np.asarray(x, dtype=f64)
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite upstream adjoint")
        return _to_tiles(x, tpx, tpy, tvalid)

    gC = tiles(upstream.color, (3,))
    gCf = tiles(upstream.color_fg, (3,))
    gC2 = tiles(upstream.color2, (3,))
    gD = tiles(upstream.depth)
    gN = tiles(upstream.normal, (3,))
    gA = tiles(upstream.acc)
    gX = tiles(upstream.distortion)

    w = ctx.w.astype(f64)
    a = ctx.a.astype(f64)
    T = ctx.T.astype(f64)
    depth = ctx.depth.astype(f64)
    inc = ctx.inc
    sid = ctx.sid
    acc = w.sum(axis=-1)
    dsum = (w * depth).sum(axis=-1)
    acc_c = np.maximum(acc, ACC_EPS)
    g_dsum = gD / acc_c
    g_acc = gA + np.where(acc > ACC_EPS, -gD * dsum / acc_c**2, 0.0)

    rgb = _pad(surf.rgb)[sid]
    nrm = _pad(surf.axes[:, :, 2] * surf.sign[:, None])[sid]
    d_dist_dw = 2 * ctx.dist_w.astype(f64)
    g = (np.einsum("tpkc,tpc->tpk", rgb, gC + gCf) + np.einsum("tpkc,tpc->tpk", rgb * rgb, gC2)
         + depth * g_dsum[..., None] + np.einsum("tpkc,tpc->tpk", nrm, gN)
         + g_acc[..., None] + gX[..., None] * d_dist_dw)

    bg = np.asarray(cfg.background, dtype=f64)
    S = gC @ bg
    dA = np.zeros_like(a)
    for k in range(a.shape[-1] - 1, -1, -1):
        dA[..., k] = T[..., k] * (g[..., k] - S)
        S = a[..., k] * g[..., k] + (1 - a[..., k]) * S
    dA = np.where(inc, dA, 0.0)

    d_rgb_pair = w[..., None] * ((gC + gCf)[:, :, None, :] + 2 * gC2[:, :, None, :] * rgb)
    dmap = np.where(inc, cfg.map_depth(np.where(inc, depth, 1.0))[1], 0.0)
    d_depth_pair = w * g_dsum[..., None] + gX[..., None] * 2 * w * ctx.dist_s.astype(f64) * dmap
    d_nrm_pair = w[..., None] * gN[:, :, None, :]

    G = ctx.G.astype(f64)
    alpha_pair = _pad(surf.alpha)[sid]
    d_alpha_pair = dA * G
    dG = dA * alpha_pair
    drho = -0.5 * G * dG

    use3 = ctx.use3 & inc
    use2 = ~ctx.use3 & inc
    u = np.where(use3, ctx.u.astype(f64), 0.0)
    v = np.where(use3, ctx.v.astype(f64), 0.0)
    t3 = np.where(use3, ctx.t3.astype(f64), 0.0)
    dUp = np.where(use3, ctx.dU.astype(f64), 0.0)
    dVp = np.where(use3, ctx.dV.astype(f64), 0.0)
    nd = np.where(use3, ctx.nd.astype(f64), 1.0)
    su = _pad(surf.scales[:, 0], 1.0)[sid]
    sv = _pad(surf.scales[:, 1], 1.0)[sid]

    du = np.where(use3, 2 * u * drho, 0.0)
    dv = np.where(use3, 2 * v * drho, 0.0)
    d_logsu = -u * du
    d_logsv = -v * dv
    dt_tot = np.where(use3, d_depth_pair, 0.0) + du * dUp / su + dv * dVp / sv
    a_dU = du * t3 / su
    a_cU = -du / su
    a_dV = dv * t3 / sv
    a_cV = -dv / sv
    dnc = dt_tot / nd
    dnd = -dt_tot * t3 / nd

    fis = cfg.filter_inv_square
    sxy = _pad(surf.screen)[sid]
    px = ctx.px.astype(f64)[:, :, None]
    py = ctx.py.astype(f64)[:, :, None]
    dsx = np.where(use2, -2 * fis * (px - sxy[..., 0]) * drho, 0.0)
    dsy = np.where(use2, -2 * fis * (py - sxy[..., 1]) * drho, 0.0)
    dcz = np.where(use2, d_depth_pair, 0.0)

    rays = ctx.rays.astype(f64)[:, :, None, :]
    sc = lambda vals: _scatter(sid, vals, n)  # noqa: E731
    s_alpha = sc(d_alpha_pair)
    s_logs = np.stack([sc(d_logsu), sc(d_logsv)], axis=1)
    s_rgb = sc(d_rgb_pair)
    s_acU, s_acV, s_dnc = sc(a_cU), sc(a_cV), sc(dnc)
    v_U = sc(a_dU[..., None] * rays)
    v_V = sc(a_dV[..., None] * rays)
    v_N = sc(dnd[..., None] * rays)
    v_nrm = sc(d_nrm_pair)
    s_dsx, s_dsy, s_dcz = sc(dsx), sc(dsy), sc(dcz)

    cam = surf.cam
    axes = surf.axes
    z = np.where(surf.visible, cam[:, 2], 1.0)
    d_axes = np.empty((n, 3, 3))
    d_axes[:, :, 0] = v_U + s_acU[:, None] * cam
    d_axes[:, :, 1] = v_V + s_acV[:, None] * cam
    d_axes[:, :, 2] = v_N + s_dnc[:, None] * cam + surf.sign[:, None] * v_nrm
    d_cam = (s_acU[:, None] * axes[:, :, 0] + s_acV[:, None] * axes[:, :, 1] + s_dnc[:, None] * axes[:, :, 2])
    d_cam[:, 0] += K.fx / z * s_dsx
    d_cam[:, 1] += K.fy / z * s_dsy
    d_cam[:, 2] += -(K.fx * cam[:, 0] * s_dsx + K.fy * cam[:, 1] * s_dsy) / z**2 + s_dcz

    Rc = pose.R
    tc = pose.t
    d_center = d_cam @ Rc
    dRc = d_cam.T @ cloud.centers
    dt_pose = d_cam.sum(axis=0)
    dRq = np.einsum("ji,njk->nik", Rc, d_axes)
    dRc += np.einsum("nik,njk->ij", d_axes, surf.Rq)
    d_quat = quat_to_matrix_backward(cloud.quats, dRq)

    d_sh, d_dirs = shmod.evaluate_sh_backward(cloud.sh, surf.dirs, s_rgb)
    d_diff = (d_dirs - surf.dirs * np.sum(surf.dirs * d_dirs, axis=1, keepdims=True)) / np.maximum(surf.dist, 1e-12)[:, None]
    d_center += d_diff
    dC = -d_diff.sum(axis=0)
    dt_pose += -Rc @ dC
    dRc += -np.outer(tc, dC)

    alpha = surf.alpha
    d_pose = np.concatenate([_rotation_tangent_grad(dRc, Rc), dt_pose])[None, :]
    return GradientBundle(
        d_center=d_center,
        d_quat=d_quat,
        d_scale=s_logs,
        d_opacity=s_alpha * alpha * (1 - alpha),
        d_sh=d_sh.reshape(n, n_sh, 3),
        d_pose=d_pose,
    )


# ---------------------------------------------------------------------------
# Reference compositor
# ---------------------------------------------------------------------------


def render_reference(cloud: SurfelCloud, pose: Pose, K: Intrinsics, cfg: Optional[RenderConfig] = None) -> dict:
    """Straightforward per-pixel loop over all surfels, float64 throughout.

    No tiling, no culling, no vectorization over pairs. Intended as an oracle
    for :func:`render`; returns a dict of buffers with the same names.
    """
    cfg = cfg or RenderConfig()
    n = len(cloud)
    Rc = pose.R
    cam_center = pose.center
    frames = quat_to_matrix(cloud.quats)
    scales = np.exp(cloud.log_scales)
    alphas = 1.0 / (1.0 + np.exp(-cloud.opacity_raw))
    cam_pts = cloud.centers @ Rc.T + pose.t
    dirs = cloud.centers - cam_center
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    colors = shmod.evaluate_sh(cloud.sh, dirs)
    bg = np.asarray(cfg.background, dtype=np.float64)
    out = {k: np.zeros((K.height, K.width, 3)) for k in ("color", "color2", "normal")}
    for k in ("depth_sum", "acc", "distortion", "transmittance", "depth"):
        out[k] = np.zeros((K.height, K.width))
    for y in range(K.height):
        for x in range(K.width):
            ray_cam = np.array([(x + 0.5 - K.cx) / K.fx, (y + 0.5 - K.cy) / K.fy, 1.0])
            ray_len = np.linalg.norm(ray_cam)
            ray_world = Rc.T @ (ray_cam / ray_len)
            frags = []
            for i in range(n):
                zc = cam_pts[i, 2]
                if not zc > cfg.near:
                    continue
                hit = intersect(cloud.centers[i], frames[i], scales[i], cam_center, ray_world, cutoff_rho=np.inf)
                rho3 = np.inf
                depth3 = None
                if hit is not None:
                    depth3 = hit.t / ray_len
                    if depth3 > cfg.near:
                        rho3 = hit.u**2 + hit.v**2
                rho2 = np.inf
                if cfg.low_pass:
                    sx = K.fx * cam_pts[i, 0] / zc + K.cx
                    sy = K.fy * cam_pts[i, 1] / zc + K.cy
                    rho2 = cfg.filter_inv_square * ((x + 0.5 - sx) ** 2 + (y + 0.5 - sy) ** 2)
                if rho3 <= rho2:
                    rho, depth = rho3, depth3
                else:
                    rho, depth = rho2, zc
                if rho > cfg.cutoff_rho:
                    continue
                a = alphas[i] * np.exp(-0.5 * rho)
                if a < cfg.min_alpha or not depth > cfg.near:
                    continue
                frags.append((depth, i, a))
            frags.sort(key=lambda f: (cam_pts[f[1], 2], f[1]))
            T = 1.0
            kept = []
            for depth, i, a in frags:
                if cfg.early_stop and T < cfg.stop_transmittance:
                    break
                wgt = a * T
                n_world = frames[i][:, 2]
                n_cam = Rc @ n_world
                if n_cam @ cam_pts[i] > 0:
                    n_cam = -n_cam
                out["color"][y, x] += wgt * colors[i]
                out["color2"][y, x] += wgt * colors[i] ** 2
                out["normal"][y, x] += wgt * n_cam
                out["depth_sum"][y, x] += wgt * depth
                out["acc"][y, x] += wgt
                kept.append((wgt, cfg.map_depth(depth)[0]))
                T *= 1 - a
            dist = 0.0
            for wi, ti in kept:
                for wj, tj in kept:
                    dist += wi * wj * abs(ti - tj)
            out["distortion"][y, x] = dist
            out["transmittance"][y, x] = T
            out["color"][y, x] += T * bg
    out["depth"] = out["depth_sum"] / np.maximum(out["acc"], ACC_EPS)
    return out
