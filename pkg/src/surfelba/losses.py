"""Training objectives with hand-written adjoints.

Each loss returns its value together with the gradient of that value w.r.t.
the rendered buffers it reads (and, for the correspondence term, w.r.t. the
camera poses). Those adjoints are fed to :func:`surfelba.render.render_backward`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.ndimage import correlate1d

from .geometry import Intrinsics, Pose
from .render import RenderAdjoint, RenderTarget, _rotation_tangent_grad

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


class NonFiniteLossError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - size // 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


_WINDOW = _gaussian_window()


def _blur(img: np.ndarray) -> np.ndarray:
    # zero padded "same" filtering over the two spatial axes; self-adjoint since the window is symmetric
    out = correlate1d(img, _WINDOW, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _WINDOW, axis=1, mode="constant", cval=0.0)


def _as_hwc(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img[..., None] if img.ndim == 2 else img


def ssim(pred: np.ndarray, gt: np.ndarray, return_grad: bool = False):
    """Mean SSIM over pixels and channels with an 11x11 Gaussian window (sigma 1.5).

    With ``return_grad`` the gradient w.r.t. ``pred`` is returned as well.
    """
    x = _as_hwc(pred)
    y = _as_hwc(gt)
    if x.shape != y.shape:
        raise ValueError(f"image size mismatch: {x.shape} vs {y.shape}")
    mx, my = _blur(x), _blur(y)
    exx, eyy, exy = _blur(x * x), _blur(y * y), _blur(x * y)
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * (exy - mx * my) + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = (exx - mx * mx) + (eyy - my * my) + SSIM_C2
    smap = (a1 * a2) / (b1 * b2)
    value = float(smap.mean())
    if not return_grad:
        return value
    g = 1.0 / smap.size
    # grouped so each pair cancels exactly when pred == gt
    d_mx = g * smap * ((2 * my / a1 - 2 * mx / b1) + (2 * mx / b2 - 2 * my / a2))
    d_exx = g * (-smap / b2)
    d_exy = g * (2 * smap / a2)
    grad = _blur(d_mx) + 2 * x * _blur(d_exx) + y * _blur(d_exy)
    return value, grad.reshape(np.shape(pred))


# ---------------------------------------------------------------------------
# Photometric and geometric terms
# ---------------------------------------------------------------------------


def photometric(pred: np.ndarray, gt: np.ndarray, lam: float = 0.2):
    """``(1 - lam) * L1 + lam * (1 - SSIM)``.

    Returns:
        ``(loss, l1, ssim_value, d_pred)``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"image size mismatch: {pred.shape} vs {gt.shape}")
    diff = pred - gt
    l1 = float(np.abs(diff).mean())
    s, d_s = ssim(pred, gt, return_grad=True)
    loss = (1 - lam) * l1 + lam * (1 - s)
    grad = (1 - lam) * np.sign(diff) / diff.size - lam * d_s
    return loss, l1, s, grad


def depth_normals(depth: np.ndarray, K: Intrinsics):
    """Camera-facing unit normals from central differences of back-projected depth.

    Returns:
        ``(normals, aux)`` where normals is ``(H, W, 3)`` with zeros on the
        border, and ``aux`` holds intermediates for :func:`depth_normals_backward`.
    """
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    xs = (np.arange(w) + 0.5 - K.cx) / K.fx
    ys = (np.arange(h) + 0.5 - K.cy) / K.fy
    gx, gy = np.meshgrid(xs, ys)
    rays = np.stack([gx, gy, np.ones((h, w))], axis=-1)
    P = depth[..., None] * rays
    dx = np.zeros_like(P)
    dy = np.zeros_like(P)
    dx[1:-1, 1:-1] = P[1:-1, 2:] - P[1:-1, :-2]
    dy[1:-1, 1:-1] = P[2:, 1:-1] - P[:-2, 1:-1]
    m = np.cross(dx, dy)
    norm = np.linalg.norm(m, axis=-1)
    safe = np.maximum(norm, 1e-20)
    sign = np.where(np.sum(m * rays, axis=-1) > 0, -1.0, 1.0)
    n = sign[..., None] * m / safe[..., None]
    n[norm <= 1e-20] = 0.0
    return n, (rays, dx, dy, m, safe, sign)


def depth_normals_backward(aux, d_n: np.ndarray) -> np.ndarray:
    rays, dx, dy, m, safe, sign = aux
    mh = m / safe[..., None]
    dmh = sign[..., None] * d_n
    dm = (dmh - mh * np.sum(mh * dmh, axis=-1, keepdims=True)) / safe[..., None]
    d_dx = np.cross(dy, dm)
    d_dy = np.cross(dm, dx)
    dP = np.zeros_like(rays)
    dP[1:-1, 2:] += d_dx[1:-1, 1:-1]
    dP[1:-1, :-2] -= d_dx[1:-1, 1:-1]
    dP[2:, 1:-1] += d_dy[1:-1, 1:-1]
    dP[:-2, 1:-1] -= d_dy[1:-1, 1:-1]
    return np.sum(dP * rays, axis=-1)


def normal_mask(acc: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    cov = acc >= threshold
    mask = np.zeros_like(cov)
    mask[1:-1, 1:-1] = (cov[1:-1, 1:-1] & cov[1:-1, 2:] & cov[1:-1, :-2] & cov[2:, 1:-1] & cov[:-2, 1:-1])
    return mask


def reg_geometric(target: RenderTarget, K: Intrinsics, lambda_dist: float = 1000.0, lambda_normal: float = 0.05):
    """Depth distortion plus splat-normal / depth-normal agreement.

    Returns:
        ``(loss, distortion_term, normal_term, RenderAdjoint)`` where the two
        terms are unweighted means.
    """
    dist_mean = float(np.mean(target.distortion))
    d_dist = np.full(target.distortion.shape, lambda_dist / target.distortion.size)
    nd, aux = depth_normals(target.depth, K)
    mask = normal_mask(target.acc)
    count = int(mask.sum())
    if count:
        dots = np.sum(target.normal * nd, axis=-1)
        normal_term = float(np.sum((1 - dots)[mask]) / count)
        d_dots = np.where(mask, -lambda_normal / count, 0.0)
        d_normal = d_dots[..., None] * nd
        d_depth = depth_normals_backward(aux, d_dots[..., None] * target.normal)
    else:
        normal_term = 0.0
        d_normal = np.zeros_like(target.normal, dtype=np.float64)
        d_depth = np.zeros_like(target.depth, dtype=np.float64)
    loss = lambda_dist * dist_mean + lambda_normal * normal_term
    return loss, dist_mean, normal_term, RenderAdjoint(distortion=d_dist, normal=d_normal, depth=d_depth)


def variance_loss(target: RenderTarget):
    """Mean over pixels and channels of the clamped color variance ``E[c^2] - E[c]^2``.

    Returns:
        ``(loss, RenderAdjoint)``; adjoints flow through both moments.
    """
    fg = np.asarray(target.color_fg, dtype=np.float64)
    var = np.asarray(target.color2, dtype=np.float64) - fg**2
    keep = var > 0
    loss = float(np.where(keep, var, 0.0).mean())
    g = 1.0 / var.size
    return loss, RenderAdjoint(color2=np.where(keep, g, 0.0), color_fg=np.where(keep, -2 * g * fg, 0.0))


def lambda_var_schedule(t: float, T: float) -> float:
    """Cosine decay from 1 at ``t = 0`` to 0 at ``t = T``; clamps to 0 beyond ``T``."""
    if T <= 0:
        raise ValueError("total steps must be positive")
    if t >= T:
        return 0.0
    if t <= 0:
        return 1.0
    return 0.5 * (1.0 + math.cos(math.pi * t / T))


# ---------------------------------------------------------------------------
# Correspondences
# ---------------------------------------------------------------------------


@dataclass
class Correspondences:
    """Matches between two views; pixels normalized to ``[0, 1]^2``."""

    view_n: int
    view_m: int
    p_n: np.ndarray
    p_m: np.ndarray
    weight: np.ndarray

    def __post_init__(self):
        if self.view_n == self.view_m:
            raise ValueError("correspondences must join two distinct views")
        self.p_n = np.asarray(self.p_n, dtype=np.float64).reshape(-1, 2)
        self.p_m = np.asarray(self.p_m, dtype=np.float64).reshape(-1, 2)
        self.weight = np.asarray(self.weight, dtype=np.float64).reshape(-1)
        if not (len(self.p_n) == len(self.p_m) == len(self.weight)):
            raise ValueError("correspondence arrays differ in length")

    def __len__(self) -> int:
        return len(self.weight)


def huber(r: np.ndarray, delta: float) -> np.ndarray:
    r = np.asarray(r)
    return np.where(r <= delta, 0.5 * r * r, delta * (r - 0.5 * delta))


def _bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray):
    h, w = img.shape
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(x).astype(int), w - 2) if w > 1 else np.zeros(len(x), int)
    y0 = np.minimum(np.floor(y).astype(int), h - 2) if h > 1 else np.zeros(len(y), int)
    fx = x - x0
    fy = y - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    idx = [(y0, x0), (y0, x1), (y1, x0), (y1, x1)]
    wts = [(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy]
    val = sum(wt * img[iy, ix] for (iy, ix), wt in zip(idx, wts))
    return val, idx, wts


@dataclass
class CorrespondenceResult:
    loss: float
    depth_adjoints: Dict[int, np.ndarray]
    pose_grads: np.ndarray
    used: int
    behind: int
    dropped: int


def correspondence_loss(corrs: Sequence[Correspondences], depths: Sequence[np.ndarray],
                        accs: Sequence[np.ndarray], poses: Sequence[Pose], K: Intrinsics,
                        delta: Optional[float] = None, sampling: str = "bilinear") -> CorrespondenceResult:
    """Weighted Huber reprojection error of matched pixels through rendered depth.

    Each ``p_n`` is lifted with the view-``n`` expected depth, moved into view
    ``m`` and compared with ``p_m``. The loss is the mean over used pairs.
    """
    delta = 1.0 / max(K.width, K.height) if delta is None else delta
    n_views = len(poses)
    pose_grads = np.zeros((n_views, 6))
    depth_adj: Dict[int, np.ndarray] = {}
    dR = [np.zeros((3, 3)) for _ in range(n_views)]
    dT = [np.zeros(3) for _ in range(n_views)]
    items = []
    used = behind = dropped = 0
    total = 0.0
    for c in corrs:
        n, m = c.view_n, c.view_m
        depth_n = np.asarray(depths[n], dtype=np.float64)
        acc_n = np.asarray(accs[n], dtype=np.float64)
        xs = c.p_n[:, 0] * K.width - 0.5
        ys = c.p_n[:, 1] * K.height - 0.5
        if sampling == "nearest":
            xs, ys = np.round(xs), np.round(ys)
        d, idx, wts = _bilinear(depth_n, xs, ys)
        a, _, _ = _bilinear(acc_n, xs, ys)
        ok = (a >= 0.5) & (d > 0)
        dropped += int(np.sum(~ok))
        ray = np.stack([(c.p_n[:, 0] * K.width - K.cx) / K.fx, (c.p_n[:, 1] * K.height - K.cy) / K.fy,
                        np.ones(len(c))], axis=1)
        Rn, tn = poses[n].R, poses[n].t
        Rm, tm = poses[m].R, poses[m].t
        Xc = d[:, None] * ray
        Xw = (Xc - tn) @ Rn
        Xm = Xw @ Rm.T + tm
        Z = Xm[:, 2]
        front = Z > 1e-8
        behind += int(np.sum(ok & ~front))
        ok &= front
        Zs = np.where(ok, Z, 1.0)
        proj = np.stack([(K.fx * Xm[:, 0] / Zs + K.cx) / K.width, (K.fy * Xm[:, 1] / Zs + K.cy) / K.height], axis=1)
        r = c.p_m - proj
        rn = np.linalg.norm(r, axis=1)
        lvals = c.weight * huber(rn, delta)
        total += float(np.sum(lvals[ok]))
        used += int(ok.sum())
        items.append((c, ok, r, rn, ray, Xc, Xw, Xm, Zs, idx, wts))
    if used == 0:
        return CorrespondenceResult(0.0, depth_adj, pose_grads, 0, behind, dropped)
    scale = 1.0 / used
    for c, ok, r, rn, ray, Xc, Xw, Xm, Zs, idx, wts in items:
        n, m = c.view_n, c.view_m
        rsafe = np.maximum(rn, 1e-300)
        drho = np.where((rn <= delta)[:, None], r, delta * r / rsafe[:, None])
        g_r = np.where(ok[:, None], scale * c.weight[:, None] * drho, 0.0)
        g_proj = -g_r
        gx = g_proj[:, 0] * K.fx / K.width
        gy = g_proj[:, 1] * K.fy / K.height
        dXm = np.stack([gx / Zs, gy / Zs, -(gx * Xm[:, 0] + gy * Xm[:, 1]) / Zs**2], axis=1)
        dXm[~ok] = 0.0
        Rn, tn = poses[n].R, poses[n].t
        Rm = poses[m].R
        dR[m] += dXm.T @ Xw
        dT[m] += dXm.sum(axis=0)
        dXw = dXm @ Rm
        dXc = dXw @ Rn.T
        dR[n] += (Xc - tn).T @ dXw
        dT[n] += -dXw.sum(axis=0) @ Rn.T
        dd = np.sum(dXc * ray, axis=1)
        adj = depth_adj.setdefault(n, np.zeros(np.shape(depths[n])))
        for (iy, ix), wt in zip(idx, wts):
            np.add.at(adj, (iy, ix), wt * dd)
    for v in range(n_views):
        pose_grads[v, :3] = _rotation_tangent_grad(dR[v], poses[v].R)
        pose_grads[v, 3:] = dT[v]
    return CorrespondenceResult(total * scale, depth_adj, pose_grads, used, behind, dropped)


# ---------------------------------------------------------------------------
# Total objective
# ---------------------------------------------------------------------------


@dataclass
class LossWeights:
    photo: float = 1.0
    corr: float = 5e-5
    ssim_mix: float = 0.2
    distortion: float = 1000.0
    normal: float = 0.05
    var_enabled: bool = True
    corr_enabled: bool = True


@dataclass
class LossReport:
    l1: float = 0.0
    ssim: float = 0.0
    reg_distortion: float = 0.0
    reg_normal: float = 0.0
    photo: float = 0.0
    corr: float = 0.0
    var: float = 0.0
    total: float = 0.0
    weights: Dict[str, float] = field(default_factory=dict)

    def row(self) -> Dict[str, float]:
        d = asdict(self)
        w = d.pop("weights")
        d.update({f"w_{k}": v for k, v in w.items()})
        return d


def total_loss(photo: float, corr: float, var: float, weights: LossWeights, step: int, total_steps: int,
               components: Optional[Dict[str, float]] = None) -> LossReport:
    """Combine the component losses with the photometric, correspondence and scheduled variance weights.

    ``photo`` already contains the geometric regularizer.

    Raises:
        NonFiniteLossError: any component is NaN or infinite.
    """
    components = dict(components or {})
    for name, value in [("photo", photo), ("corr", corr), ("var", var)] + list(components.items()):
        if not math.isfinite(value):
            raise NonFiniteLossError(f"loss component {name} is {value}")
    lam_var = lambda_var_schedule(step, total_steps) if weights.var_enabled else 0.0
    lam_corr = weights.corr if weights.corr_enabled else 0.0
    total = weights.photo * photo + lam_corr * corr + lam_var * var
    return LossReport(
        l1=components.get("l1", 0.0),
        ssim=components.get("ssim", 0.0),
        reg_distortion=components.get("reg_distortion", 0.0),
        reg_normal=components.get("reg_normal", 0.0),
        photo=photo,
        corr=corr,
        var=var,
        total=total,
        weights={"photo": weights.photo, "corr": lam_corr, "var": lam_var},
    )
