"""Joint optimization of surfels and camera poses, and test-time pose refinement."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .geometry import Intrinsics, Pose, pose_retract
from .losses import (Correspondences, LossReport, LossWeights, NonFiniteLossError, correspondence_loss,
                     lambda_var_schedule, photometric, reg_geometric, total_loss, variance_loss)
from .render import RenderAdjoint, RenderConfig, render, render_backward
from .surfels import SurfelCloud

log = logging.getLogger(__name__)

SURFEL_GROUPS = ("centers", "quats", "log_scales", "opacity_raw", "sh")


class TrainingDivergedError(FloatingPointError):
    """Raised when the objective or its gradient becomes non-finite.

    ``last_good`` holds ``(cloud, poses, step)`` from the last finite step.
    """

    def __init__(self, message: str, last_good=None):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def subset(self, mask: np.ndarray) -> None:
        """Drop moments of pruned surfels."""
        for d in (self.m, self.v):
            for k in SURFEL_GROUPS:
                if k in d:
                    d[k] = d[k][mask]


def adam_step(params: Dict[str, object], grads: Dict[str, np.ndarray], state: AdamState,
              lrs: Dict[str, float]) -> Dict[str, object]:
    """One bias-corrected Adam update per parameter group.

    ``params["poses"]``, when present, is a list of :class:`Pose`; its
    gradient is ``(V, 6)`` in the retraction tangent and the update is applied
    by retraction. ``params["quats"]`` is renormalized after the raw update.
    Groups without a learning rate are left untouched.

    Raises:
        FloatingPointError: a gradient is non-finite.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in group {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = dict(params)
    for name, g in grads.items():
        lr = lrs.get(name)
        if lr is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None or m.shape != g.shape:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = -lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if name == "poses":
            out[name] = [pose_retract(p, u) for p, u in zip(params[name], update)]
        else:
            new = params[name] + update
            if name == "quats":
                new = new / np.linalg.norm(new, axis=-1, keepdims=True)
            out[name] = new
    return out


def exp_schedule(lr0: float, lr1: float, t: int, T: int) -> float:
    """Log-linear interpolation from ``lr0`` at step 0 to ``lr1`` at step ``T - 1``."""
    if T <= 1:
        return lr0
    r = min(max(t / (T - 1), 0.0), 1.0)
    return math.exp((1 - r) * math.log(lr0) + r * math.log(lr1))


def scene_extent(poses: Sequence[Pose]) -> float:
    """Radius of the camera-center cloud, padded by 10%; 1.0 for a single camera."""
    c = np.stack([p.center for p in poses])
    r = float(np.max(np.linalg.norm(c - c.mean(axis=0), axis=1))) * 1.1
    return r if r > 0 else 1.0


@dataclass
class TrainConfig:
    iters: int = 1000
    lr_center: float = 1.6e-4
    lr_center_final: float = 1.6e-6
    lr_quat: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-3
    # higher-order SH coefficients use lr_sh divided by this
    sh_rest_div: float = 20.0
    lr_pose: float = 1e-3
    pose_decay: float = 0.01
    optimize_poses: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    photo: float = 1.0
    corr: float = 5e-5
    ssim_mix: float = 0.2
    distortion: float = 1000.0
    normal: float = 0.05
    var_enabled: bool = True
    corr_enabled: bool = True
    tile_size: int = 16
    dtype: str = "float32"
    background: tuple = (0.0, 0.0, 0.0)
    checkpoint_every: int = 0
    prune: bool = False
    prune_threshold: float = 0.005
    prune_every: int = 100
    seed: int = 0
    # None -> scene_extent of the initial cameras
    extent: Optional[float] = None

    def validate(self) -> None:
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        for f in fields(self):
            if f.name.startswith("lr_") and getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be > 0")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(photo=self.photo, corr=self.corr, ssim_mix=self.ssim_mix, distortion=self.distortion,
                           normal=self.normal, var_enabled=self.var_enabled, corr_enabled=self.corr_enabled)

    @property
    def render_config(self) -> RenderConfig:
        return RenderConfig(tile_size=self.tile_size, dtype=self.dtype, background=tuple(self.background))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["background"] = list(d["background"])
        return d


@dataclass
class TrainingScene:
    cloud: SurfelCloud
    poses: List[Pose]
    K: Intrinsics
    images: List[np.ndarray]
    correspondences: List[Correspondences] = field(default_factory=list)


@dataclass
class TrainResult:
    cloud: SurfelCloud
    poses: List[Pose]
    history: List[LossReport]
    steps: int


def _scaled(adj: RenderAdjoint, k: float) -> RenderAdjoint:
    return RenderAdjoint(**{f.name: None if getattr(adj, f.name) is None else k * getattr(adj, f.name)
                            for f in fields(adj)})


def evaluate(cloud: SurfelCloud, poses: Sequence[Pose], K: Intrinsics, images: Sequence[np.ndarray],
             corrs: Sequence[Correspondences], weights: LossWeights, step: int, total_steps: int,
             rcfg: RenderConfig, want_grad: bool = True):
    """Objective and gradients for all views at one step.

    Returns:
        ``(report, grads, targets)`` where ``grads`` maps surfel groups and
        ``"poses"`` to arrays (None when ``want_grad`` is false).
    """
    V = len(poses)
    targets = [render(cloud, p, K, rcfg) for p in poses]
    photo_sum = var_sum = 0.0
    comps = {"l1": 0.0, "ssim": 0.0, "reg_distortion": 0.0, "reg_normal": 0.0}
    adjs = []
    for tgt, img in zip(targets, images):
        lp, l1, s, g_color = photometric(tgt.color, img, weights.ssim_mix)
        lr, dist, nterm, adj_reg = reg_geometric(tgt, K, weights.distortion, weights.normal)
        lv, adj_var = variance_loss(tgt)
        photo_sum += lp + lr
        var_sum += lv
        comps["l1"] += l1 / V
        comps["ssim"] += s / V
        comps["reg_distortion"] += dist / V
        comps["reg_normal"] += nterm / V
        adjs.append((RenderAdjoint(color=g_color) + adj_reg, adj_var))
    use_corr = weights.corr_enabled and len(corrs) > 0
    cres = None
    corr_val = 0.0
    if use_corr:
        cres = correspondence_loss(corrs, [t.depth for t in targets], [t.acc for t in targets], poses, K)
        corr_val = cres.loss
    report = total_loss(photo_sum / V, corr_val, var_sum / V, weights, step, total_steps, comps)
    if not want_grad:
        return report, None, targets
    lam_var = report.weights["var"]
    lam_corr = report.weights["corr"]
    grads = {k: np.zeros_like(getattr(cloud, k)) for k in SURFEL_GROUPS}
    grads["poses"] = np.zeros((V, 6))
    for v, (tgt, (adj_photo, adj_var)) in enumerate(zip(targets, adjs)):
        adj = _scaled(adj_photo, weights.photo / V)
        if lam_var:
            adj = adj + _scaled(adj_var, lam_var / V)
        if cres is not None and lam_corr and v in cres.depth_adjoints:
            adj = adj + RenderAdjoint(depth=lam_corr * cres.depth_adjoints[v])
        gb = render_backward(cloud, poses[v], K, tgt, adj)
        grads["centers"] += gb.d_center
        grads["quats"] += gb.d_quat
        grads["log_scales"] += gb.d_scale
        grads["opacity_raw"] += gb.d_opacity
        grads["sh"] += gb.d_sh
        grads["poses"][v] += gb.d_pose[0]
    if cres is not None and lam_corr:
        grads["poses"] += lam_corr * cres.pose_grads
    return report, grads, targets


def _group_lrs(cfg: TrainConfig, step: int, extent: float, n_sh: int) -> Dict[str, object]:
    lr_sh = np.full((1, n_sh, 1), cfg.lr_sh / cfg.sh_rest_div)
    lr_sh[0, 0, 0] = cfg.lr_sh
    lrs = {
        "centers": exp_schedule(cfg.lr_center * extent, cfg.lr_center_final * extent, step, cfg.iters),
        "quats": cfg.lr_quat,
        "log_scales": cfg.lr_scale,
        "opacity_raw": cfg.lr_opacity,
        "sh": lr_sh,
    }
    if cfg.optimize_poses:
        lrs["poses"] = exp_schedule(cfg.lr_pose, cfg.lr_pose * cfg.pose_decay, step, cfg.iters)
    return lrs


LOG_COLUMNS = ["step", "l1", "ssim", "reg_distortion", "reg_normal", "photo", "corr", "var", "total",
               "w_photo", "w_corr", "w_var", "lr_center", "lr_pose", "num_surfels"]


def reconstruct(scene: TrainingScene, cfg: TrainConfig, out_dir=None, start_step: int = 0,
                callback: Optional[Callable[[int, LossReport, SurfelCloud, List[Pose]], None]] = None) -> TrainResult:
    """Run ``cfg.iters - start_step`` joint steps over all training views.

    When ``out_dir`` is given, writes ``train_log.csv`` and, every
    ``cfg.checkpoint_every`` steps, ``ckpt_NNNNNN.ply``. Resuming passes a
    loaded checkpoint as ``scene`` and the step it was written at; Adam
    moments restart from zero.

    Raises:
        TrainingDivergedError: the objective or a gradient turned non-finite;
            the last good state is attached and, with ``out_dir``, written to
            ``ckpt_last_good.ply``.
    """
    from .scene_io import write_checkpoint

    cfg.validate()
    if len(scene.images) != len(scene.poses):
        raise ValueError(f"{len(scene.images)} images for {len(scene.poses)} poses")
    weights = cfg.weights
    rcfg = cfg.render_config
    extent = cfg.extent if cfg.extent is not None else scene_extent(scene.poses)
    state = AdamState(cfg.beta1, cfg.beta2, cfg.eps)
    cloud = scene.cloud.copy()
    poses = list(scene.poses)
    history: List[LossReport] = []
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "train_log.csv", "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
    good = (cloud.copy(), list(poses), start_step)
    try:
        for step in range(start_step, cfg.iters):
            try:
                report, grads, _ = evaluate(cloud, poses, scene.K, scene.images, scene.correspondences,
                                            weights, step, cfg.iters, rcfg)
            except (NonFiniteLossError, FloatingPointError, ValueError) as exc:
                if isinstance(exc, ValueError) and "non-finite" not in str(exc):
                    raise
                if out is not None:
                    write_checkpoint(good[0], good[1], out / "ckpt_last_good.ply", [scene.K] * len(poses))
                raise TrainingDivergedError(f"diverged at step {step}: {exc}", good) from exc
            lrs = _group_lrs(cfg, step, extent, cloud.sh.shape[1])
            history.append(report)
            if writer is not None:
                row = {k: v for k, v in report.row().items() if k in LOG_COLUMNS}
                row.update(step=step, lr_center=lrs["centers"], lr_pose=lrs.get("poses", 0.0), num_surfels=len(cloud))
                writer.writerow(row)
            if callback is not None:
                callback(step, report, cloud, poses)
            good = (cloud.copy(), list(poses), step)
            params = {k: getattr(cloud, k) for k in SURFEL_GROUPS}
            params["poses"] = poses
            try:
                new = adam_step(params, grads, state, lrs)
            except FloatingPointError as exc:
                if out is not None:
                    write_checkpoint(good[0], good[1], out / "ckpt_last_good.ply", [scene.K] * len(poses))
                raise TrainingDivergedError(f"diverged at step {step}: {exc}", good) from exc
            for k in SURFEL_GROUPS:
                setattr(cloud, k, new[k])
            poses = new["poses"]
            if cfg.prune and (step + 1) % cfg.prune_every == 0:
                keep = cloud.opacity >= cfg.prune_threshold
                if not np.all(keep) and np.any(keep):
                    cloud = cloud.subset(keep)
                    state.subset(keep)
            if out is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                write_checkpoint(cloud, poses, out / f"ckpt_{step + 1:06d}.ply", [scene.K] * len(poses))
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(cloud, poses, history, cfg.iters - start_step)


def final_loss(scene: TrainingScene, cloud: SurfelCloud, poses: Sequence[Pose], cfg: TrainConfig) -> LossReport:
    """Objective at the given state, with the schedule evaluated at the last step."""
    report, _, _ = evaluate(cloud, poses, scene.K, scene.images, scene.correspondences, cfg.weights,
                            cfg.iters, cfg.iters, cfg.render_config, want_grad=False)
    return report


def test_time_camera_opt(cloud: SurfelCloud, images: Sequence[np.ndarray], init_poses: Sequence[Pose],
                         K: Intrinsics, iters: int = 1000, lr: float = 1e-3, decay: float = 0.01,
                         rcfg: Optional[RenderConfig] = None):
    """Refine test-view poses under an L1 photometric loss with the surfels frozen.

    All views are optimized jointly. ``cloud`` is never written to.

    Returns:
        ``(poses, losses)`` with the mean L1 per step.
    """
    if len(images) != len(init_poses) or not images:
        raise ValueError("need one image per initial pose and at least one view")
    rcfg = rcfg or RenderConfig()
    poses = list(init_poses)
    state = AdamState()
    losses = []
    V = len(poses)
    for step in range(iters):
        g = np.zeros((V, 6))
        total = 0.0
        for v, (p, img) in enumerate(zip(poses, images)):
            tgt = render(cloud, p, K, rcfg)
            diff = np.asarray(tgt.color, dtype=np.float64) - img
            total += float(np.abs(diff).mean()) / V
            adj = RenderAdjoint(color=np.sign(diff) / (diff.size * V))
            g[v] = render_backward(cloud, p, K, tgt, adj).d_pose[0]
        losses.append(total)
        poses = adam_step({"poses": poses}, {"poses": g}, state,
                          {"poses": exp_schedule(lr, lr * decay, step, iters)})["poses"]
    return poses, losses
