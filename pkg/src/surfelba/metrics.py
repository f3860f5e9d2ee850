"""Evaluation metrics: depth Rel, normal consistency, ATE, PSNR and SSIM, plus report files."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np

from .geometry import DegenerateInputError, Intrinsics, Pose, umeyama_align
from .losses import depth_normals, ssim as _ssim

PSNR_CAP = 100.0
MSE_FLOOR = 1e-10
REPORT_FIELDS = ("rel", "nc", "ate", "psnr", "ssim")


class EmptyEvaluationError(ValueError):
    """No pixel (or camera) survives the validity gate."""


@dataclass
class DepthEval:
    pred: np.ndarray
    gt: np.ndarray
    valid: Optional[np.ndarray] = None

    def mask(self) -> np.ndarray:
        gt = np.asarray(self.gt, dtype=np.float64)
        m = np.isfinite(gt) & (gt > 0) & np.isfinite(np.asarray(self.pred, dtype=np.float64))
        if self.valid is not None:
            m &= np.asarray(self.valid, dtype=bool)
        return m


@dataclass
class TrajectoryEval:
    estimated: np.ndarray
    reference: np.ndarray
    ids: Optional[Sequence[int]] = None

    @classmethod
    def from_poses(cls, estimated: Sequence[Pose], reference: Sequence[Pose]) -> "TrajectoryEval":
        return cls(np.array([p.center for p in estimated]), np.array([p.center for p in reference]),
                   list(range(len(estimated))))


def rel_error(ev: DepthEval, align: bool = True) -> float:
    """Mean absolute relative depth error in percent.

    With ``align`` the prediction is first scaled by ``median(gt) / median(pred)``
    over the valid pixels.
    """
    m = ev.mask()
    if not m.any():
        raise EmptyEvaluationError("rel_error: no valid pixels")
    pred = np.asarray(ev.pred, dtype=np.float64)[m]
    gt = np.asarray(ev.gt, dtype=np.float64)[m]
    if align:
        mp = np.median(pred)
        if mp <= 0:
            raise EmptyEvaluationError("rel_error: non-positive median prediction, cannot align scale")
        pred = pred * (np.median(gt) / mp)
    return float(np.mean(np.abs(pred - gt) / gt) * 100.0)


def gt_normals(gt_depth: np.ndarray, K: Intrinsics):
    """Camera-facing normals of the back-projected depth and the pixels where they are defined."""
    d = np.asarray(gt_depth, dtype=np.float64)
    pos = np.isfinite(d) & (d > 0)
    ok = np.zeros_like(pos)
    ok[1:-1, 1:-1] = pos[1:-1, 1:-1] & pos[1:-1, 2:] & pos[1:-1, :-2] & pos[2:, 1:-1] & pos[:-2, 1:-1]
    n, _ = depth_normals(np.where(pos, d, 0.0), K)
    ok &= np.linalg.norm(n, axis=-1) > 0
    return n, ok


def _facing(n: np.ndarray, K: Intrinsics) -> np.ndarray:
    h, w = n.shape[:2]
    xs = (np.arange(w) + 0.5 - K.cx) / K.fx
    ys = (np.arange(h) + 0.5 - K.cy) / K.fy
    gx, gy = np.meshgrid(xs, ys)
    rays = np.stack([gx, gy, np.ones((h, w))], axis=-1)
    return np.where((np.sum(n * rays, axis=-1) > 0)[..., None], -n, n)


def normal_consistency(pred_normals: np.ndarray, gt_depth: np.ndarray, K: Intrinsics,
                       valid: Optional[np.ndarray] = None) -> float:
    """Mean ``max(0, n_pred . n_gt)`` over pixels where both normals exist.

    Ground-truth normals come from central differences of the back-projected
    depth. Both normal fields are flipped to face the camera first.
    """
    pn = np.asarray(pred_normals, dtype=np.float64)
    norm = np.linalg.norm(pn, axis=-1)
    ng, ok = gt_normals(gt_depth, K)
    ok &= norm > 0
    if valid is not None:
        ok &= np.asarray(valid, dtype=bool)
    if not ok.any():
        raise EmptyEvaluationError("normal_consistency: no overlapping valid pixels")
    pn = _facing(pn / np.where(norm > 0, norm, 1)[..., None], K)
    dots = np.sum(pn * ng, axis=-1)[ok]
    return float(np.mean(np.clip(dots, 0.0, 1.0)))


def ate(traj: TrajectoryEval) -> float:
    """RMSE of camera centers after Sim3 alignment of the estimate onto the reference."""
    est = np.asarray(traj.estimated, dtype=np.float64).reshape(-1, 3)
    ref = np.asarray(traj.reference, dtype=np.float64).reshape(-1, 3)
    if len(est) != len(ref):
        raise ValueError(f"trajectory lengths differ: {len(est)} vs {len(ref)}")
    if len(est) < 3:
        raise DegenerateInputError(f"ATE needs at least 3 cameras, got {len(est)}")
    sim = umeyama_align(est, ref, with_scale=True)
    diff = sim.apply(est) - ref
    return float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"image size mismatch: {pred.shape} vs {gt.shape}")
    mse = float(np.mean((pred - gt) ** 2))
    if mse < MSE_FLOOR:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def psnr_ssim(pred: np.ndarray, gt: np.ndarray):
    """``(psnr_db, ssim)`` for images in ``[0, 1]``; SSIM matches the training loss."""
    return psnr(pred, gt), _ssim(pred, gt)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def scene_report(per_view: Sequence[dict], ate_value: Optional[float], align: bool, gate: str) -> dict:
    """Aggregate per-view entries (``rel``, ``nc``, ``psnr``, ``ssim``) into one scene record."""
    return {
        "rel": _mean(v.get("rel") for v in per_view),
        "nc": _mean(v.get("nc") for v in per_view),
        "ate": ate_value,
        "psnr": _mean(v.get("psnr") for v in per_view),
        "ssim": _mean(v.get("ssim") for v in per_view),
        "align_scale": bool(align),
        "valid_gate": gate,
        "per_view": list(per_view),
    }


def write_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def read_report(path) -> dict:
    return json.loads(Path(path).read_text())


def write_aggregate_csv(reports: Dict[str, dict], path) -> None:
    """One row per scene plus a ``mean`` row, in the column order of ``REPORT_FIELDS``."""
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(("scene",) + REPORT_FIELDS)
        for name in sorted(reports):
            wr.writerow([name] + ["" if reports[name].get(k) is None else repr(reports[name][k])
                                  for k in REPORT_FIELDS])
        means = [_mean(r.get(k) for r in reports.values()) for k in REPORT_FIELDS]
        wr.writerow(["mean"] + ["" if m is None else repr(m) for m in means])
