"""Seeding surfels from globally aligned pointmaps.

Positions come straight from confident pointmap pixels, orientations from PCA
normals over k nearest neighbors, scales from local point spacing and DC color
from the source image.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import sh as shmod
from .geometry import DegenerateInputError, matrix_to_quat
from .pointmap_align import AlignedScene
from .surfels import SurfelCloud, logit


class DegenerateNeighborhoodError(DegenerateInputError):
    pass


@dataclass
class InitConfig:
    k: int = 20
    scale_gain: float = 1.0
    opacity: float = 0.8
    sh_degree: int = 3
    # None -> median confidence of the scene
    min_conf: Optional[float] = None
    # keep every stride-th pixel along each axis
    stride: int = 1


def knn(points: np.ndarray, k: int) -> np.ndarray:
    """Indices ``(N, k)`` of the k nearest neighbors of each point, self excluded."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if k < 1 or k >= n:
        raise ValueError(f"knn needs 1 <= k < number of points, got k={k} for {n} points")
    _, idx = cKDTree(points).query(points, k=k + 1)
    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        row = idx[i][idx[i] != i]
        out[i] = row[:k]
    return out


def pca_normal(neighborhood: np.ndarray, view_point: Optional[np.ndarray] = None, rel_tol: float = 1e-12):
    """Normal of a point neighborhood as the least-variance principal axis.

    Args:
        neighborhood: ``(k, 3)`` points, ``k >= 3``.
        view_point: when given, the normal is flipped to face it, and an
            eigenvalue tie between the two smallest axes is broken toward it.

    Returns:
        ``(normal, eigenvalues)`` with eigenvalues sorted descending.

    Raises:
        DegenerateNeighborhoodError: fewer than 3 points, or all points
            coincident or collinear.
    """
    pts = np.asarray(neighborhood, dtype=np.float64)
    if len(pts) < 3:
        raise DegenerateNeighborhoodError("PCA normal needs at least 3 points")
    centroid = pts.mean(axis=0)
    d = pts - centroid
    C = d.T @ d / len(pts)
    lam, vec = np.linalg.eigh(C)
    if lam[2] <= 0 or lam[1] <= rel_tol * lam[2]:
        raise DegenerateNeighborhoodError("neighborhood is coincident or collinear")
    n = vec[:, 0]
    if view_point is not None:
        ray = np.asarray(view_point, dtype=np.float64) - centroid
        if lam[1] - lam[0] <= 1e-9 * lam[2] and abs(vec[:, 1] @ ray) > abs(n @ ray):
            n = vec[:, 1]
        if n @ ray < 0:
            n = -n
    return n / np.linalg.norm(n), lam[::-1].copy()


def tangent_frame(n: np.ndarray):
    """Right-handed orthonormal frame ``[u, v, n]`` and its quaternion.

    Uses ``a = (-n_y, n_x, 0)`` as the helper direction, falling back to
    ``(1, 0, 0)`` when ``n`` is (anti)parallel to the z axis.
    """
    n = np.asarray(n, dtype=np.float64)
    n = n / np.linalg.norm(n)
    a = np.array([-n[1], n[0], 0.0])
    if np.linalg.norm(a) < 1e-6:
        a = np.array([1.0, 0.0, 0.0])
    u = np.cross(n, a)
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    R = np.stack([u, v, n], axis=1)
    return R, matrix_to_quat(R)


def _tangent_frames(normals: np.ndarray) -> np.ndarray:
    n = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    a = np.stack([-n[:, 1], n[:, 0], np.zeros(len(n))], axis=1)
    small = np.linalg.norm(a, axis=1) < 1e-6
    a[small] = [1.0, 0.0, 0.0]
    u = np.cross(n, a)
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    v = np.cross(n, u)
    return np.stack([u, v, n], axis=2)


def _batched_normals(points: np.ndarray, nbrs: np.ndarray, view_points: np.ndarray) -> np.ndarray:
    hood = points[nbrs]
    d = hood - hood.mean(axis=1, keepdims=True)
    C = np.einsum("nki,nkj->nij", d, d) / hood.shape[1]
    lam, vec = np.linalg.eigh(C)
    normals = vec[:, :, 0].copy()
    ray = view_points - hood.mean(axis=1)
    tie = lam[:, 1] - lam[:, 0] <= 1e-9 * lam[:, 2]
    alt = np.abs(np.sum(vec[:, :, 1] * ray, axis=1)) > np.abs(np.sum(normals * ray, axis=1))
    swap = tie & alt
    normals[swap] = vec[swap, :, 1]
    degenerate = (lam[:, 2] <= 0) | (lam[:, 1] <= 1e-12 * lam[:, 2])
    fallback = ray / np.maximum(np.linalg.norm(ray, axis=1, keepdims=True), 1e-300)
    normals[degenerate] = fallback[degenerate]
    flip = np.sum(normals * ray, axis=1) < 0
    normals[flip] *= -1
    return normals / np.linalg.norm(normals, axis=1, keepdims=True)


def init_cloud(aligned: AlignedScene, images: Sequence[np.ndarray], cfg: Optional[InitConfig] = None) -> SurfelCloud:
    """One surfel per confident aligned-pointmap pixel.

    Requires ``aligned.poses`` (camera centers orient the normals).

    Raises:
        ValueError: no pixel passes the confidence threshold, or sizes disagree.
    """
    cfg = cfg or InitConfig()
    if not aligned.poses:
        raise ValueError("aligned scene has no camera poses; run estimate_pose_and_focal first")
    if len(images) != len(aligned.chi):
        raise ValueError(f"{len(images)} images for {len(aligned.chi)} aligned views")
    all_conf = np.concatenate([c.reshape(-1) for c in aligned.conf])
    min_conf = float(np.median(all_conf[all_conf > 0])) if cfg.min_conf is None and np.any(all_conf > 0) \
        else (cfg.min_conf or 0.0)
    pts, cols, src, cams = [], [], [], []
    for v, (chi, conf, img) in enumerate(zip(aligned.chi, aligned.conf, images)):
        img = np.asarray(img, dtype=np.float64)
        if img.shape[:2] != chi.shape[:2]:
            raise ValueError(f"view {v}: image {img.shape[:2]} and pointmap {chi.shape[:2]} differ in size")
        sel = np.zeros(conf.shape, dtype=bool)
        sel[:: cfg.stride, :: cfg.stride] = True
        sel &= (conf >= min_conf) & (conf > 0) & np.all(np.isfinite(chi), axis=-1)
        pts.append(chi[sel])
        cols.append(img[sel][:, :3])
        src.append(np.full(int(sel.sum()), v))
        cams.append(np.repeat(aligned.poses[v].center[None], int(sel.sum()), axis=0))
    points = np.concatenate(pts)
    if len(points) == 0:
        raise ValueError(f"no pointmap pixel reaches confidence {min_conf}; cloud would be empty")
    colors = np.concatenate(cols)
    source = np.concatenate(src)
    view_points = np.concatenate(cams)
    n = len(points)
    if n < 4:
        raise ValueError(f"only {n} confident points; need at least 4 to estimate normals and spacing")
    k = min(cfg.k, n - 1)
    nbrs = knn(points, k)
    normals = _batched_normals(points, nbrs, view_points)
    frames = _tangent_frames(normals)
    k3 = min(3, n - 1)
    d3, _ = cKDTree(points).query(points, k=k3 + 1)
    spacing = d3[:, 1:].mean(axis=1)
    spacing = np.where(spacing > 0, spacing, np.median(spacing[spacing > 0]) if np.any(spacing > 0) else 1e-3)
    scale = cfg.scale_gain * spacing
    sh = np.zeros((n, shmod.num_coeffs(cfg.sh_degree), 3))
    sh[:, 0, :] = shmod.rgb_to_dc(colors)
    return SurfelCloud(
        centers=points,
        quats=matrix_to_quat(frames),
        log_scales=np.log(np.stack([scale, scale], axis=1)),
        opacity_raw=np.full(n, float(logit(cfg.opacity))),
        sh=sh,
        source_view=source,
    )
