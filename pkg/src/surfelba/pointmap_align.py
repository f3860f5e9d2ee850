"""Global alignment of pairwise pointmaps into one world frame.

Each edge ``(n, m)`` carries two pointmaps expressed in the camera frame of
view ``n`` (with an edge-specific, unknown scale). The aligner looks for one
similarity transform per edge and one world pointmap per view so that every
edge's transformed pointmaps agree with the world pointmaps, weighted by
confidence.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import (DegenerateInputError, Intrinsics, Pose, Sim3, matrix_to_quat, so3_exp,
                       umeyama_align)

log = logging.getLogger(__name__)

CHARBONNIER_EPS = 1e-6


class DisconnectedGraphError(ValueError):
    def __init__(self, components: List[List[int]]):
        self.components = components
        super().__init__(f"view graph is disconnected; components: {components}")


class AlignmentDivergedError(RuntimeError):
    pass


@dataclass
class PointMapPair:
    """Pointmaps and confidences for one image pair, both in the frame of view ``n``."""

    n: int
    m: int
    pts_n: np.ndarray
    pts_m: np.ndarray
    conf_n: np.ndarray
    conf_m: np.ndarray

    def __post_init__(self):
        self.pts_n = np.asarray(self.pts_n, dtype=np.float64)
        self.pts_m = np.asarray(self.pts_m, dtype=np.float64)
        if self.pts_n.shape != self.pts_m.shape or self.pts_n.ndim != 3 or self.pts_n.shape[-1] != 3:
            raise ValueError(f"edge ({self.n}, {self.m}): pointmaps must share an H x W x 3 shape")
        hw = self.pts_n.shape[:2]
        self.conf_n = self._clean_conf(self.conf_n, self.pts_n, hw)
        self.conf_m = self._clean_conf(self.conf_m, self.pts_m, hw)

    @staticmethod
    def _clean_conf(conf, pts, hw):
        conf = np.asarray(conf, dtype=np.float64)
        if conf.shape != hw:
            raise ValueError(f"confidence map shape {conf.shape} does not match pointmap {hw}")
        if np.any(conf < 0):
            raise ValueError("confidences must be non-negative")
        return np.where(np.all(np.isfinite(pts), axis=-1) & np.isfinite(conf), conf, 0.0)

    @property
    def edge(self) -> Tuple[int, int]:
        return (self.n, self.m)

    def view_data(self, v: int):
        """Pointmap and confidence of view ``v`` in this edge."""
        if v == self.n:
            return self.pts_n, self.conf_n
        if v == self.m:
            return self.pts_m, self.conf_m
        raise KeyError(v)


@dataclass
class ViewGraph:
    num_views: int
    edges: List[PointMapPair]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.edges[0].pts_n.shape[:2]


@dataclass
class AlignedScene:
    chi: List[np.ndarray]
    conf: List[np.ndarray]
    per_edge: List[Sim3]
    poses: List[Pose] = field(default_factory=list)
    focal: float = 0.0
    focals: List[float] = field(default_factory=list)
    objective_history: List[float] = field(default_factory=list)


def _components(num_views: int, edges: Sequence[Tuple[int, int]]) -> List[List[int]]:
    parent = list(range(num_views))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b in edges:
        parent[find(a)] = find(b)
    groups: Dict[int, List[int]] = defaultdict(list)
    for v in range(num_views):
        groups[find(v)].append(v)
    return sorted(groups.values())


def build_graph(pairs: Sequence[PointMapPair], num_views: int) -> ViewGraph:
    """Validate edges and check that they connect every view."""
    if not pairs:
        raise ValueError("no pointmap pairs given")
    shape = pairs[0].pts_n.shape
    for p in pairs:
        if not (0 <= p.n < num_views and 0 <= p.m < num_views) or p.n == p.m:
            raise ValueError(f"edge {p.edge} references invalid views for {num_views} views")
        if p.pts_n.shape != shape:
            raise ValueError(f"edge {p.edge} has pointmap shape {p.pts_n.shape}, expected {shape}")
    comps = _components(num_views, [p.edge for p in pairs])
    if len(comps) > 1:
        raise DisconnectedGraphError(comps)
    return ViewGraph(num_views, list(pairs))


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def _edge_weight(p: PointMapPair) -> float:
    return float(p.conf_n.sum() + p.conf_m.sum())


def _spanning_init(graph: ViewGraph) -> Tuple[List[Sim3], List[np.ndarray], int]:
    """Closed-form initial edge transforms by growing a max-confidence spanning tree.

    The first edge touching view 0 is pinned to the identity, which fixes the
    global rotation, translation and scale.
    """
    edges = graph.edges
    order = sorted(range(len(edges)), key=lambda i: -_edge_weight(edges[i]))
    root = next(i for i in order if edges[i].n == 0) if any(e.n == 0 for e in edges) else \
        next(i for i in order if 0 in edges[i].edge)
    sims: List[Optional[Sim3]] = [None] * len(edges)
    sims[root] = Sim3()
    placed: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}

    def place(i):
        e = edges[i]
        for v in e.edge:
            pts, conf = e.view_data(v)
            world = sims[i].apply(pts.reshape(-1, 3)).reshape(pts.shape)
            if v not in placed or conf.sum() > placed[v][1].sum():
                placed[v] = (world, conf)

    place(root)
    remaining = [i for i in order if i != root]
    while remaining:
        progress = False
        for i in list(remaining):
            e = edges[i]
            shared = [v for v in e.edge if v in placed]
            if not shared:
                continue
            src, dst, wts = [], [], []
            for v in shared:
                pts, conf = e.view_data(v)
                world, wconf = placed[v]
                wgt = np.sqrt(conf * wconf).reshape(-1)
                ok = wgt > 0
                src.append(pts.reshape(-1, 3)[ok])
                dst.append(world.reshape(-1, 3)[ok])
                wts.append(wgt[ok])
            sims[i] = umeyama_align(np.concatenate(src), np.concatenate(dst), True, np.concatenate(wts))
            place(i)
            remaining.remove(i)
            progress = True
        if not progress:
            raise DisconnectedGraphError(_components(graph.num_views, [e.edge for e in edges]))
    chi = [placed[v][0].copy() for v in range(graph.num_views)]
    return sims, chi, root


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------


def _objective(graph: ViewGraph, chi, log_s, rot, trans, want_grad: bool):
    """Charbonnier-smoothed confidence-weighted residual and its gradient."""
    total = 0.0
    g_chi = [np.zeros_like(c) for c in chi] if want_grad else None
    g_logs = np.zeros(len(graph.edges))
    g_rot = np.zeros((len(graph.edges), 3))
    g_t = np.zeros((len(graph.edges), 3))
    for i, e in enumerate(graph.edges):
        s = np.exp(log_s[i])
        R = rot[i]
        for v in e.edge:
            pts, conf = e.view_data(v)
            mask = conf > 0
            if not mask.any():
                continue
            P = pts[mask]
            O = conf[mask]
            RP = P @ R.T
            pred = s * RP + trans[i]
            r = chi[v][mask] - pred
            nrm = np.sqrt(np.sum(r * r, axis=1) + CHARBONNIER_EPS**2)
            total += float(np.sum(O * nrm))
            if not want_grad:
                continue
            gr = (O / nrm)[:, None] * r
            g_chi[v][mask] += gr
            g_pred = -gr
            g_t[i] += g_pred.sum(axis=0)
            g_logs[i] += s * np.sum(g_pred * RP)
            # left-multiplicative rotation tangent: d(R P) = omega x (R P)
            g_rot[i] += s * np.sum(np.cross(RP, g_pred), axis=0)
    return total, g_chi, g_logs, g_rot, g_t


class _Adam:
    def __init__(self, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        self.t += 1
        out = {}
        for k, g in grads.items():
            m = self.m.setdefault(k, np.zeros_like(g))
            v = self.v.setdefault(k, np.zeros_like(g))
            m[...] = self.b1 * m + (1 - self.b1) * g
            v[...] = self.b2 * v + (1 - self.b2) * g * g
            mh = m / (1 - self.b1**self.t)
            vh = v / (1 - self.b2**self.t)
            out[k] = -self.lr * mh / (np.sqrt(vh) + self.eps)
        return out


def global_align(graph: ViewGraph, iters: int = 300, lr: float = 1e-2, divergence_window: int = 100) -> AlignedScene:
    """Jointly refine world pointmaps and per-edge similarity transforms.

    Starts from a closed-form spanning-tree initialization and runs Adam on
    the confidence-weighted Charbonnier residual with a cosine-decayed step
    size. The edge used as the root of
    the spanning tree stays pinned to the identity. The best iterate is
    returned, so the final objective never exceeds the initial one.

    Raises:
        AlignmentDivergedError: objective rose for ``divergence_window`` steps in a row.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    sims, chi, pinned = _spanning_init(graph)
    n_e = len(graph.edges)
    log_s = np.log([s.scale for s in sims])
    rot = [s.R for s in sims]
    trans = np.array([s.translation for s in sims])
    f0, _, _, _, _ = _objective(graph, chi, log_s, rot, trans, False)
    best = (f0, [c.copy() for c in chi], log_s.copy(), [r.copy() for r in rot], trans.copy())
    history = [f0]
    opt = _Adam(lr)
    scale_ref = max(float(np.median(np.abs(np.concatenate([c.reshape(-1) for c in chi])))), 1e-12)
    rises = 0
    prev = f0
    for it in range(iters):
        # cosine decay to 1% of the base rate
        opt.lr = lr * (0.01 + 0.99 * 0.5 * (1 + np.cos(np.pi * it / iters)))
        f, g_chi, g_logs, g_rot, g_t = _objective(graph, chi, log_s, rot, trans, True)
        g_logs[pinned] = 0.0
        g_rot[pinned] = 0.0
        g_t[pinned] = 0.0
        grads = {f"chi{v}": g for v, g in enumerate(g_chi)}
        grads.update(logs=g_logs, rot=g_rot, t=g_t)
        upd = opt.step(grads)
        for v in range(len(chi)):
            chi[v] += upd[f"chi{v}"] * scale_ref
        log_s += upd["logs"]
        for i in range(n_e):
            if i != pinned:
                rot[i] = so3_exp(upd["rot"][i]) @ rot[i]
        trans += upd["t"] * scale_ref
        f_new, *_ = _objective(graph, chi, log_s, rot, trans, False)
        history.append(f_new)
        if f_new < best[0]:
            best = (f_new, [c.copy() for c in chi], log_s.copy(), [r.copy() for r in rot], trans.copy())
        rises = rises + 1 if f_new > prev else 0
        prev = f_new
        if rises >= divergence_window:
            raise AlignmentDivergedError(
                f"alignment objective increased for {rises} consecutive steps (initial {f0:.6g}, last {f_new:.6g})")
    f_best, chi, log_s, rot, trans = best
    per_edge = [Sim3(float(np.exp(log_s[i])), matrix_to_quat(rot[i]), trans[i]) for i in range(n_e)]
    conf = [np.zeros(graph.shape) for _ in range(graph.num_views)]
    for e in graph.edges:
        for v in e.edge:
            conf[v] = np.maximum(conf[v], e.view_data(v)[1])
    log.debug("global_align: objective %.6g -> %.6g", f0, f_best)
    return AlignedScene(chi=chi, conf=conf, per_edge=per_edge, objective_history=history)


# ---------------------------------------------------------------------------
# Cameras from aligned pointmaps
# ---------------------------------------------------------------------------


def fit_focal(cam_pts: np.ndarray, conf: np.ndarray, cx: float, cy: float) -> float:
    """Least-squares focal for a camera-frame pointmap with a fixed principal point."""
    h, w = cam_pts.shape[:2]
    xs, ys = np.meshgrid(np.arange(w) + 0.5 - cx, np.arange(h) + 0.5 - cy)
    Z = cam_pts[..., 2]
    ok = (conf > 0) & (Z > 1e-12) & np.all(np.isfinite(cam_pts), axis=-1)
    if ok.sum() < 3:
        raise DegenerateInputError("too few valid points to fit a focal length")
    qx = cam_pts[..., 0][ok] / Z[ok]
    qy = cam_pts[..., 1][ok] / Z[ok]
    wgt = conf[ok]
    den = float(np.sum(wgt * (qx * qx + qy * qy)))
    if den <= 1e-18:
        raise DegenerateInputError("pointmap rays all pass through the principal point")
    f = float(np.sum(wgt * (xs[ok] * qx + ys[ok] * qy)) / den)
    if not f > 0:
        raise DegenerateInputError(f"fitted focal {f} is not positive")
    return f


def estimate_pose_and_focal(aligned: AlignedScene, graph: ViewGraph, width: int, height: int,
                            cx: Optional[float] = None, cy: Optional[float] = None):
    """Recover per-view focal lengths and world-to-camera poses.

    For every view the most confident edge in which it is the reference
    supplies camera-frame points (scaled into world units by that edge's
    similarity). The focal is a least-squares pinhole fit to those points; the
    pose is a rigid fit from them onto the view's aligned world pointmap.

    Returns:
        ``(poses, focals, mean_focal)``; ``aligned`` is updated in place too.
    """
    cx = width / 2.0 if cx is None else cx
    cy = height / 2.0 if cy is None else cy
    poses, focals = [], []
    for v in range(graph.num_views):
        refs = [i for i, e in enumerate(graph.edges) if e.n == v]
        if not refs:
            raise DegenerateInputError(f"view {v} is never the reference view of an edge; its camera frame is unknown")
        i = max(refs, key=lambda k: graph.edges[k].conf_n.sum())
        e = graph.edges[i]
        sim = aligned.per_edge[i]
        cam_pts = sim.scale * e.pts_n
        conf = np.minimum(e.conf_n, aligned.conf[v])
        focals.append(fit_focal(cam_pts, conf, cx, cy))
        ok = conf.reshape(-1) > 0
        c2w = umeyama_align(cam_pts.reshape(-1, 3)[ok], aligned.chi[v].reshape(-1, 3)[ok], False, conf.reshape(-1)[ok])
        R = c2w.R
        poses.append(Pose.from_matrix(R.T, -R.T @ c2w.translation))
    mean_focal = float(np.mean(focals))
    aligned.poses = poses
    aligned.focals = focals
    aligned.focal = mean_focal
    return poses, focals, mean_focal


def aligned_from_poses(graph: ViewGraph, poses: Sequence[Pose], focal: float) -> AlignedScene:
    """Aligned scene for known cameras: each view's own pointmap moved to world by its pose.

    Each view uses its most confident edge as reference; edge scales are
    taken as metric.
    """
    chi, conf = [], []
    for v in range(graph.num_views):
        refs = [e for e in graph.edges if e.n == v]
        if not refs:
            raise DegenerateInputError(f"view {v} is never the reference view of an edge")
        e = max(refs, key=lambda x: x.conf_n.sum())
        chi.append(poses[v].inverse().apply(e.pts_n.reshape(-1, 3)).reshape(e.pts_n.shape))
        conf.append(e.conf_n.copy())
    per_edge = [Sim3() for _ in graph.edges]
    return AlignedScene(chi=chi, conf=conf, per_edge=per_edge, poses=list(poses), focal=float(focal),
                        focals=[float(focal)] * graph.num_views)
