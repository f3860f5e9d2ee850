"""Self-contained synthetic scenes with ground truth.

Ground-truth surfels are rendered through the same rasterizer used for
training, so images, depths and normals are consistent with the model by
construction. Pointmaps, correspondences and noisy cameras are derived from
those renders.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import formats
from .geometry import Intrinsics, Pose, backproject, pixel_rays, project, so3_exp
from .losses import Correspondences
from .pointmap_align import PointMapPair
from .render import RenderConfig, render
from .scene_io import Camera, SceneBundle, write_bundle, write_cameras, write_checkpoint
from .surfel_init import tangent_frame
from .surfels import SurfelCloud

SHAPES = ("plane", "sphere", "dihedral", "soup")
_CHECKER_COLORS = np.array([[0.85, 0.75, 0.2], [0.15, 0.25, 0.65]])


@dataclass
class SyntheticSpec:
    shape: str = "plane"
    n_surfels: int = 576
    # "checker" or "sine" (both with a world-space period) or "random" (per-surfel color)
    texture: str = "checker"
    checker_period: float = 0.25
    color_jitter: float = 0.0
    # random in-plane offset of grid surfels, as a fraction of the spacing
    position_jitter: float = 0.1
    sh_degree: int = 0
    num_views: int = 3
    width: int = 32
    height: int = 32
    # focal length as a multiple of the image width
    focal_factor: float = 1.2
    ring_radius: Optional[float] = None
    ring_height: Optional[float] = None
    # random offset of each view's ring angle, as a fraction of the angular spacing
    ring_jitter: float = 0.0
    pose_noise_deg: float = 0.0
    # camera-center displacement as a fraction of the camera's distance to the origin
    trans_noise: float = 0.0
    # relative multiplicative depth noise on pointmaps
    depth_noise: float = 0.0
    # std of log edge scale; 0 keeps every pointmap pair metric
    edge_scale_jitter: float = 0.0
    corr_per_pair: int = 200
    outlier_rate: float = 0.0
    opacity: float = 0.98
    # surfel std as a multiple of surfel spacing
    scale_factor: float = 0.7
    seed: int = 0

    def validate(self) -> None:
        if self.shape not in SHAPES:
            raise ValueError(f"shape must be one of {SHAPES}, got {self.shape!r}")
        if self.texture not in ("checker", "sine", "random"):
            raise ValueError(f"texture must be 'checker', 'sine' or 'random', got {self.texture!r}")
        for name in ("n_surfels", "num_views", "width", "height"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("pose_noise_deg", "trans_noise", "depth_noise", "edge_scale_jitter", "ring_jitter",
                     "color_jitter", "position_jitter", "corr_per_pair"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.outlier_rate <= 1.0:
            raise ValueError("outlier_rate must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class GroundTruth:
    cloud: SurfelCloud
    cameras: List[Camera]
    depths: List[np.ndarray]
    normals: List[np.ndarray]
    accs: List[np.ndarray]
    mesh_vertices: np.ndarray
    mesh_faces: np.ndarray
    # injected camera-center displacement and rotation perturbation per view
    center_offsets: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    rotation_offsets: List[np.ndarray] = field(default_factory=list)
    outliers: List[np.ndarray] = field(default_factory=list)


@dataclass
class SyntheticScene:
    spec: SyntheticSpec
    bundle: SceneBundle
    gt: GroundTruth


def look_at(center, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> Pose:
    """World-to-camera pose with +z toward ``target`` and +y pointing down."""
    center = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - center
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, [0.0, 1.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return Pose.from_matrix(R, -R @ center)


def _grid_plane(n: int, half: float = 1.0):
    g = max(int(round(np.sqrt(n))), 2)
    s = (np.arange(g) + 0.5) / g * 2 * half - half
    X, Y = np.meshgrid(s, s)
    pts = np.stack([X.ravel(), Y.ravel(), np.zeros(g * g)], axis=1)
    return pts, np.tile([0.0, 0.0, 1.0], (g * g, 1)), 2 * half / g


def _surface(spec: SyntheticSpec, rng):
    """Centers, normals, spacing and 2-D texture coordinates for the chosen shape."""
    if spec.shape in ("plane", "dihedral"):
        pts, nrm, h = _grid_plane(spec.n_surfels)
        # breaks exact center-depth ties between grid rows
        pts[:, :2] += spec.position_jitter * h * rng.uniform(-0.5, 0.5, (len(pts), 2))
    if spec.shape == "plane":
        uv = pts[:, :2]
    elif spec.shape == "dihedral":
        ang = np.deg2rad(30.0)
        right = pts[:, 0] > 0
        # fold the x > 0 half up by 30 degrees about the y axis
        pts[right, 2] = pts[right, 0] * np.sin(ang)
        pts[right, 0] = pts[right, 0] * np.cos(ang)
        nrm[right] = [-np.sin(ang), 0.0, np.cos(ang)]
        uv = np.stack([np.where(right, pts[:, 0] / np.cos(ang), pts[:, 0]), pts[:, 1]], axis=1)
    elif spec.shape == "sphere":
        n = spec.n_surfels
        r = 0.8
        i = np.arange(n) + 0.5
        phi = np.arccos(1 - 2 * i / n)
        theta = np.pi * (1 + 5 ** 0.5) * i
        nrm = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
        pts = r * nrm
        h = np.sqrt(4 * np.pi * r * r / n)
        uv = np.stack([np.arctan2(nrm[:, 1], nrm[:, 0]) * r, phi * r], axis=1)
    else:
        n = spec.n_surfels
        pts = rng.uniform(-0.8, 0.8, (n, 3))
        nrm = rng.normal(size=(n, 3))
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        h = 1.6 / n ** (1 / 3)
        uv = pts[:, :2]
    return pts, nrm, h, uv


def _cloud(spec: SyntheticSpec, rng) -> SurfelCloud:
    pts, nrm, h, uv = _surface(spec, rng)
    n = len(pts)
    frames = np.stack([tangent_frame(v)[0] for v in nrm])
    if spec.texture == "checker":
        cell = np.floor(uv / spec.checker_period).astype(np.int64)
        rgb = _CHECKER_COLORS[(cell[:, 0] + cell[:, 1]) % 2]
    elif spec.texture == "sine":
        k = 2 * np.pi / spec.checker_period
        phase = np.array([0.0, 2.1, 4.2])
        rgb = 0.5 + 0.35 * np.sin(k * uv[:, :1] + phase) * np.cos(k * uv[:, 1:2] * 0.8 + 0.7 * phase)
    else:
        rgb = rng.uniform(0.1, 0.9, (n, 3))
    rgb = np.clip(rgb + spec.color_jitter * rng.uniform(-1, 1, (n, 3)), 0.02, 0.98)
    cloud = SurfelCloud.from_attributes(pts, frames, spec.scale_factor * h, spec.opacity, rgb, sh_degree=spec.sh_degree)
    if spec.sh_degree > 0 and spec.texture == "random":
        cloud.sh[:, 1:, :] = rng.normal(0, 0.05, cloud.sh[:, 1:, :].shape)
    return cloud


def _mesh(spec: SyntheticSpec):
    if spec.shape in ("plane", "dihedral"):
        g = 9
        s = np.linspace(-1.0, 1.0, g)
        X, Y = np.meshgrid(s, s)
        V = np.stack([X.ravel(), Y.ravel(), np.zeros(g * g)], axis=1)
        if spec.shape == "dihedral":
            ang = np.deg2rad(30.0)
            right = V[:, 0] > 0
            V[right, 2] = V[right, 0] * np.sin(ang)
            V[right, 0] = V[right, 0] * np.cos(ang)
        idx = np.arange(g * g).reshape(g, g)
        a, b, c, d = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel(), idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
        F = np.concatenate([np.stack([a, b, d], 1), np.stack([a, d, c], 1)])
        return V, F
    if spec.shape == "sphere":
        nl, nt = 12, 24
        phi = np.linspace(0, np.pi, nl + 1)[1:-1]
        th = np.linspace(0, 2 * np.pi, nt, endpoint=False)
        P, T = np.meshgrid(phi, th, indexing="ij")
        V = 0.8 * np.stack([np.cos(T) * np.sin(P), np.sin(T) * np.sin(P), np.cos(P)], -1).reshape(-1, 3)
        V = np.concatenate([V, [[0, 0, 0.8], [0, 0, -0.8]]])
        top, bot = len(V) - 2, len(V) - 1
        F = []
        for i in range(nl - 2):
            for j in range(nt):
                a, b = i * nt + j, i * nt + (j + 1) % nt
                c, d = a + nt, b + nt
                F += [[a, c, b], [b, c, d]]
        for j in range(nt):
            F.append([top, j, (j + 1) % nt])
            last = (nl - 2) * nt
            F.append([bot, last + (j + 1) % nt, last + j])
        return V, np.array(F)
    return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)


def _cameras(spec: SyntheticSpec, rng) -> List[Camera]:
    flat = spec.shape in ("plane", "dihedral")
    radius = spec.ring_radius if spec.ring_radius is not None else (0.8 if flat else 2.6)
    height = spec.ring_height if spec.ring_height is not None else (2.2 if flat else 0.8)
    K = Intrinsics.centered(spec.focal_factor * spec.width, spec.width, spec.height)
    step = 2 * np.pi / spec.num_views
    cams = []
    for i in range(spec.num_views):
        th = i * step + spec.ring_jitter * step * rng.uniform(-0.5, 0.5)
        c = np.array([radius * np.cos(th), radius * np.sin(th), height])
        cams.append(Camera(look_at(c), K))
    return cams


def _perturb(cams: List[Camera], spec: SyntheticSpec, rng):
    noisy, offs, rots = [], [], []
    for cam in cams:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        dR = so3_exp(np.deg2rad(spec.pose_noise_deg) * axis)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        c = cam.pose.center
        off = spec.trans_noise * np.linalg.norm(c) * d
        R = dR @ cam.pose.R
        noisy.append(Camera(Pose.from_matrix(R, -R @ (c + off)), cam.K))
        offs.append(off)
        rots.append(dR)
    return noisy, np.array(offs), rots


def _correspondences(cams, depths, accs, spec: SyntheticSpec, rng):
    corrs = []
    K = cams[0].K
    H, W = depths[0].shape
    gx, gy = np.meshgrid((np.arange(W) + 0.5) / W, (np.arange(H) + 0.5) / H)
    for n in range(len(cams)):
        for m in range(n + 1, len(cams)):
            ok = accs[n] >= 0.99
            uv = np.stack([gx[ok], gy[ok]], axis=1)
            X = backproject(uv, depths[n][ok], cams[n].pose, K)
            uv_m, Z, valid = project(X, cams[m].pose, K)
            px = np.where(valid, uv_m[:, 0] * W, -1.0)
            py = np.where(valid, uv_m[:, 1] * H, -1.0)
            inside = valid & (px >= 0.5) & (px <= W - 0.5) & (py >= 0.5) & (py <= H - 0.5)
            ix = np.clip(np.floor(px).astype(int), 0, W - 1)
            iy = np.clip(np.floor(py).astype(int), 0, H - 1)
            vis = inside & (accs[m][iy, ix] >= 0.99) & (np.abs(depths[m][iy, ix] - Z) < 0.05 * np.abs(Z))
            cand = np.flatnonzero(vis)
            take = np.sort(rng.choice(cand, size=min(spec.corr_per_pair, len(cand)), replace=False))
            corrs.append(Correspondences(n, m, uv[take], uv_m[take], np.ones(len(take))))
    total = sum(len(c) for c in corrs)
    k = int(round(spec.outlier_rate * total))
    flat = np.zeros(total, dtype=bool)
    flat[rng.choice(total, size=k, replace=False)] = True
    outliers, start = [], 0
    for c in corrs:
        mask = flat[start:start + len(c)]
        c.p_m[mask] = rng.uniform(0, 1, (int(mask.sum()), 2))
        outliers.append(mask)
        start += len(c)
    return corrs, outliers


def _pointmaps(cams, depths, accs, spec: SyntheticSpec, rng) -> List[PointMapPair]:
    K = cams[0].K
    rays = pixel_rays(K)
    cam_pts, conf = [], []
    for d, a in zip(depths, accs):
        noisy = d * (1.0 + spec.depth_noise * rng.normal(size=d.shape)) if spec.depth_noise > 0 else d
        valid = a >= 0.5
        cam_pts.append(np.where(valid[..., None], rays * noisy[..., None], 0.0))
        conf.append(valid.astype(np.float64))
    pairs = []
    for n in range(len(cams)):
        for m in range(len(cams)):
            if n == m:
                continue
            rel = cams[n].pose.compose(cams[m].pose.inverse())
            s = float(np.exp(spec.edge_scale_jitter * rng.normal())) if spec.edge_scale_jitter > 0 else 1.0
            pm = rel.apply(cam_pts[m].reshape(-1, 3)).reshape(cam_pts[m].shape)
            pm = np.where(conf[m][..., None] > 0, pm, 0.0)
            f32 = lambda x: x.astype(np.float32).astype(np.float64)
            pairs.append(PointMapPair(n, m, f32(s * cam_pts[n]), f32(s * pm), conf[n], conf[m]))
    return pairs


def generate_synthetic(spec: SyntheticSpec) -> SyntheticScene:
    """Build a scene bundle plus ground truth; deterministic given ``spec.seed``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    cloud = _cloud(spec, rng)
    cams = _cameras(spec, rng)
    cfg = RenderConfig(dtype="float64")
    images, depths, normals, accs = [], [], [], []
    for cam in cams:
        out = render(cloud, cam.pose, cam.K, cfg)
        images.append(np.clip(out.color, 0.0, 1.0))
        d = np.where(out.acc >= 0.5, out.depth, 0.0).astype(np.float32).astype(np.float64)
        depths.append(d)
        nrm = out.normal / np.maximum(np.linalg.norm(out.normal, axis=-1, keepdims=True), 1e-12)
        normals.append(np.where((out.acc >= 0.5)[..., None], nrm, 0.0))
        accs.append(out.acc)
    pairs = _pointmaps(cams, depths, accs, spec, rng)
    corrs, outliers = _correspondences(cams, depths, accs, spec, rng)
    noisy, offs, rots = _perturb(cams, spec, rng)
    V, F = _mesh(spec)
    bundle = SceneBundle(images=images, pairs=pairs, correspondences=corrs, cameras=noisy,
                         meta={"provenance": "synthetic", "seed": spec.seed})
    gt = GroundTruth(cloud=cloud, cameras=cams, depths=depths, normals=normals, accs=accs,
                     mesh_vertices=V, mesh_faces=F, center_offsets=offs, rotation_offsets=rots, outliers=outliers)
    return SyntheticScene(spec, bundle, gt)


def write_synthetic(scene: SyntheticScene, root) -> None:
    """Bundle at ``root`` plus a ``gt/`` sidecar."""
    root = Path(root)
    write_bundle(scene.bundle, root)
    gt = root / "gt"
    for sub in ("depth", "normal", "acc"):
        (gt / sub).mkdir(parents=True, exist_ok=True)
    write_cameras(gt / "cameras.json", scene.gt.cameras)
    for i, (d, n, a) in enumerate(zip(scene.gt.depths, scene.gt.normals, scene.gt.accs)):
        formats.write_pfm(gt / "depth" / f"{i:03d}.pfm", d)
        formats.write_pfm(gt / "normal" / f"{i:03d}.pfm", n)
        formats.write_pfm(gt / "acc" / f"{i:03d}.pfm", a)
    write_checkpoint(scene.gt.cloud, [c.pose for c in scene.gt.cameras], gt / "surfels.ply",
                     [c.K for c in scene.gt.cameras])
    formats.write_ply(gt / "mesh.ply", [("vertex", {k: scene.gt.mesh_vertices[:, i].astype(np.float32)
                                                    for i, k in enumerate("xyz")})], faces=scene.gt.mesh_faces)
    (gt / "spec.json").write_text(json.dumps(asdict(scene.spec), indent=1, sort_keys=True))
