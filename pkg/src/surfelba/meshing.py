"""TSDF fusion of rendered depth, marching-cubes extraction and mask-based cleaning.

Signed distances are projective (measured along the camera Z axis), positive
on the camera side of the surface and normalized by the truncation distance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from skimage import measure

from .formats import FormatError, read_ply, write_ply
from .geometry import Intrinsics, Pose, pixel_rays

log = logging.getLogger(__name__)

ACC_GATE = 0.5
DEFAULT_RESOLUTION = 256
TRUNCATION_VOXELS = 4.0
# voxels transformed per batch during integration
SLAB_VOXELS = 1 << 21


@dataclass
class TsdfVolume:
    origin: np.ndarray
    voxel_size: float
    dims: tuple
    truncation: float
    tsdf: np.ndarray = None
    weight: np.ndarray = None

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.dims = tuple(int(d) for d in self.dims)
        if self.voxel_size <= 0:
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")
        if self.truncation < self.voxel_size:
            raise ValueError(f"truncation {self.truncation} is smaller than voxel_size {self.voxel_size}")
        if self.tsdf is None:
            self.tsdf = np.ones(self.dims)
        if self.weight is None:
            self.weight = np.zeros(self.dims)

    @classmethod
    def from_bounds(cls, lo, hi, voxel_size: float, truncation: Optional[float] = None) -> "TsdfVolume":
        """Grid covering the box ``[lo, hi]`` with voxel centers on ``lo + i * voxel_size``."""
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        dims = np.maximum(np.ceil((hi - lo) / voxel_size).astype(int) + 1, 2)
        trunc = TRUNCATION_VOXELS * voxel_size if truncation is None else truncation
        return cls(lo, float(voxel_size), tuple(dims), float(trunc))

    @classmethod
    def around(cls, center, extent: float, resolution: int = DEFAULT_RESOLUTION,
               truncation: Optional[float] = None) -> "TsdfVolume":
        """Cube of side ``extent`` centered at ``center`` with ``voxel_size = extent / resolution``."""
        center = np.asarray(center, dtype=np.float64)
        vs = extent / resolution
        return cls.from_bounds(center - extent / 2, center + extent / 2, vs, truncation)

    def points(self) -> np.ndarray:
        """World coordinates of every voxel, ``dims + (3,)``."""
        axes = [self.origin[i] + self.voxel_size * np.arange(self.dims[i]) for i in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def __len__(self) -> int:
        return len(self.triangles)

    def face_normals(self) -> np.ndarray:
        """Unnormalized face normals (twice the triangle area in length)."""
        v = self.vertices[self.triangles]
        return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])

    def vertex_normals(self) -> np.ndarray:
        """Area-weighted vertex normals from the face winding."""
        acc = np.zeros_like(self.vertices)
        fn = self.face_normals()
        for k in range(3):
            np.add.at(acc, self.triangles[:, k], fn)
        n = np.linalg.norm(acc, axis=1, keepdims=True)
        return acc / np.where(n > 0, n, 1)

    def drop_degenerate(self, eps: float = 1e-12) -> "TriangleMesh":
        area = 0.5 * np.linalg.norm(self.face_normals(), axis=1)
        return TriangleMesh(self.vertices, self.triangles[area > eps], self.normals)


def _sample_depth(depth, valid, u, v):
    """Bilinear depth lookup at pixel coordinates using valid neighbours only."""
    h, w = depth.shape
    x = u - 0.5
    y = v - 0.5
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    fx = x - x0
    fy = y - y0
    num = np.zeros_like(u)
    den = np.zeros_like(u)
    for dx, dy, wt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                       (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xi = np.clip(x0 + dx, 0, w - 1)
        yi = np.clip(y0 + dy, 0, h - 1)
        ok = valid[yi, xi] & (wt > 0)
        num += np.where(ok, wt * depth[yi, xi], 0)
        den += np.where(ok, wt, 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 1e-6, num / den, np.nan)


def incidence_mask(depth: np.ndarray, valid: np.ndarray, K: Intrinsics, max_deg: float) -> np.ndarray:
    """Pixels whose central-difference surface normal is within ``max_deg`` of the view ray."""
    pts = pixel_rays(K) * np.where(valid, depth, 0)[..., None]
    ok = np.zeros_like(valid)
    ok[1:-1, 1:-1] = valid[1:-1, 1:-1] & valid[1:-1, 2:] & valid[1:-1, :-2] & valid[2:, 1:-1] & valid[:-2, 1:-1]
    n = np.zeros_like(pts)
    n[1:-1, 1:-1] = np.cross(pts[1:-1, 2:] - pts[1:-1, :-2], pts[2:, 1:-1] - pts[:-2, 1:-1])
    ray = pixel_rays(K)
    num = np.abs(np.sum(n * ray, axis=-1))
    den = np.linalg.norm(n, axis=-1) * np.linalg.norm(ray, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where(den > 0, num / den, 0.0)
    return ok & (cos >= np.cos(np.radians(max_deg)))


def integrate(volume: TsdfVolume, depth: np.ndarray, acc: np.ndarray, pose: Pose, K: Intrinsics,
              acc_gate: float = ACC_GATE, max_incidence_deg: Optional[float] = None) -> TsdfVolume:
    """Fuse one depth map into ``volume`` in place (also returned).

    Voxels project into the view; those landing on a pixel with ``acc >= acc_gate``
    and no more than one truncation distance behind the observed surface receive
    a running weighted average of the clamped signed distance. With
    ``max_incidence_deg`` set, grazing pixels (whose rim depth smears past the
    silhouette) are skipped as well.
    """
    depth = np.asarray(depth, dtype=np.float64)
    valid = (np.asarray(acc) >= acc_gate) & np.isfinite(depth) & (depth > 0)
    if max_incidence_deg is not None:
        valid = incidence_mask(depth, valid, K, max_incidence_deg)
    if not valid.any():
        return volume
    h, w = depth.shape
    nx, ny, nz = volume.dims
    gy, gz = np.meshgrid(volume.origin[1] + volume.voxel_size * np.arange(ny),
                         volume.origin[2] + volume.voxel_size * np.arange(nz), indexing="ij")
    R, t = pose.R, pose.translation
    tsdf = volume.tsdf.reshape(nx, -1)
    wgt = volume.weight.reshape(nx, -1)
    slab = max(1, SLAB_VOXELS // max(ny * nz, 1))
    for i0 in range(0, nx, slab):
        xs = volume.origin[0] + volume.voxel_size * np.arange(i0, min(i0 + slab, nx))
        pts = np.stack(np.broadcast_arrays(xs[:, None, None], gy[None], gz[None]), axis=-1).reshape(-1, 3)
        cam = pts @ R.T + t
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = K.fx * cam[:, 0] / z + K.cx
            v = K.fy * cam[:, 1] / z + K.cy
        inside = (z > 1e-9) & (u >= 0) & (u < w) & (v >= 0) & (v < h)
        idx = np.flatnonzero(inside)
        d = _sample_depth(depth, valid, u[idx], v[idx])
        sdf = d - z[idx]
        keep = np.isfinite(d) & (sdf >= -volume.truncation)
        idx = idx[keep]
        new = np.clip(sdf[keep] / volume.truncation, -1.0, 1.0)
        tsl = tsdf[i0:i0 + slab].reshape(-1)
        wsl = wgt[i0:i0 + slab].reshape(-1)
        w_old = wsl[idx]
        tsl[idx] = (w_old * tsl[idx] + new) / (w_old + 1.0)
        wsl[idx] = w_old + 1.0
        tsdf[i0:i0 + slab] = tsl.reshape(-1, ny * nz)
        wgt[i0:i0 + slab] = wsl.reshape(-1, ny * nz)
    return volume


def extract_mesh(volume: TsdfVolume) -> TriangleMesh:
    """Marching cubes on the observed part of the volume at the zero level."""
    observed = volume.weight > 0
    vals = volume.tsdf[observed]
    if vals.size == 0 or vals.min() >= 0 or vals.max() <= 0:
        log.warning("TSDF volume has no zero crossing; returning an empty mesh")
        return TriangleMesh.empty()
    # skimage gates each cube on its highest-index corner; require all eight corners observed
    cells = np.zeros_like(observed)
    core = observed[:-1, :-1, :-1].copy()
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                core &= observed[dx:dx + observed.shape[0] - 1, dy:dy + observed.shape[1] - 1,
                                 dz:dz + observed.shape[2] - 1]
    cells[1:, 1:, 1:] = core
    try:
        verts, faces, normals, _ = measure.marching_cubes(
            volume.tsdf, level=0.0, spacing=(volume.voxel_size,) * 3, mask=cells,
            gradient_direction="ascent", allow_degenerate=False)
    except (ValueError, RuntimeError) as exc:
        log.warning("marching cubes found no surface (%s); returning an empty mesh", exc)
        return TriangleMesh.empty()
    # skimage winds faces clockwise about the ascending gradient; flip so face normals point outside
    mesh = TriangleMesh(verts + volume.origin, faces[:, [0, 2, 1]], normals)
    return mesh.drop_degenerate()


def _project_pixels(vertices: np.ndarray, pose: Pose, K: Intrinsics):
    cam = vertices @ pose.R.T + pose.translation
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * cam[:, 0] / z + K.cx
        v = K.fy * cam[:, 1] / z + K.cy
    visible = (z > 1e-9) & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
    return u, v, visible


def clean_with_masks(mesh: TriangleMesh, masks: Sequence[np.ndarray], poses: Sequence[Pose],
                     K: Intrinsics) -> TriangleMesh:
    """Drop vertices that fall outside the mask of every view that sees them.

    A vertex counts as seen by a view when it lies in front of the camera and
    projects inside the image. Vertices seen by no view are kept. Triangles
    touching a removed vertex are dropped.
    """
    if len(masks) != len(poses):
        raise ValueError(f"{len(masks)} masks for {len(poses)} poses")
    n = len(mesh.vertices)
    seen = np.zeros(n, dtype=bool)
    inside_any = np.zeros(n, dtype=bool)
    for mask, pose in zip(masks, poses):
        mask = np.asarray(mask).astype(bool)
        u, v, vis = _project_pixels(mesh.vertices, pose, K)
        ui = np.where(vis, np.floor(u), 0).astype(int)
        vi = np.where(vis, np.floor(v), 0).astype(int)
        seen |= vis
        inside_any |= vis & mask[vi, ui]
    keep = ~seen | inside_any
    remap = np.full(n, -1, dtype=np.int64)
    remap[keep] = np.arange(int(keep.sum()))
    tri = mesh.triangles[np.all(keep[mesh.triangles], axis=1)]
    normals = None if mesh.normals is None else mesh.normals[keep]
    return TriangleMesh(mesh.vertices[keep], remap[tri], normals)


def rasterize_mesh(mesh: TriangleMesh, pose: Pose, K: Intrinsics):
    """Z-buffer the mesh at pixel centers.

    Returns:
        ``(depth, normal, hit)``: camera-Z depth (0 where missed), unit camera-space
        face normals oriented toward the camera, and the hit mask.
    """
    h, w = K.height, K.width
    depth = np.zeros((h, w))
    normal = np.zeros((h, w, 3))
    hit = np.zeros((h, w), dtype=bool)
    if len(mesh) == 0:
        return depth, normal, hit
    cam = mesh.vertices @ pose.R.T + pose.translation
    tri = cam[mesh.triangles]
    tri = tri[np.all(tri[:, :, 2] > 1e-9, axis=1)]
    if len(tri) == 0:
        return depth, normal, hit
    px = K.fx * tri[:, :, 0] / tri[:, :, 2] + K.cx
    py = K.fy * tri[:, :, 1] / tri[:, :, 2] + K.cy
    x0 = np.clip(np.floor(px.min(1) - 0.5), 0, w - 1).astype(int)
    x1 = np.clip(np.ceil(px.max(1) - 0.5), 0, w - 1).astype(int)
    y0 = np.clip(np.floor(py.min(1) - 0.5), 0, h - 1).astype(int)
    y1 = np.clip(np.ceil(py.max(1) - 0.5), 0, h - 1).astype(int)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    on = (px.max(1) >= 0) & (px.min(1) <= w) & (py.max(1) >= 0) & (py.min(1) <= h)
    cnt = np.where(on, nx * ny, 0)
    fid = np.repeat(np.arange(len(tri)), cnt)
    local = np.arange(int(cnt.sum())) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    xi = x0[fid] + local % nx[fid]
    yi = y0[fid] + local // nx[fid]
    d = np.stack([(xi + 0.5 - K.cx) / K.fx, (yi + 0.5 - K.cy) / K.fy, np.ones(len(xi))], axis=-1)
    # Moller-Trumbore with the ray origin at the camera center
    a, b, c = tri[fid, 0], tri[fid, 1], tri[fid, 2]
    e1, e2 = b - a, c - a
    p = np.cross(d, e2)
    det = np.sum(e1 * p, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / det
        s = -a
        bu = np.sum(s * p, axis=1) * inv
        q = np.cross(s, e1)
        bv = np.sum(d * q, axis=1) * inv
        t = np.sum(e2 * q, axis=1) * inv
    tol = 1e-12
    ok = (np.abs(det) > 1e-18) & (bu >= -tol) & (bv >= -tol) & (bu + bv <= 1 + tol) & (t > 1e-9)
    fid, xi, yi, t = fid[ok], xi[ok], yi[ok], t[ok]
    if len(t) == 0:
        return depth, normal, hit
    pix = yi * w + xi
    order = np.lexsort((fid, t, pix))
    pix, fid, t = pix[order], fid[order], t[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    pix, fid, t = pix[first], fid[first], t[first]
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    fn /= np.maximum(np.linalg.norm(fn, axis=1, keepdims=True), 1e-300)
    n = fn[fid]
    rays = np.stack([(pix % w + 0.5 - K.cx) / K.fx, (pix // w + 0.5 - K.cy) / K.fy, np.ones(len(pix))], -1)
    n = np.where(np.sum(n * rays, axis=1, keepdims=True) > 0, -n, n)
    depth.reshape(-1)[pix] = t
    normal.reshape(-1, 3)[pix] = n
    hit.reshape(-1)[pix] = True
    return depth, normal, hit


def fuse_depths(depths, accs, poses, K: Intrinsics, volume: TsdfVolume) -> TsdfVolume:
    for d, a, p in zip(depths, accs, poses):
        integrate(volume, d, a, p, K)
    return volume


def write_mesh(mesh: TriangleMesh, path) -> None:
    v = mesh.vertices.astype(np.float32)
    write_ply(path, [("vertex", {"x": v[:, 0], "y": v[:, 1], "z": v[:, 2]})], faces=mesh.triangles)


def read_mesh(path) -> TriangleMesh:
    elements, _ = read_ply(path)
    if "vertex" not in elements:
        raise FormatError(f"{path}: mesh PLY has no vertex element")
    vx = elements["vertex"]
    try:
        verts = np.stack([vx["x"], vx["y"], vx["z"]], axis=1).astype(np.float64)
    except KeyError as exc:
        raise FormatError(f"{path}: vertex element lacks property {exc}") from exc
    faces = elements.get("face", {}).get("vertex_indices", np.zeros((0, 3), dtype=np.int64))
    return TriangleMesh(verts, faces)
