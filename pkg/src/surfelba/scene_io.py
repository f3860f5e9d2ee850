"""Scene bundles on disk and surfel checkpoints.

Bundle layout::

    meta.json              schema_version, num_views, resolution, provenance
    cameras.json           optional; per-view world-to-camera pose and intrinsics
    images/NNN.png
    masks/NNN.png          optional
    pointmaps/N_M_n.pfm    view n's points in view n's frame
    pointmaps/N_M_m.pfm    view m's points in view n's frame
    conf/N_M_n.pfm, conf/N_M_m.pfm
    pairs/N_M.json|.bin    correspondences
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import formats
from .formats import FormatError
from .geometry import Intrinsics, Pose
from .losses import Correspondences
from .pointmap_align import PointMapPair
from .surfels import SurfelCloud

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CHECKPOINT_VERSION = 1
CHECKPOINT_TAG = "surfelba_checkpoint"


class SchemaError(FormatError):
    """A bundle or checkpoint violates its schema."""


@dataclass
class Camera:
    pose: Pose
    K: Intrinsics

    def to_json(self) -> dict:
        return {
            "quaternion": [float(x) for x in self.pose.rotation],
            "translation": [float(x) for x in self.pose.translation],
            "fx": self.K.fx, "fy": self.K.fy, "cx": self.K.cx, "cy": self.K.cy,
            "width": self.K.width, "height": self.K.height,
        }

    @classmethod
    def from_json(cls, rec: dict, where: str) -> "Camera":
        try:
            pose = Pose(np.asarray(rec["quaternion"], dtype=np.float64), np.asarray(rec["translation"], dtype=np.float64))
            K = Intrinsics(float(rec["fx"]), float(rec["fy"]), float(rec["cx"]), float(rec["cy"]),
                           int(rec["width"]), int(rec["height"]))
        except KeyError as exc:
            raise SchemaError(f"{where}: missing field {exc.args[0]!r}") from exc
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"{where}: {exc}") from exc
        return cls(pose, K)


@dataclass
class SceneBundle:
    images: List[np.ndarray]
    pairs: List[PointMapPair] = field(default_factory=list)
    correspondences: List[Correspondences] = field(default_factory=list)
    cameras: Optional[List[Camera]] = None
    masks: Optional[List[np.ndarray]] = None
    meta: Dict = field(default_factory=dict)
    # True when pairs/ is absent: poses come from cameras.json, no correspondence term
    posed: bool = False

    @property
    def num_views(self) -> int:
        return len(self.images)

    @property
    def resolution(self) -> Tuple[int, int]:
        h, w = self.images[0].shape[:2]
        return w, h


def write_cameras(path, cameras: List[Camera]) -> None:
    Path(path).write_text(json.dumps({"views": [c.to_json() for c in cameras]}, indent=1))


def read_cameras(path) -> List[Camera]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        views = doc["views"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise SchemaError(f"{path}: expected an object with a 'views' list ({exc})") from exc
    return [Camera.from_json(rec, f"{path}: views[{i}]") for i, rec in enumerate(views)]


def write_bundle(bundle: SceneBundle, root, binary_pairs: bool = False) -> None:
    root = Path(root)
    for sub in ("images", "pointmaps", "conf"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    w, h = bundle.resolution
    meta = {"provenance": "unknown", **bundle.meta, "schema_version": SCHEMA_VERSION,
            "num_views": bundle.num_views, "resolution": [w, h]}
    (root / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    for i, img in enumerate(bundle.images):
        formats.write_png(root / "images" / f"{i:03d}.png", img)
    if bundle.masks is not None:
        (root / "masks").mkdir(exist_ok=True)
        for i, m in enumerate(bundle.masks):
            formats.write_png(root / "masks" / f"{i:03d}.png", np.asarray(m, dtype=np.float64))
    for p in bundle.pairs:
        stem = f"{p.n}_{p.m}"
        formats.write_pfm(root / "pointmaps" / f"{stem}_n.pfm", p.pts_n)
        formats.write_pfm(root / "pointmaps" / f"{stem}_m.pfm", p.pts_m)
        formats.write_pfm(root / "conf" / f"{stem}_n.pfm", p.conf_n)
        formats.write_pfm(root / "conf" / f"{stem}_m.pfm", p.conf_m)
    if not bundle.posed:
        (root / "pairs").mkdir(exist_ok=True)
        for c in bundle.correspondences:
            stem = root / "pairs" / f"{c.view_n}_{c.view_m}"
            if binary_pairs:
                formats.write_matches_bin(stem.with_suffix(".bin"), c.p_n, c.p_m, c.weight)
            else:
                formats.write_matches_json(stem.with_suffix(".json"), c.p_n, c.p_m, c.weight)
    if bundle.cameras is not None:
        write_cameras(root / "cameras.json", bundle.cameras)


def _pair_stems(folder: Path, suffix: str):
    out = {}
    for f in sorted(folder.glob(f"*{suffix}")):
        m = re.fullmatch(r"(\d+)_(\d+)" + re.escape(suffix), f.name)
        if m:
            out[(int(m.group(1)), int(m.group(2)))] = f
    return out


def read_bundle(root) -> SceneBundle:
    """Load and validate a bundle directory.

    Raises:
        FileNotFoundError: ``root`` or a referenced file is missing.
        SchemaError: inconsistent counts, sizes or fields, naming the file.
    """
    root = Path(root)
    meta_path = root / "meta.json"
    if not meta_path.is_file():
        raise FileNotFoundError(f"{meta_path}: bundle has no meta.json")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{meta_path}: invalid JSON ({exc})") from exc
    for key in ("schema_version", "num_views", "resolution"):
        if key not in meta:
            raise SchemaError(f"{meta_path}: missing field {key!r}")
    if meta["schema_version"] != SCHEMA_VERSION:
        raise SchemaError(f"{meta_path}: field 'schema_version' is {meta['schema_version']}, expected {SCHEMA_VERSION}")
    nv = int(meta["num_views"])
    w, h = (int(x) for x in meta["resolution"])

    images = []
    for i in range(nv):
        p = root / "images" / f"{i:03d}.png"
        if not p.is_file():
            raise FileNotFoundError(f"{p}: missing image for view {i}")
        img = formats.read_png(p)
        if img.ndim != 3 or img.shape != (h, w, 3):
            raise SchemaError(f"{p}: image shape {img.shape}, expected ({h}, {w}, 3) from meta.json resolution")
        images.append(img)

    masks = None
    if (root / "masks").is_dir():
        masks = []
        for i in range(nv):
            p = root / "masks" / f"{i:03d}.png"
            m = formats.read_png(p)
            if m.ndim == 3:
                m = m[..., 0]
            if m.shape != (h, w):
                raise SchemaError(f"{p}: mask shape {m.shape}, expected ({h}, {w})")
            masks.append(m >= 0.5)

    pairs = []
    pm = _pair_stems(root / "pointmaps", "_n.pfm") if (root / "pointmaps").is_dir() else {}
    for (n, m), f_n in pm.items():
        stem = f"{n}_{m}"
        files = [f_n, root / "pointmaps" / f"{stem}_m.pfm", root / "conf" / f"{stem}_n.pfm", root / "conf" / f"{stem}_m.pfm"]
        for f in files:
            if not f.is_file():
                raise FileNotFoundError(f"{f}: missing companion file for pair {stem}")
        if n >= nv or m >= nv:
            raise SchemaError(f"{f_n}: pair ({n}, {m}) references a view beyond num_views={nv}")
        arrs = [formats.read_pfm(f) for f in files]
        for f, a, ch in zip(files, arrs, (3, 3, 1, 1)):
            want = (h, w, 3) if ch == 3 else (h, w)
            if a.shape != want:
                raise SchemaError(f"{f}: shape {a.shape}, expected {want}")
        pairs.append(PointMapPair(n, m, arrs[0].astype(np.float64), arrs[1].astype(np.float64),
                                  arrs[2].astype(np.float64), arrs[3].astype(np.float64)))

    cameras = None
    if (root / "cameras.json").is_file():
        cameras = read_cameras(root / "cameras.json")
        if len(cameras) != nv:
            raise SchemaError(f"{root / 'cameras.json'}: {len(cameras)} views, meta.json says {nv}")

    corrs = []
    posed = not (root / "pairs").is_dir()
    if posed:
        if cameras is None:
            raise SchemaError(f"{root}: neither pairs/ nor cameras.json present; cannot place cameras")
        log.warning("%s: no pairs/ directory; loading in posed mode with the correspondence loss disabled", root)
    else:
        found = {**_pair_stems(root / "pairs", ".json"), **_pair_stems(root / "pairs", ".bin")}
        for (n, m), f in sorted(found.items()):
            if n >= nv or m >= nv or n == m:
                raise SchemaError(f"{f}: invalid view pair ({n}, {m}) for {nv} views")
            reader = formats.read_matches_bin if f.suffix == ".bin" else formats.read_matches_json
            p_n, p_m, wt = reader(f)
            corrs.append(Correspondences(n, m, p_n, p_m, wt))

    return SceneBundle(images=images, pairs=pairs, correspondences=corrs, cameras=cameras, masks=masks,
                       meta=meta, posed=posed)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CAMERA_FIELDS = ("qw", "qx", "qy", "qz", "tx", "ty", "tz", "fx", "fy", "cx", "cy", "width", "height")


def _vertex_props(cloud: SurfelCloud) -> List[str]:
    k = cloud.sh.shape[1]
    return (["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
            + [f"f_rest_{i}" for i in range(3 * (k - 1))]
            + ["opacity", "scale_0", "scale_1", "rot_0", "rot_1", "rot_2", "rot_3"])


def _f32_exact(a: np.ndarray) -> bool:
    return bool(np.all(a.astype(np.float32).astype(np.float64) == a))


def write_checkpoint(cloud: SurfelCloud, poses: List[Pose], path, intrinsics: Optional[List[Intrinsics]] = None) -> None:
    """Splat-layout PLY plus a ``camera`` element holding poses (and intrinsics when given).

    Surfel properties are stored as ``float`` when every value survives the
    cast, otherwise as ``double``, so the round trip is always exact.
    f_rest is channel-major (all R coefficients, then G, then B).
    """
    n = len(cloud)
    rest = cloud.sh[:, 1:, :].transpose(0, 2, 1).reshape(n, -1)
    cols = [cloud.centers, cloud.normals, cloud.sh[:, 0, :], rest, cloud.opacity_raw[:, None],
            cloud.log_scales, cloud.quats]
    data = np.concatenate(cols, axis=1)
    params = np.concatenate([cloud.centers, cloud.sh.reshape(n, -1), cloud.opacity_raw[:, None],
                             cloud.log_scales, cloud.quats], axis=1)
    dtype = np.float32 if _f32_exact(params) else np.float64
    verts = {name: data[:, i].astype(dtype) for i, name in enumerate(_vertex_props(cloud))}
    verts["source_view"] = cloud.source_view.astype(np.int32)
    cams = np.zeros((len(poses), len(_CAMERA_FIELDS)))
    for i, p in enumerate(poses):
        cams[i, :4] = p.rotation
        cams[i, 4:7] = p.translation
        if intrinsics is not None:
            K = intrinsics[i]
            cams[i, 7:] = [K.fx, K.fy, K.cx, K.cy, K.width, K.height]
    elements = [("vertex", verts), ("camera", {k: cams[:, i] for i, k in enumerate(_CAMERA_FIELDS)})]
    formats.write_ply(path, elements, comments=[f"{CHECKPOINT_TAG} {CHECKPOINT_VERSION}", f"sh_degree {cloud.sh_degree}"])


def read_checkpoint(path):
    """Inverse of :func:`write_checkpoint`.

    Returns:
        ``(cloud, poses, intrinsics)``; ``intrinsics`` is None when not stored.

    Raises:
        SchemaError: missing tag, version mismatch or a missing property.
    """
    path = Path(path)
    elements, comments = formats.read_ply(path)
    tag = [c.split() for c in comments if c.startswith(CHECKPOINT_TAG)]
    if not tag:
        raise SchemaError(f"{path}: not a checkpoint (no '{CHECKPOINT_TAG}' comment)")
    version = int(tag[0][1])
    if version != CHECKPOINT_VERSION:
        raise SchemaError(f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    deg = [int(c.split()[1]) for c in comments if c.startswith("sh_degree ")]
    if not deg:
        raise SchemaError(f"{path}: missing 'sh_degree' comment")
    k = (deg[0] + 1) ** 2
    if "vertex" not in elements or "camera" not in elements:
        raise SchemaError(f"{path}: checkpoint needs 'vertex' and 'camera' elements")
    v = elements["vertex"]
    dummy = SurfelCloud(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 2)), np.zeros(0), np.zeros((0, k, 3)))
    for name in _vertex_props(dummy) + ["source_view"]:
        if name not in v:
            raise SchemaError(f"{path}: vertex property {name!r} missing")
    n = len(v["x"])

    def col(names):
        return np.stack([v[x].astype(np.float64) for x in names], axis=1) if names else np.zeros((n, 0))

    rest = col([f"f_rest_{i}" for i in range(3 * (k - 1))]).reshape(n, 3, k - 1).transpose(0, 2, 1)
    sh = np.concatenate([col(["f_dc_0", "f_dc_1", "f_dc_2"])[:, None, :], rest], axis=1)
    cloud = SurfelCloud(
        centers=col(["x", "y", "z"]),
        quats=col(["rot_0", "rot_1", "rot_2", "rot_3"]),
        log_scales=col(["scale_0", "scale_1"]),
        opacity_raw=v["opacity"].astype(np.float64),
        sh=sh,
        source_view=v["source_view"].astype(np.int64),
    )
    c = elements["camera"]
    for name in _CAMERA_FIELDS:
        if name not in c:
            raise SchemaError(f"{path}: camera property {name!r} missing")
    cams = np.stack([c[x] for x in _CAMERA_FIELDS], axis=1)
    poses = [Pose(row[:4].copy(), row[4:7].copy()) for row in cams]
    intr = None
    if len(cams) and np.all(cams[:, 7] > 0):
        intr = [Intrinsics(r[7], r[8], r[9], r[10], int(r[11]), int(r[12])) for r in cams]
    return cloud, poses, intr
