"""Rotations, rigid and similarity transforms, and the pinhole camera model.

Quaternions are scalar-first ``(w, x, y, z)``. Poses map world to camera:
``x_cam = R @ x_world + t``. Pixel coordinates handed across module
boundaries are normalized to ``[0, 1]^2`` by image width and height; pixel
``j`` spans ``[j, j + 1)`` so its center sits at ``j + 0.5``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_EPS_DEPTH = 1e-8


class DegenerateInputError(ValueError):
    """Raised when a geometric fit has no unique solution."""


# ---------------------------------------------------------------------------
# Quaternions and SO(3)
# ---------------------------------------------------------------------------


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix for one quaternion ``(4,)`` or a batch ``(N, 4)``.

    The input is renormalized first, so slightly drifted quaternions still
    give an orthonormal result.
    """
    q = np.asarray(q)
    dtype = q.dtype if np.issubdtype(q.dtype, np.floating) else np.float64
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=dtype)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_matrix_backward(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of :func:`quat_to_matrix` w.r.t. the raw quaternion.

    Accounts for the internal normalization, so the result is orthogonal to
    ``q`` (up to rounding).
    """
    q = np.asarray(q, dtype=dR.dtype)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    g = dR
    dw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    dx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0]
              - 2 * x * g[..., 1, 1] - w * g[..., 1, 2] + z * g[..., 2, 0]
              + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    dy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2]
              + x * g[..., 1, 0] + z * g[..., 1, 2] - w * g[..., 2, 0]
              + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    dz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2]
              + w * g[..., 1, 0] - 2 * z * g[..., 1, 1] + y * g[..., 1, 2]
              + x * g[..., 2, 0] + y * g[..., 2, 1])
    dqn = np.stack([dw, dx, dy, dz], axis=-1)
    return (dqn - qn * np.sum(dqn * qn, axis=-1, keepdims=True)) / norm


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Quaternion (w >= 0) for a rotation matrix, single or batched."""
    R = np.asarray(R, dtype=np.float64)
    flat = R.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for i, M in enumerate(flat):
        tr = M[0, 0] + M[1, 1] + M[2, 2]
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = [0.25 * s, (M[2, 1] - M[1, 2]) / s, (M[0, 2] - M[2, 0]) / s, (M[1, 0] - M[0, 1]) / s]
        elif M[0, 0] > M[1, 1] and M[0, 0] > M[2, 2]:
            s = 2.0 * np.sqrt(1.0 + M[0, 0] - M[1, 1] - M[2, 2])
            q = [(M[2, 1] - M[1, 2]) / s, 0.25 * s, (M[0, 1] + M[1, 0]) / s, (M[0, 2] + M[2, 0]) / s]
        elif M[1, 1] > M[2, 2]:
            s = 2.0 * np.sqrt(1.0 + M[1, 1] - M[0, 0] - M[2, 2])
            q = [(M[0, 2] - M[2, 0]) / s, (M[0, 1] + M[1, 0]) / s, 0.25 * s, (M[1, 2] + M[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + M[2, 2] - M[0, 0] - M[1, 1])
            q = [(M[1, 0] - M[0, 1]) / s, (M[0, 2] + M[2, 0]) / s, (M[1, 2] + M[2, 1]) / s, 0.25 * s]
        q = np.asarray(q)
        out[i] = q if q[0] >= 0 else -q
    out = quat_normalize(out)
    return out.reshape(R.shape[:-2] + (4,))


def skew(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rodrigues' formula."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    K = skew(omega)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + np.sin(theta) / theta * K + (1 - np.cos(theta)) / theta**2 * K @ K


def so3_log(R: np.ndarray) -> np.ndarray:
    q = matrix_to_quat(R)
    v = q[1:]
    s = np.linalg.norm(v)
    if s < 1e-12:
        return 2.0 * v
    angle = 2.0 * np.arctan2(s, q[0])
    return angle * v / s


def rotation_angle(R_a: np.ndarray, R_b: np.ndarray) -> float:
    """Geodesic angle in radians between two rotation matrices."""
    c = (np.trace(np.asarray(R_a).T @ np.asarray(R_b)) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


# ---------------------------------------------------------------------------
# Poses, intrinsics, similarity transforms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Pose:
    """World-to-camera rigid transform."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        # leave unit quaternions untouched so stored poses reload bit-exactly
        if abs(np.linalg.norm(q) - 1.0) > 1e-12:
            q = quat_normalize(q)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def from_matrix(cls, R: np.ndarray, t: np.ndarray) -> "Pose":
        return cls(matrix_to_quat(R), np.asarray(t, dtype=np.float64))

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    @property
    def t(self) -> np.ndarray:
        return self.translation

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "Pose":
        R = self.R
        return Pose.from_matrix(R.T, -R.T @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        return Pose.from_matrix(self.R @ other.R, self.R @ other.translation + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points)
        return points @ self.R.T.astype(points.dtype, copy=False) + self.translation.astype(points.dtype, copy=False)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside image")

    @classmethod
    def centered(cls, focal: float, width: int, height: int) -> "Intrinsics":
        return cls(float(focal), float(focal), width / 2.0, height / 2.0, int(width), int(height))

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def with_focal(self, focal: float) -> "Intrinsics":
        return Intrinsics(float(focal), float(focal), self.cx, self.cy, self.width, self.height)


@dataclass(frozen=True)
class Sim3:
    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"Sim3 scale must be positive, got {self.scale}")
        object.__setattr__(self, "scale", float(self.scale))
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        # leave unit quaternions untouched so stored poses reload bit-exactly
        if abs(np.linalg.norm(q) - 1.0) > 1e-12:
            q = quat_normalize(q)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points) @ self.R.T + self.translation


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------


def project(points: np.ndarray, pose: Pose, K: Intrinsics):
    """Project world points to normalized pixels.

    Returns:
        ``(uv, depth, valid)`` where ``uv`` is ``(..., 2)`` in ``[0, 1]^2``
        for in-image points, ``depth`` is camera-space Z and ``valid`` flags
        points in front of the camera. Points behind the camera get NaN uv.
    """
    X = pose.apply(np.asarray(points, dtype=np.float64))
    Z = X[..., 2]
    valid = Z > _EPS_DEPTH
    with np.errstate(divide="ignore", invalid="ignore"):
        u = (K.fx * X[..., 0] / Z + K.cx) / K.width
        v = (K.fy * X[..., 1] / Z + K.cy) / K.height
    uv = np.stack([u, v], axis=-1)
    uv = np.where(valid[..., None], uv, np.nan)
    return uv, Z, valid


def backproject(uv: np.ndarray, depth, pose: Pose, K: Intrinsics) -> np.ndarray:
    """Inverse of :func:`project` for normalized pixels and camera-space depth."""
    uv = np.asarray(uv, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise ValueError("backproject requires positive depth")
    x = (uv[..., 0] * K.width - K.cx) / K.fx
    y = (uv[..., 1] * K.height - K.cy) / K.fy
    X_cam = np.stack([x * depth, y * depth, depth], axis=-1)
    R = pose.R
    return (X_cam - pose.translation) @ R


def pixel_rays(K: Intrinsics, dtype=np.float64) -> np.ndarray:
    """Camera-space ray directions with unit Z for every pixel center, ``(H, W, 3)``."""
    xs = (np.arange(K.width, dtype=np.float64) + 0.5 - K.cx) / K.fx
    ys = (np.arange(K.height, dtype=np.float64) + 0.5 - K.cy) / K.fy
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy, np.ones_like(gx)], axis=-1).astype(dtype)


# ---------------------------------------------------------------------------
# Alignment and pose updates
# ---------------------------------------------------------------------------


def umeyama_align(src: np.ndarray, dst: np.ndarray, with_scale: bool = True, weights=None) -> Sim3:
    """Least-squares similarity (or rigid) transform with ``dst ≈ s R src + t``.

    Raises:
        DegenerateInputError: fewer than 3 pairs, or collinear/coincident points.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise ValueError(f"point sets differ in shape: {src.shape} vs {dst.shape}")
    if len(src) < 3:
        raise DegenerateInputError(f"umeyama_align needs at least 3 point pairs, got {len(src)}")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.sum() <= 0:
        raise DegenerateInputError("all alignment weights are zero")
    w = w / w.sum()
    mu_s = w @ src
    mu_d = w @ dst
    xs = src - mu_s
    xd = dst - mu_d
    var_s = float(w @ np.sum(xs * xs, axis=1))
    sv_src = np.linalg.svd(np.sqrt(w)[:, None] * xs, compute_uv=False)
    if var_s <= 1e-24 or sv_src[1] <= 1e-9 * max(sv_src[0], 1e-300):
        raise DegenerateInputError("source points are collinear or coincident")
    cov = (xd * w[:, None]).T @ xs
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    scale = float(np.trace(np.diag(D) @ S) / var_s) if with_scale else 1.0
    t = mu_d - scale * R @ mu_s
    return Sim3(scale, matrix_to_quat(R), t)


def pose_retract(pose: Pose, delta: np.ndarray) -> Pose:
    """Apply a tangent update ``(omega, dt)``: ``R <- exp([omega]x) R``, ``t <- t + dt``."""
    delta = np.asarray(delta, dtype=np.float64).reshape(6)
    R = so3_exp(delta[:3]) @ pose.R
    return Pose.from_matrix(R, pose.translation + delta[3:])


def pose_distance(a: Pose, b: Pose) -> float:
    """Rotation angle plus translation distance, a cheap metric for convergence checks."""
    return rotation_angle(a.R, b.R) + float(np.linalg.norm(a.translation - b.translation))
