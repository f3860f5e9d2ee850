"""Surfel parameter storage shared by initialization, rendering and optimization."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import sh as shmod
from .geometry import quat_normalize, quat_to_matrix


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


@dataclass
class SurfelCloud:
    """Planar Gaussian primitives in their optimizable parameterization.

    Attributes:
        centers: ``(N, 3)`` world positions.
        quats: ``(N, 4)`` wxyz rotations whose matrix columns are ``[u, v, n]``.
        log_scales: ``(N, 2)`` log of the tangent-plane standard deviations.
        opacity_raw: ``(N,)`` logits; opacity is ``sigmoid(opacity_raw)``.
        sh: ``(N, (D + 1)^2, 3)`` color coefficients.
        source_view: ``(N,)`` index of the view a surfel was seeded from, ``-1`` if none.
    """

    centers: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_raw: np.ndarray
    sh: np.ndarray
    source_view: np.ndarray = field(default=None)

    PARAM_FIELDS = ("centers", "quats", "log_scales", "opacity_raw", "sh")

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 3)
        n = len(self.centers)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 2)
        self.opacity_raw = np.asarray(self.opacity_raw, dtype=np.float64).reshape(n)
        self.sh = np.asarray(self.sh, dtype=np.float64)
        if self.sh.ndim == 2:
            self.sh = self.sh.reshape(n, -1, 3)
        shmod.degree_from_coeffs(self.sh.shape[1])
        if self.source_view is None:
            self.source_view = np.full(n, -1, dtype=np.int64)
        self.source_view = np.asarray(self.source_view, dtype=np.int64).reshape(n)

    def __len__(self) -> int:
        return len(self.centers)

    @property
    def sh_degree(self) -> int:
        return shmod.degree_from_coeffs(self.sh.shape[1])

    @property
    def opacity(self) -> np.ndarray:
        return sigmoid(self.opacity_raw)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def rotations(self) -> np.ndarray:
        return quat_to_matrix(self.quats)

    @property
    def normals(self) -> np.ndarray:
        return self.rotations[:, :, 2]

    def copy(self) -> "SurfelCloud":
        return replace(self, **{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def subset(self, mask) -> "SurfelCloud":
        return SurfelCloud(**{f.name: getattr(self, f.name)[mask] for f in fields(self)})

    def normalize_quats(self) -> None:
        self.quats = quat_normalize(self.quats)

    def validate(self) -> None:
        for name in self.PARAM_FIELDS:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"surfel field {name!r} has non-finite values")

    @classmethod
    def from_attributes(cls, centers, rotations, scales, opacity, rgb, sh_degree: int = 3, source_view=None):
        """Build a cloud from human-readable attributes (rotation matrices, linear scales, RGB)."""
        from .geometry import matrix_to_quat

        centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
        n = len(centers)
        quats = matrix_to_quat(np.asarray(rotations, dtype=np.float64).reshape(n, 3, 3))
        sh = np.zeros((n, shmod.num_coeffs(sh_degree), 3))
        sh[:, 0, :] = shmod.rgb_to_dc(np.broadcast_to(rgb, (n, 3)))
        opacity = np.broadcast_to(np.asarray(opacity, dtype=np.float64), (n,))
        return cls(
            centers=centers,
            quats=quats.reshape(n, 4),
            log_scales=np.log(np.broadcast_to(np.asarray(scales, dtype=np.float64), (n, 2))),
            opacity_raw=logit(opacity),
            sh=sh,
            source_view=source_view,
        )
