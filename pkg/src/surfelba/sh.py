"""Real spherical harmonics up to degree 3 for view-dependent color.

Coefficient layout is ``(N, (D + 1)^2, 3)``. Colors follow the usual splatting
convention: ``rgb = max(SH(dir) + 0.5, 0)``.
"""

from __future__ import annotations

import numpy as np

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
      0.3731763325901154, -0.4570457994644658, 1.4453057213202769,
      -0.5900435899266435)


def num_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def degree_from_coeffs(n: int) -> int:
    d = int(round(np.sqrt(n))) - 1
    if num_coeffs(d) != n or not 0 <= d <= 3:
        raise ValueError(f"{n} coefficients per channel is not a valid SH layout")
    return d


def rgb_to_dc(rgb: np.ndarray) -> np.ndarray:
    return (np.asarray(rgb) - 0.5) / C0


def dc_to_rgb(dc: np.ndarray) -> np.ndarray:
    return np.asarray(dc) * C0 + 0.5


def sh_basis(degree: int, dirs: np.ndarray) -> np.ndarray:
    """Basis values ``(N, (degree+1)^2)`` for unit directions ``(N, 3)``."""
    dirs = np.asarray(dirs)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = [np.full_like(x, C0)]
    if degree >= 1:
        out += [-C1 * y, C1 * z, -C1 * x]
    if degree >= 2:
        xx, yy, zz, xy, yz, xz = x * x, y * y, z * z, x * y, y * z, x * z
        out += [C2[0] * xy, C2[1] * yz, C2[2] * (2 * zz - xx - yy), C2[3] * xz, C2[4] * (xx - yy)]
    if degree >= 3:
        out += [
            C3[0] * y * (3 * xx - yy),
            C3[1] * xy * z,
            C3[2] * y * (4 * zz - xx - yy),
            C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            C3[4] * x * (4 * zz - xx - yy),
            C3[5] * z * (xx - yy),
            C3[6] * x * (xx - 3 * yy),
        ]
    return np.stack(out, axis=-1)


def sh_basis_jacobian(degree: int, dirs: np.ndarray) -> np.ndarray:
    """Derivative of each basis function w.r.t. ``(x, y, z)``: ``(N, K, 3)``."""
    dirs = np.asarray(dirs)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    zero = np.zeros_like(x)
    rows = [(zero, zero, zero)]
    if degree >= 1:
        rows += [(zero, -C1 + zero, zero), (zero, zero, C1 + zero), (-C1 + zero, zero, zero)]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        rows += [
            (C2[0] * y, C2[0] * x, zero),
            (zero, C2[1] * z, C2[1] * y),
            (-2 * C2[2] * x, -2 * C2[2] * y, 4 * C2[2] * z),
            (C2[3] * z, zero, C2[3] * x),
            (2 * C2[4] * x, -2 * C2[4] * y, zero),
        ]
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        rows += [
            (C3[0] * 6 * x * y, C3[0] * (3 * xx - 3 * yy), zero),
            (C3[1] * y * z, C3[1] * x * z, C3[1] * x * y),
            (C3[2] * -2 * x * y, C3[2] * (4 * zz - xx - 3 * yy), C3[2] * 8 * y * z),
            (C3[3] * -6 * x * z, C3[3] * -6 * y * z, C3[3] * (6 * zz - 3 * xx - 3 * yy)),
            (C3[4] * (4 * zz - 3 * xx - yy), C3[4] * -2 * x * y, C3[4] * 8 * x * z),
            (C3[5] * 2 * x * z, C3[5] * -2 * y * z, C3[5] * (xx - yy)),
            (C3[6] * (3 * xx - 3 * yy), C3[6] * -6 * x * y, zero),
        ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def evaluate_sh(sh: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """RGB colors ``(N, 3)`` from coefficients ``(N, K, 3)`` and unit view directions."""
    sh = np.asarray(sh)
    degree = degree_from_coeffs(sh.shape[-2])
    basis = sh_basis(degree, dirs).astype(sh.dtype, copy=False)
    raw = np.einsum("nk,nkc->nc", basis, sh) + 0.5
    return np.maximum(raw, 0.0)


def evaluate_sh_backward(sh: np.ndarray, dirs: np.ndarray, d_rgb: np.ndarray):
    """Gradients of :func:`evaluate_sh` w.r.t. coefficients and directions."""
    degree = degree_from_coeffs(sh.shape[-2])
    basis = sh_basis(degree, dirs).astype(sh.dtype, copy=False)
    raw = np.einsum("nk,nkc->nc", basis, sh) + 0.5
    g = np.where(raw > 0, d_rgb, 0.0)
    d_sh = basis[:, :, None] * g[:, None, :]
    if degree == 0:
        return d_sh, np.zeros_like(dirs)
    jac = sh_basis_jacobian(degree, dirs)
    d_basis = np.einsum("nkc,nc->nk", sh, g)
    d_dirs = np.einsum("nk,nkj->nj", d_basis, jac)
    return d_sh, d_dirs
