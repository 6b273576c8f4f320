"""Real spherical harmonics basis (degree <= 3) and its direction Jacobian.

Uses the standard splatting constants; view-dependent color is
c = 0.5 + basis(dir) @ coeffs, so all-zero coefficients give mid gray.
"""
from __future__ import annotations

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154, -0.4570457994644658, 1.445305721320277, -0.5900435899266435)

MAX_COEFFS = 16


def num_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def degree_for(k: int) -> int:
    d = int(round(np.sqrt(k))) - 1
    if num_coeffs(d) != k:
        raise ValueError(f"{k} is not a valid spherical-harmonics coefficient count")
    return d


def eval_basis(dirs: np.ndarray, k: int) -> np.ndarray:
    """Basis values for unit directions; shape (N, k)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    n = dirs.shape[0]
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    B = np.empty((n, k), dtype=np.float64)
    B[:, 0] = SH_C0
    if k > 1:
        B[:, 1] = -SH_C1 * y
        B[:, 2] = SH_C1 * z
        B[:, 3] = -SH_C1 * x
    if k > 4:
        xx, yy, zz = x * x, y * y, z * z
        B[:, 4] = SH_C2[0] * x * y
        B[:, 5] = SH_C2[1] * y * z
        B[:, 6] = SH_C2[2] * (2 * zz - xx - yy)
        B[:, 7] = SH_C2[3] * x * z
        B[:, 8] = SH_C2[4] * (xx - yy)
    if k > 9:
        B[:, 9] = SH_C3[0] * y * (3 * xx - yy)
        B[:, 10] = SH_C3[1] * x * y * z
        B[:, 11] = SH_C3[2] * y * (4 * zz - xx - yy)
        B[:, 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        B[:, 13] = SH_C3[4] * x * (4 * zz - xx - yy)
        B[:, 14] = SH_C3[5] * z * (xx - yy)
        B[:, 15] = SH_C3[6] * x * (xx - 3 * yy)
    return B


def eval_basis_grad(dirs: np.ndarray, k: int) -> np.ndarray:
    """d basis / d dir, shape (N, k, 3), for unit (unnormalized-input) directions."""
    dirs = np.asarray(dirs, dtype=np.float64)
    n = dirs.shape[0]
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    zero = np.zeros(n)
    G = np.zeros((n, k, 3), dtype=np.float64)
    if k > 1:
        G[:, 1] = np.stack([zero, np.full(n, -SH_C1), zero], axis=1)
        G[:, 2] = np.stack([zero, zero, np.full(n, SH_C1)], axis=1)
        G[:, 3] = np.stack([np.full(n, -SH_C1), zero, zero], axis=1)
    if k > 4:
        G[:, 4] = SH_C2[0] * np.stack([y, x, zero], axis=1)
        G[:, 5] = SH_C2[1] * np.stack([zero, z, y], axis=1)
        G[:, 6] = SH_C2[2] * np.stack([-2 * x, -2 * y, 4 * z], axis=1)
        G[:, 7] = SH_C2[3] * np.stack([z, zero, x], axis=1)
        G[:, 8] = SH_C2[4] * np.stack([2 * x, -2 * y, zero], axis=1)
    if k > 9:
        xx, yy, zz = x * x, y * y, z * z
        G[:, 9] = SH_C3[0] * np.stack([6 * x * y, 3 * xx - 3 * yy, zero], axis=1)
        G[:, 10] = SH_C3[1] * np.stack([y * z, x * z, x * y], axis=1)
        G[:, 11] = SH_C3[2] * np.stack([-2 * x * y, 4 * zz - xx - 3 * yy, 8 * y * z], axis=1)
        G[:, 12] = SH_C3[3] * np.stack([-6 * x * z, -6 * y * z, 6 * zz - 3 * xx - 3 * yy], axis=1)
        G[:, 13] = SH_C3[4] * np.stack([4 * zz - 3 * xx - yy, -2 * x * y, 8 * x * z], axis=1)
        G[:, 14] = SH_C3[5] * np.stack([2 * x * z, -2 * y * z, xx - yy], axis=1)
        G[:, 15] = SH_C3[6] * np.stack([3 * xx - 3 * yy, -6 * x * y, zero], axis=1)
    return G


def colors_from_sh(coeffs: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """View-dependent colors, (N, 3). No clamping so the map stays smooth."""
    k = coeffs.shape[1]
    B = eval_basis(dirs, k)
    return 0.5 + np.einsum("nk,nkc->nc", B, coeffs)


def rgb_to_dc(rgb: np.ndarray) -> np.ndarray:
    """Degree-0 coefficient reproducing a target color at any view direction."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0
