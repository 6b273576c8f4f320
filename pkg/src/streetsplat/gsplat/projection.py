"""Covariance construction and EWA screen-space projection.

The world covariance is R diag(s)^2 R^T; its screen-space image under a
camera is M Sigma M^T with M = J W, where J is the Jacobian of the
perspective projection at the Gaussian center (local affine approximation)
and W the world-to-camera rotation.
"""
from __future__ import annotations

import numpy as np

from ..errors import BehindCamera
from ..geometry import quat_normalize, quat_to_rotmat
from ..scene_io import CameraIntrinsics, Se3Pose

DEFAULT_NEAR = 0.01
MIP_DILATION = 0.3  # screen-space dilation in px^2; standard anti-aliasing default


def covariance_world(q: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Sigma = R(q) diag(s)^2 R(q)^T for one or many Gaussians.

    q: (4,) or (N, 4) quaternions (normalized internally); s: matching (3,)
    or (N, 3) positive linear scales.
    """
    q = np.asarray(q, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    single = q.ndim == 1
    R = quat_to_rotmat(quat_normalize(np.atleast_2d(q)))
    s2 = np.atleast_2d(s) ** 2
    Sigma = np.einsum("nij,nj,nkj->nik", R, s2, R)
    return Sigma[0] if single else Sigma


def perspective_jacobian(mu_cam: np.ndarray, fx: float, fy: float) -> np.ndarray:
    """Jacobian of (x, y, z) -> (fx x/z + cx, fy y/z + cy); shape (N, 2, 3)."""
    mu_cam = np.atleast_2d(np.asarray(mu_cam, dtype=np.float64))
    x, y, z = mu_cam[:, 0], mu_cam[:, 1], mu_cam[:, 2]
    J = np.zeros((len(mu_cam), 2, 3), dtype=np.float64)
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * x / z**2
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * y / z**2
    return J


def project_covariance(
    Sigma: np.ndarray,
    world_to_cam: Se3Pose,
    intrinsics: CameraIntrinsics,
    mu_world: np.ndarray,
    near: float = DEFAULT_NEAR,
) -> np.ndarray:
    """Screen-space 2x2 covariance of one world Gaussian; raises BehindCamera
    if the center depth is not past the near plane."""
    mu_cam = world_to_cam.apply(np.asarray(mu_world, dtype=np.float64))
    if mu_cam[2] <= near:
        raise BehindCamera(f"gaussian center depth {mu_cam[2]:.4f} <= near plane {near}")
    J = perspective_jacobian(mu_cam[None, :], intrinsics.fx, intrinsics.fy)[0]
    M = J @ world_to_cam.rotation
    out = M @ np.asarray(Sigma, dtype=np.float64) @ M.T
    return 0.5 * (out + out.T)


def apply_mip_filter(Sigma2d: np.ndarray, dilation: float = MIP_DILATION) -> tuple[np.ndarray, float]:
    """Screen-space anti-aliasing: dilate by `dilation` * I and return the
    opacity compensation sqrt(det Sigma / det (Sigma + dilation I))."""
    Sigma2d = np.asarray(Sigma2d, dtype=np.float64)
    filtered = Sigma2d + dilation * np.eye(2)
    det_in = Sigma2d[0, 0] * Sigma2d[1, 1] - Sigma2d[0, 1] * Sigma2d[1, 0]
    det_out = filtered[0, 0] * filtered[1, 1] - filtered[0, 1] * filtered[1, 0]
    comp = np.sqrt(max(det_in, 0.0) / det_out)
    return filtered, float(comp)


def inv_2x2(S: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched closed-form 2x2 inverse; returns (inverse, determinant)."""
    a, b, c = S[..., 0, 0], S[..., 0, 1], S[..., 1, 1]
    det = a * c - b * b
    inv = np.empty_like(S)
    inv[..., 0, 0] = c / det
    inv[..., 0, 1] = -b / det
    inv[..., 1, 0] = -b / det
    inv[..., 1, 1] = a / det
    return inv, det


def max_eigenvalue_2x2(S: np.ndarray) -> np.ndarray:
    a, b, c = S[..., 0, 0], S[..., 0, 1], S[..., 1, 1]
    mid = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(mid * mid - (a * c - b * b), 0.0))
    return mid + disc
