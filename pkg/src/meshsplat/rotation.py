"""Quaternion <-> rotation matrix with reverse-mode derivatives.

Quaternions are stored (w, x, y, z) and need not be normalized; the rotation is
always built from ``q / |q|`` and gradients are taken w.r.t. the raw ``q``.
"""
from __future__ import annotations

import numpy as np


def normalize_quat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """(..., 4) quaternions -> (..., 3, 3) rotation matrices."""
    w, x, y, z = np.moveaxis(normalize_quat(q), -1, 0)
    R = np.empty(w.shape + (3, 3))
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


def rotmat_jacobian(q: np.ndarray) -> np.ndarray:
    """dR/dq for raw quaternions, shape (..., 4, 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = np.moveaxis(qn, -1, 0)
    zero = np.zeros_like(w)

    def m(rows):
        return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    dw = m([[zero, -2 * z, 2 * y], [2 * z, zero, -2 * x], [-2 * y, 2 * x, zero]])
    dx = m([[zero, 2 * y, 2 * z], [2 * y, -4 * x, -2 * w], [2 * z, 2 * w, -4 * x]])
    dy = m([[-4 * y, 2 * x, 2 * w], [2 * x, zero, 2 * z], [-2 * w, 2 * z, -4 * y]])
    dz = m([[-4 * z, -2 * w, 2 * x], [2 * w, -4 * z, 2 * y], [2 * x, 2 * y, zero]])
    d_hat = np.stack([dw, dx, dy, dz], axis=-3)  # (..., 4, 3, 3) wrt normalized q
    # chain through q_hat = q / |q|: dq_hat/dq = (I - q_hat q_hat^T) / |q|
    P = (np.eye(4) - qn[..., :, None] * qn[..., None, :]) / norm[..., None]
    return np.einsum("...ji,...jab->...iab", P, d_hat)


def quat_to_rotmat_backward(q: np.ndarray, grad_R: np.ndarray) -> np.ndarray:
    """Pull a gradient on R (..., 3, 3) back to the raw quaternion (..., 4)."""
    return np.einsum("...iab,...ab->...i", rotmat_jacobian(q), grad_R)


def random_quats(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniformly distributed unit quaternions (Shoemake)."""
    u1, u2, u3 = rng.random((3, n))
    a = np.sqrt(1 - u1)
    b = np.sqrt(u1)
    q = np.stack(
        [
            b * np.cos(2 * np.pi * u3),
            a * np.sin(2 * np.pi * u2),
            a * np.cos(2 * np.pi * u2),
            b * np.sin(2 * np.pi * u3),
        ],
        axis=-1,
    )
    return q
