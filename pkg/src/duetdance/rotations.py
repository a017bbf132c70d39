"""Rotation utilities: 6-D encoding, Gram-Schmidt decoding, yaw rotations.

The 6-D encoding of a rotation matrix is the concatenation of its first two
columns.  Decoding orthonormalizes with Gram-Schmidt and completes the third
column by a cross product, so valid rotations are a fixed point of
encode -> decode -> encode.
"""

from __future__ import annotations

import numpy as np

from .errors import DuetError

_EPS = 1e-12


def rot6d_from_matrix(rot: np.ndarray) -> np.ndarray:
    """Encode rotation matrices (..., 3, 3) as 6-D vectors (..., 6)."""
    rot = np.asarray(rot)
    return np.concatenate([rot[..., :, 0], rot[..., :, 1]], axis=-1)


def matrix_from_rot6d(r6: np.ndarray) -> np.ndarray:
    """Decode 6-D vectors (..., 6) into rotation matrices via Gram-Schmidt."""
    r6 = np.asarray(r6, dtype=np.float64)
    a = r6[..., 0:3]
    b = r6[..., 3:6]
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(na < _EPS):
        raise DuetError("degenerate-rotation", "6-D rotation with near-zero first column")
    x = a / na
    b = b - np.sum(x * b, axis=-1, keepdims=True) * x
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    if np.any(nb < _EPS):
        raise DuetError("degenerate-rotation", "6-D rotation with collinear columns")
    y = b / nb
    z = np.cross(x, y)
    return np.stack([x, y, z], axis=-1)


def yaw_matrix(angle: float) -> np.ndarray:
    """Rotation by ``angle`` radians about the vertical (+Y) axis."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def is_rotation(rot: np.ndarray, tol: float = 1e-6) -> bool:
    """True when every (..., 3, 3) block is orthonormal with det +1."""
    rot = np.asarray(rot)
    eye = np.eye(3)
    ortho = np.abs(rot @ np.swapaxes(rot, -1, -2) - eye).max() <= tol
    dets = np.linalg.det(rot)
    return bool(ortho and np.abs(dets - 1.0).max() <= tol)
