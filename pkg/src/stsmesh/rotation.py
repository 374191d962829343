"""Axis-angle rotations with analytic derivatives."""

import numpy as np
from scipy.spatial.transform import Rotation

# below this angle the trig coefficients switch to their Taylor series
_SMALL_ANGLE = 1e-2


def skew(w):
    """Cross-product matrices for vectors of shape (..., 3)."""
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def _coefficients(theta):
    """sin(t)/t, (1-cos t)/t^2 and the derivatives of both divided by t."""
    t2 = theta * theta
    small = theta < _SMALL_ANGLE
    ts = np.where(small, 1.0, theta)
    t2s = ts * ts
    sin, cos = np.sin(ts), np.cos(ts)
    a = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, sin / ts)
    b = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, (1.0 - cos) / t2s)
    c = np.where(small, -1.0 / 3.0 + t2 / 30.0 - t2 * t2 / 840.0,
                 (ts * cos - sin) / (t2s * ts))
    e = np.where(small, -1.0 / 12.0 + t2 / 180.0 - t2 * t2 / 6720.0,
                 (ts * sin - 2.0 * (1.0 - cos)) / (t2s * t2s))
    return a, b, c, e


def rodrigues(axis_angle):
    """Rotation matrices for axis-angle vectors of shape (..., 3).

    Uses R = I + a K + b K^2 with sinc-stable coefficients, so the zero
    vector maps to the identity without special casing.
    """
    w = np.asarray(axis_angle, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    a, b, _, _ = _coefficients(theta)
    K = skew(w)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def rodrigues_jacobian(axis_angle):
    """Rotation matrices and their derivatives.

    Returns ``(R, dR)`` where ``dR[..., i, j, k]`` is the derivative of
    ``R[..., i, j]`` with respect to component ``k`` of the input.
    """
    w = np.asarray(axis_angle, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    a, b, c, e = _coefficients(theta)
    K = skew(w)
    K2 = K @ K
    eye = np.broadcast_to(np.eye(3), K.shape)
    R = eye + a[..., None, None] * K + b[..., None, None] * K2

    gens = skew(np.eye(3))  # (3, 3, 3): generator for each axis
    dR = np.empty(w.shape[:-1] + (3, 3, 3))
    for k in range(3):
        E = gens[k]
        wk = w[..., k][..., None, None]
        dR[..., k] = (a[..., None, None] * E
                      + b[..., None, None] * (E @ K + K @ E)
                      + (c[..., None, None] * wk) * K
                      + (e[..., None, None] * wk) * K2)
    return R, dR


def rotation_log(matrix):
    """Axis-angle vectors for rotation matrices of shape (..., 3, 3)."""
    m = np.asarray(matrix, dtype=float)
    flat = m.reshape(-1, 3, 3)
    out = Rotation.from_matrix(flat).as_rotvec()
    return out.reshape(m.shape[:-2] + (3,))


def rotation_about_y(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
