"""SO(3) / SE(3) operations and Jacobians.

Twists are ordered ``[rho; phi]``: translational part first, rotational part
second.  Poses are 4x4 homogeneous matrices mapping body coordinates to world
coordinates.  Every function accepts a single element or a leading batch
dimension, and the coefficient functions are written so that complex inputs
propagate analytically (``theta`` is computed as ``sqrt(phi . phi)``, never via
``abs``); this lets callers differentiate through them with a complex step.
"""

from __future__ import annotations

import numpy as np

SMALL_ANGLE = 1e-6
# cutoff for the higher-order translational coupling coefficients, whose closed
# forms cancel catastrophically well above SMALL_ANGLE
_SERIES_CUTOFF = 1e-2
LOG_ANGLE_LIMIT = np.pi - 1e-6


class NearPiRotationError(ValueError):
    """Raised when a logarithm is requested for a rotation angle too close to pi."""


def skew(v):
    v = np.asarray(v)
    out = np.zeros(v.shape[:-1] + (3, 3), dtype=v.dtype)
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def unskew(m):
    m = np.asarray(m)
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def hat(xi):
    """Map a twist ``[rho; phi]`` to its 4x4 se(3) matrix."""
    xi = np.asarray(xi)
    if xi.shape[-1] != 6:
        raise ValueError(f"twist must have 6 components, got shape {xi.shape}")
    out = np.zeros(xi.shape[:-1] + (4, 4), dtype=xi.dtype)
    out[..., :3, :3] = skew(xi[..., 3:])
    out[..., :3, 3] = xi[..., :3]
    return out


def vee(m, tol=1e-12):
    """Inverse of :func:`hat`; rejects matrices that are not in se(3)."""
    m = np.asarray(m)
    if m.shape[-2:] != (4, 4):
        raise ValueError(f"expected a 4x4 matrix, got shape {m.shape}")
    rot = m[..., :3, :3]
    if np.any(np.abs(rot + np.swapaxes(rot, -1, -2)) > tol) or np.any(np.abs(m[..., 3, :]) > tol):
        raise ValueError("matrix is not a twist: rotational block must be skew, bottom row zero")
    return np.concatenate([m[..., :3, 3], unskew(rot)], axis=-1)


def curly_hat(xi):
    """6x6 adjoint-algebra matrix ``ad(xi)`` acting on twists."""
    xi = np.asarray(xi)
    out = np.zeros(xi.shape[:-1] + (6, 6), dtype=xi.dtype)
    ph = skew(xi[..., 3:])
    out[..., :3, :3] = ph
    out[..., 3:, 3:] = ph
    out[..., :3, 3:] = skew(xi[..., :3])
    return out


def _theta2(phi):
    return np.einsum("...i,...i->...", phi, phi)


def _small(t2):
    return np.real(t2) < SMALL_ANGLE**2


def _safe(t2, small):
    # placeholder value keeps the unused branch of np.where finite
    return np.where(small, np.ones_like(t2), t2)


def _so3_coeffs(t2):
    """Return (sin t / t, (1 - cos t)/t^2, (t - sin t)/t^3)."""
    small = _small(t2)
    s2 = _safe(t2, small)
    t = np.sqrt(s2)
    a = np.where(small, 1.0 - t2 / 6.0, np.sin(t) / t)
    # 2 sin^2(t/2) avoids the cancellation in 1 - cos t just above the switch
    b = np.where(small, 0.5 - t2 / 24.0, 2.0 * np.sin(0.5 * t) ** 2 / s2)
    series = np.real(t2) < _SERIES_CUTOFF**2
    c_series = 1.0 / 6.0 - t2 / 120.0 + t2**2 / 5040.0 - t2**3 / 362880.0
    c = np.where(series, c_series, (t - np.sin(t)) / (s2 * t))
    return a, b, c


def so3_exp(phi):
    phi = np.asarray(phi)
    a, b, _ = _so3_coeffs(_theta2(phi))
    K = skew(phi)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def so3_log(R):
    """Rotation vector of ``R``; raises :class:`NearPiRotationError` near pi."""
    R = np.asarray(R, dtype=float)
    w = 0.5 * unskew(R - np.swapaxes(R, -1, -2))
    sin_t = np.linalg.norm(w, axis=-1)
    cos_t = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    theta = np.arctan2(sin_t, cos_t)
    if np.any(theta > LOG_ANGLE_LIMIT):
        raise NearPiRotationError(f"rotation angle {np.max(theta):.9f} too close to pi for log")
    small = theta < SMALL_ANGLE
    denom = np.where(small, 1.0, sin_t)
    scale = np.where(small, 1.0 + theta**2 / 6.0, theta / denom)
    return scale[..., None] * w


def so3_left_jacobian(phi):
    phi = np.asarray(phi)
    _, b, c = _so3_coeffs(_theta2(phi))
    K = skew(phi)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + b[..., None, None] * K + c[..., None, None] * (K @ K)


def so3_left_jacobian_inv(phi):
    phi = np.asarray(phi)
    t2 = _theta2(phi)
    small = _small(t2)
    s2 = _safe(t2, small)
    t = np.sqrt(s2)
    series = np.real(t2) < _SERIES_CUTOFF**2
    e_series = 1.0 / 12.0 + t2 / 720.0 + t2**2 / 30240.0
    e = np.where(series, e_series, (1.0 - t * np.sin(t) / (4.0 * np.sin(0.5 * t) ** 2)) / s2)
    K = skew(phi)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye - 0.5 * K + e[..., None, None] * (K @ K)


def _q_coeffs(t2):
    small = np.real(t2) < _SERIES_CUTOFF**2
    s2 = _safe(t2, small)
    t = np.sqrt(s2)
    s, c = np.sin(t), np.cos(t)
    c1 = np.where(small, 1 / 6 - t2 / 120 + t2**2 / 5040, (t - s) / (s2 * t))
    c2 = np.where(small, 1 / 24 - t2 / 720 + t2**2 / 40320, (s2 / 2 + c - 1) / (s2 * s2))
    c3 = np.where(small, 1 / 120 - t2 / 2520 + t2**2 / 120960, (2 * t - 3 * s + t * c) / (2 * s2 * s2 * t))
    return c1, c2, c3


def se3_q_matrix(rho, phi):
    """Off-diagonal block of the SE(3) left Jacobian."""
    rho = np.asarray(rho)
    phi = np.asarray(phi)
    c1, c2, c3 = _q_coeffs(_theta2(phi))
    P = skew(phi)
    Rh = skew(rho)
    PR = P @ Rh
    RP = Rh @ P
    PRP = PR @ P
    PP = P @ P
    c1 = c1[..., None, None]
    c2 = c2[..., None, None]
    c3 = c3[..., None, None]
    return (0.5 * Rh + c1 * (PR + RP + PRP) + c2 * (PP @ Rh + RP @ P - 3.0 * PRP)
            + c3 * (PRP @ P + PP @ Rh @ P))


def se3_exp(xi):
    """Exponential map of a twist ``[rho; phi]`` to a 4x4 pose."""
    xi = np.asarray(xi)
    rho, phi = xi[..., :3], xi[..., 3:]
    out = np.zeros(xi.shape[:-1] + (4, 4), dtype=np.result_type(xi, float))
    out[..., :3, :3] = so3_exp(phi)
    out[..., :3, 3] = np.einsum("...ij,...j->...i", so3_left_jacobian(phi), rho)
    out[..., 3, 3] = 1.0
    return out


def se3_log(T):
    """Logarithm of a pose; the rotation angle must stay below ``pi - 1e-6``."""
    T = np.asarray(T, dtype=float)
    phi = so3_log(T[..., :3, :3])
    rho = np.einsum("...ij,...j->...i", so3_left_jacobian_inv(phi), T[..., :3, 3])
    return np.concatenate([rho, phi], axis=-1)


def se3_inverse(T):
    T = np.asarray(T)
    out = np.zeros_like(T)
    Rt = np.swapaxes(T[..., :3, :3], -1, -2)
    out[..., :3, :3] = Rt
    out[..., :3, 3] = -np.einsum("...ij,...j->...i", Rt, T[..., :3, 3])
    out[..., 3, 3] = 1.0
    return out


def adjoint(T):
    """6x6 adjoint of a pose, acting on ``[rho; phi]`` twists."""
    T = np.asarray(T)
    R = T[..., :3, :3]
    out = np.zeros(T.shape[:-2] + (6, 6), dtype=T.dtype)
    out[..., :3, :3] = R
    out[..., 3:, 3:] = R
    out[..., :3, 3:] = skew(T[..., :3, 3]) @ R
    return out


def left_jacobian(xi):
    xi = np.asarray(xi)
    rho, phi = xi[..., :3], xi[..., 3:]
    J = so3_left_jacobian(phi)
    out = np.zeros(xi.shape[:-1] + (6, 6), dtype=np.result_type(xi, float))
    out[..., :3, :3] = J
    out[..., 3:, 3:] = J
    out[..., :3, 3:] = se3_q_matrix(rho, phi)
    return out


def left_jacobian_inv(xi):
    xi = np.asarray(xi)
    rho, phi = xi[..., :3], xi[..., 3:]
    Ji = so3_left_jacobian_inv(phi)
    out = np.zeros(xi.shape[:-1] + (6, 6), dtype=np.result_type(xi, float))
    out[..., :3, :3] = Ji
    out[..., 3:, 3:] = Ji
    out[..., :3, 3:] = -Ji @ se3_q_matrix(rho, phi) @ Ji
    return out


def right_jacobian(xi):
    """Right Jacobian: ``exp(xi + d) ~= exp(xi) exp(J_r(xi) d)`` to first order."""
    return left_jacobian(-np.asarray(xi))


def right_jacobian_inv(xi):
    return left_jacobian_inv(-np.asarray(xi))


def right_jacobian_inv_times_derivative(xi, v, h=1e-30):
    """Exact derivative of ``J_r(xi)^-1 v`` with respect to ``xi``.

    Evaluated by complex-step differentiation, so there is no subtractive
    cancellation and the result is accurate to machine precision.  Shapes:
    ``xi``, ``v`` are ``(..., 6)``; the result is ``(..., 6, 6)``.
    """
    xi = np.asarray(xi, dtype=float)
    v = np.asarray(v, dtype=float)
    cols = []
    for j in range(6):
        step = np.zeros(6, dtype=complex)
        step[j] = 1j * h
        Ji = right_jacobian_inv(xi + step)
        cols.append(np.imag(np.einsum("...ij,...j->...i", Ji, v)) / h)
    return np.stack(cols, axis=-1)


def compose(A, B):
    return np.asarray(A) @ np.asarray(B)


def make_pose(R, t):
    R = np.asarray(R, dtype=float)
    t = np.asarray(t, dtype=float)
    out = np.zeros(R.shape[:-2] + (4, 4))
    out[..., :3, :3] = R
    out[..., :3, 3] = t
    out[..., 3, 3] = 1.0
    return out


def normalize_rotation(R):
    """Project onto SO(3) by SVD; applied after solver updates."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=float))
    D = np.ones(U.shape[:-1])
    D[..., -1] = np.sign(np.linalg.det(U @ Vt))
    return (U * D[..., None, :]) @ Vt


def normalize_pose(T):
    T = np.array(T, dtype=float, copy=True)
    T[..., :3, :3] = normalize_rotation(T[..., :3, :3])
    T[..., 3, :3] = 0.0
    T[..., 3, 3] = 1.0
    return T


def is_rotation(R, tol=1e-9):
    R = np.asarray(R)
    eye = np.eye(3)
    ortho = np.abs(R @ np.swapaxes(R, -1, -2) - eye).max() <= tol
    return bool(ortho and np.all(np.abs(np.linalg.det(R) - 1.0) <= tol))


def retract(T, delta):
    """Right perturbation ``T exp(delta)``."""
    return np.asarray(T) @ se3_exp(delta)


def local(T0, T):
    """Inverse of :func:`retract`: ``log(T0^-1 T)``."""
    return se3_log(se3_inverse(T0) @ T)
