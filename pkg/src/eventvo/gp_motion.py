"""White-noise-on-acceleration GP prior on SE(3) x R^6.

A knot perturbation is ordered ``[d_pose(6); d_velocity(6)]`` where the pose is
perturbed on the right, ``T <- T exp(d_pose)``, and the body velocity
additively.  Jacobians with respect to a knot pair are 24 columns wide:
``[d_pose_k, d_vel_k, d_pose_k1, d_vel_k1]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import liegroups as lg


@dataclass(frozen=True)
class MotionState:
    t: float
    pose: np.ndarray = field(default_factory=lambda: np.eye(4))
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(6))

    def __post_init__(self):
        if not np.isfinite(self.t):
            raise ValueError("motion state timestamp must be finite")
        object.__setattr__(self, "pose", np.asarray(self.pose, dtype=float))
        object.__setattr__(self, "velocity", np.asarray(self.velocity, dtype=float))


@dataclass(frozen=True)
class QcModel:
    """Power spectral density of the body acceleration noise (6x6, SPD)."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.shape != (6, 6) or not np.allclose(m, m.T):
            raise ValueError("Qc must be a symmetric 6x6 matrix")
        if np.linalg.eigvalsh(m).min() <= 0:
            raise ValueError("Qc must be positive definite")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def diagonal(cls, sigma_trans=1.0, sigma_rot=1.0):
        return cls(np.diag([sigma_trans**2] * 3 + [sigma_rot**2] * 3))


def transition(dt):
    if dt < 0:
        raise ValueError(f"transition interval must be non-negative, got {dt}")
    phi = np.eye(12)
    phi[:6, 6:] = dt * np.eye(6)
    return phi


def _cov(dt, qc):
    q = qc.matrix
    return np.block([[dt**3 / 3.0 * q, dt**2 / 2.0 * q], [dt**2 / 2.0 * q, dt * q]])


def process_cov(dt, qc):
    """Covariance accumulated over ``dt`` by the white-noise acceleration."""
    if not dt > 0:
        raise ValueError(f"process covariance needs dt > 0, got {dt}")
    return _cov(dt, qc)


def process_info_sqrt(dt, qc):
    """Upper factor ``W`` with ``W^T W = Q(dt)^-1``, used to whiten prior residuals."""
    L = np.linalg.cholesky(process_cov(dt, qc))
    return np.linalg.inv(L)


def interpolation_coefficients(tau, dt):
    """Scalar 2x2 factors of the query matrices.

    Both ``Lambda`` and ``Psi`` are Kronecker products ``lam (x) I6`` and
    ``psi (x) I6`` because Qc cancels between ``Q_tau`` and ``Q_dt^-1``.
    ``tau`` and ``dt`` broadcast; results have shape ``shape + (2, 2)``.
    """
    tau, dt = np.broadcast_arrays(np.asarray(tau, dtype=float), np.asarray(dt, dtype=float))
    shape = tau.shape
    s = dt - tau
    q_tau = np.empty(shape + (2, 2))
    q_tau[..., 0, 0] = tau**3 / 3.0
    q_tau[..., 0, 1] = q_tau[..., 1, 0] = tau**2 / 2.0
    q_tau[..., 1, 1] = tau
    phi_s_t = np.zeros(shape + (2, 2))
    phi_s_t[..., 0, 0] = phi_s_t[..., 1, 1] = 1.0
    phi_s_t[..., 1, 0] = s
    q_inv = np.empty(shape + (2, 2))
    q_inv[..., 0, 0] = 12.0 / dt**3
    q_inv[..., 0, 1] = q_inv[..., 1, 0] = -6.0 / dt**2
    q_inv[..., 1, 1] = 4.0 / dt
    psi = q_tau @ phi_s_t @ q_inv
    phi_dt = np.zeros(shape + (2, 2))
    phi_dt[..., 0, 0] = phi_dt[..., 1, 1] = 1.0
    phi_dt[..., 0, 1] = dt
    phi_tau = np.zeros(shape + (2, 2))
    phi_tau[..., 0, 0] = phi_tau[..., 1, 1] = 1.0
    phi_tau[..., 0, 1] = tau
    lam = phi_tau - psi @ phi_dt
    return lam, psi


def query_matrices(tk, tk1, t, qc):
    """Full 12x12 ``(Lambda, Psi)`` written out from their definition."""
    dt = tk1 - tk
    tau = t - tk
    Q_tau = _cov(tau, qc)
    Q_dt = _cov(dt, qc)
    Psi = Q_tau @ transition(tk1 - t).T @ np.linalg.inv(Q_dt)
    Lam = transition(tau) - Psi @ transition(dt)
    return Lam, Psi


@dataclass
class IntervalTerms:
    """Quantities shared by every query inside a batch of knot intervals."""

    xi: np.ndarray          # (K, 6) log(T_k^-1 T_k1)
    jr_inv: np.ndarray      # (K, 6, 6)
    jl_inv: np.ndarray      # (K, 6, 6)
    d_jrinv_v: np.ndarray   # (K, 6, 6) derivative of J_r(xi)^-1 w_k1 wrt xi
    v1: np.ndarray          # (K, 6) J_r(xi)^-1 w_k1


def interval_terms(Tk, wk, Tk1, wk1, derivatives=True):
    Tk = np.asarray(Tk, dtype=float)
    Tk1 = np.asarray(Tk1, dtype=float)
    wk1 = np.asarray(wk1, dtype=float)
    xi = lg.se3_log(lg.se3_inverse(Tk) @ Tk1)
    jr_inv = lg.right_jacobian_inv(xi)
    v1 = np.einsum("...ij,...j->...i", jr_inv, wk1)
    if not derivatives:
        return IntervalTerms(xi=xi, jr_inv=jr_inv, jl_inv=None, d_jrinv_v=None, v1=v1)
    return IntervalTerms(
        xi=xi,
        jr_inv=jr_inv,
        jl_inv=lg.left_jacobian_inv(xi),
        d_jrinv_v=lg.right_jacobian_inv_times_derivative(xi, wk1),
        v1=v1,
    )


def prior_residual_batch(dt, Tk, wk, Tk1, wk1, jacobian=True):
    """Prior residuals of K knot pairs, with 12x12 Jacobians for each side.

    Returns ``(e, J_k, J_k1)`` of shapes ``(K, 12)``, ``(K, 12, 12)``,
    ``(K, 12, 12)``; the Jacobians are None with ``jacobian=False``.
    """
    dt = np.asarray(dt, dtype=float)
    wk = np.asarray(wk, dtype=float)
    terms = interval_terms(Tk, wk, Tk1, wk1, derivatives=jacobian)
    e = np.concatenate([dt[:, None] * wk - terms.xi, wk - terms.v1], axis=-1)
    if not jacobian:
        return e, None, None
    K = terms.xi.shape[0]
    eye = np.broadcast_to(np.eye(6), (K, 6, 6))
    Jk = np.zeros((K, 12, 12))
    Jk1 = np.zeros((K, 12, 12))
    Jk[:, :6, :6] = terms.jl_inv
    Jk[:, :6, 6:] = dt[:, None, None] * eye
    Jk[:, 6:, :6] = terms.d_jrinv_v @ terms.jl_inv
    Jk[:, 6:, 6:] = eye
    Jk1[:, :6, :6] = -terms.jr_inv
    Jk1[:, 6:, :6] = -terms.d_jrinv_v @ terms.jr_inv
    Jk1[:, 6:, 6:] = -terms.jr_inv
    return e, Jk, Jk1


def prior_residual(xk: MotionState, xk1: MotionState):
    """GP prior residual between two consecutive knots and its Jacobians."""
    dt = xk1.t - xk.t
    if not dt > 0:
        raise ValueError("prior residual needs strictly increasing knot times")
    e, Jk, Jk1 = prior_residual_batch(
        np.array([dt]), xk.pose[None], xk.velocity[None], xk1.pose[None], xk1.velocity[None])
    return e[0], Jk[0], Jk1[0]


def query_local(terms, idx, lam, psi, wk, jacobian=True):
    """Interpolated local state and its 12x24 Jacobian for queries in intervals ``idx``.

    ``lam``/``psi`` are the per-query 2x2 coefficients, ``wk`` the per-query
    velocity of the left knot.  With ``jacobian=False`` the Jacobian is None.
    """
    xi, v1 = terms.xi[idx], terms.v1[idx]
    l01, l11 = lam[..., 0, 1], lam[..., 1, 1]
    p00, p01, p10, p11 = psi[..., 0, 0], psi[..., 0, 1], psi[..., 1, 0], psi[..., 1, 1]
    xi_t = l01[:, None] * wk + p00[:, None] * xi + p01[:, None] * v1
    xid_t = l11[:, None] * wk + p10[:, None] * xi + p11[:, None] * v1
    if not jacobian:
        return xi_t, xid_t, None
    jl_inv, jr_inv, D = terms.jl_inv, terms.jr_inv, terms.d_jrinv_v
    # interval-level blocks first, then gathered per query
    K = jr_inv.shape[0]
    dxi = np.zeros((K, 6, 24))
    dxi[:, :, 0:6] = -jl_inv
    dxi[:, :, 12:18] = jr_inv
    dv1 = np.zeros((K, 6, 24))
    dv1[:, :, 0:6] = -D @ jl_inv
    dv1[:, :, 12:18] = D @ jr_inv
    dv1[:, :, 18:24] = jr_inv
    dxi, dv1 = dxi[idx], dv1[idx]
    dwk = np.zeros((1, 6, 24))
    dwk[0, :, 6:12] = np.eye(6)
    s = (slice(None), None, None)
    d_xi_t = l01[s] * dwk + p00[s] * dxi + p01[s] * dv1
    d_xid_t = l11[s] * dwk + p10[s] * dxi + p11[s] * dv1
    return xi_t, xid_t, np.concatenate([d_xi_t, d_xid_t], axis=1)


def query_pose(Tk, xi_t, d_local):
    """Global pose ``T_k exp(xi_t)`` and its 6x24 right-perturbation Jacobian."""
    E = lg.se3_exp(xi_t)
    T = Tk @ E
    d_pose = lg.right_jacobian(xi_t) @ d_local[:, :6, :]
    d_pose[:, :, 0:6] += lg.adjoint(lg.se3_inverse(E))
    return T, d_pose


@dataclass(frozen=True)
class Interpolation:
    state: MotionState
    local: np.ndarray        # (12,) [xi(t); xi_dot(t)]
    d_local: np.ndarray      # (12, 24)
    d_pose: np.ndarray       # (6, 24)


def interpolate(xk: MotionState, xk1: MotionState, qc: QcModel, t: float) -> Interpolation:
    """Query the continuous-time trajectory at ``t`` between two knots."""
    if not xk.t <= t <= xk1.t:
        raise ValueError(f"query time {t} outside knot interval [{xk.t}, {xk1.t}]")
    if not xk1.t > xk.t:
        raise ValueError("knot times must be strictly increasing")
    del qc  # cancels out of the query matrices, see interpolation_coefficients
    lam, psi = interpolation_coefficients(np.array([t - xk.t]), xk1.t - xk.t)
    terms = interval_terms(xk.pose[None], xk.velocity[None], xk1.pose[None], xk1.velocity[None])
    idx = np.zeros(1, dtype=int)
    xi_t, xid_t, d_local = query_local(terms, idx, lam, psi, xk.velocity[None])
    T, d_pose = query_pose(xk.pose[None], xi_t, d_local)
    vel = lg.right_jacobian(xi_t[0]) @ xid_t[0]
    state = MotionState(t=t, pose=T[0], velocity=vel)
    return Interpolation(state, np.concatenate([xi_t[0], xid_t[0]]), d_local[0], d_pose[0])


def extrapolate(x: MotionState, dt: float) -> MotionState:
    """Constant-velocity prediction ``T exp(dt w)``, ``w`` unchanged."""
    return MotionState(t=x.t + dt, pose=x.pose @ lg.se3_exp(dt * x.velocity), velocity=x.velocity.copy())
