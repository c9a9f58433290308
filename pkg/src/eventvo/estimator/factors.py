"""GP projection factors and the small dense factors used for gauge fixing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import gp_motion as gp
from .. import liegroups as lg
from ..gp_motion import MotionState, QcModel
from .camera import CameraModel


@dataclass
class ProjectionBatch:
    predicted: np.ndarray      # (M, 2) ideal pixels
    residual: np.ndarray       # (M, 2) predicted - measured, pixels
    depth: np.ndarray          # (M,)
    valid: np.ndarray          # (M,) bool, False when depth <= d_min
    J_knots: np.ndarray | None = None   # (M, 2, 24) wrt [x_k, x_k1]
    J_landmark: np.ndarray | None = None  # (M, 2, 3)


def interval_index(times, t):
    """Left-closed interval ``[t_k, t_k1)`` containing each ``t``; -1 when outside."""
    k = np.searchsorted(times, t, side="right") - 1
    k[(k < 0) | (k >= len(times) - 1)] = -1
    return k


def project_batch(times, poses, vels, k, t, points, measured, cam: CameraModel,
                  d_min=0.05, jacobian=True, terms=None):
    """Residuals of M projection factors, vectorized.

    ``k`` is the interval of each measurement, ``points`` the world position of
    the observed landmark per measurement.
    """
    times = np.asarray(times, dtype=float)
    dt = times[k + 1] - times[k]
    lam, psi = gp.interpolation_coefficients(t - times[k], dt)
    if terms is None:
        terms = gp.interval_terms(poses[:-1], vels[:-1], poses[1:], vels[1:], derivatives=jacobian)
    xi_t, _, d_local = gp.query_local(terms, k, lam, psi, vels[k], jacobian=jacobian)
    if jacobian:
        T, d_pose = gp.query_pose(poses[k], xi_t, d_local)
    else:
        T = poses[k] @ lg.se3_exp(xi_t)
    R = T[:, :3, :3]
    pc = np.einsum("mji,mj->mi", R, points - T[:, :3, 3])
    depth = pc[:, 2]
    valid = depth > d_min
    safe = np.where(valid[:, None], pc, np.array([0.0, 0.0, 1.0]))
    predicted = cam.project(safe)
    out = ProjectionBatch(predicted, predicted - measured, depth, valid)
    if jacobian:
        Jp = cam.project_jacobian(safe)
        dpc = np.zeros((len(pc), 3, 6))
        dpc[:, :, :3] = -np.eye(3)
        dpc[:, :, 3:] = lg.skew(safe)
        out.J_knots = Jp @ dpc @ d_pose
        out.J_landmark = Jp @ np.swapaxes(R, 1, 2)
    return out


def project(xk: MotionState, xk1: MotionState, qc: QcModel, t: float, landmark, cam: CameraModel,
            measured=None, d_min=0.05):
    """Single GP projection factor.

    Returns ``(predicted, residual, J_knots (2x24), J_landmark (2x3), valid)``;
    ``valid`` is False when the landmark is not in front of the interpolated
    camera, in which case the factor should be treated as inactive.
    """
    if not xk.t <= t <= xk1.t:
        raise ValueError("measurement time outside the knot interval")
    del qc  # the query matrices do not depend on Qc
    measured = np.zeros(2) if measured is None else np.asarray(measured, dtype=float)
    times = np.array([xk.t, xk1.t])
    poses = np.stack([xk.pose, xk1.pose])
    vels = np.stack([xk.velocity, xk1.velocity])
    b = project_batch(times, poses, vels, np.zeros(1, dtype=int), np.array([t]),
                      np.asarray(landmark, dtype=float)[None], measured[None], cam, d_min=d_min)
    return b.predicted[0], b.residual[0], b.J_knots[0], b.J_landmark[0], bool(b.valid[0])


def huber(s, delta):
    """Huber cost ``rho(s)`` on whitened residual norms and its IRLS weight."""
    s = np.asarray(s, dtype=float)
    inside = s <= delta
    rho = np.where(inside, s * s, 2.0 * delta * s - delta * delta)
    w = np.where(inside, 1.0, delta / np.maximum(s, 1e-300))
    return rho, w


@dataclass
class PosePrior:
    """Unary Gaussian prior on a knot pose, ``log(T0^-1 T)`` whitened by ``1/sigma``."""

    knot_id: int
    pose: np.ndarray
    sigma: float

    def evaluate(self, T, jacobian=True):
        d = lg.local(self.pose, T)
        r = d / self.sigma
        if not jacobian:
            return r, None
        return r, lg.right_jacobian_inv(d) / self.sigma


@dataclass
class DistancePrior:
    """Fixes the monocular scale: distance between two knot positions."""

    knot_a: int
    knot_b: int
    distance: float
    sigma: float

    def evaluate(self, Ta, Tb, jacobian=True):
        diff = Tb[:3, 3] - Ta[:3, 3]
        n = np.linalg.norm(diff)
        r = np.array([(n - self.distance) / self.sigma])
        if not jacobian:
            return r, None, None
        u = diff / max(n, 1e-12)
        Ja = np.zeros((1, 12))
        Jb = np.zeros((1, 12))
        Ja[0, :3] = -(u @ Ta[:3, :3]) / self.sigma
        Jb[0, :3] = (u @ Tb[:3, :3]) / self.sigma
        return r, Ja, Jb
