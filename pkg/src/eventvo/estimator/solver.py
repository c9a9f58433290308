"""Levenberg-Marquardt over a :class:`SlidingWindow` with landmark Schur complement."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

log = logging.getLogger(__name__)


class EstimationDivergence(RuntimeError):
    """Raised when the window produces a non-finite cost; carries a state dump."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}


class ArrowShapeError(ValueError):
    """Two landmarks share a Hessian block, so per-landmark elimination is invalid."""


@dataclass
class SolverOptions:
    lambda_init: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 10.0
    lambda_max: float = 1e10
    max_iterations: int = 50
    rel_cost_tol: float = 1e-6
    step_tol: float = 1e-8


@dataclass
class SolveReport:
    iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    costs: list = field(default_factory=list)
    reason: str = ""


def landmark_blocks(H, n_knot_cols, n_landmarks):
    """Diagonal 3x3 landmark blocks of ``H`` (sparse); raises if any off-diagonal block is set."""
    Hll = H[n_knot_cols:, n_knot_cols:].tocoo()
    bi, bj = Hll.row // 3, Hll.col // 3
    off = (bi != bj) & (Hll.data != 0.0)
    if np.any(off):
        raise ArrowShapeError("landmark-landmark coupling in the Hessian")
    blocks = np.zeros((n_landmarks, 3, 3))
    np.add.at(blocks, (bi, Hll.row % 3, Hll.col % 3), Hll.data)
    return blocks


def schur_solve(ne, lam=0.0):
    """Solve ``(H + lam I) dx = -g`` for arrow-form normal equations.

    Landmark blocks are eliminated first; returns ``(dx_knots, dx_landmarks)``
    or None when the reduced system is not positive definite.
    """
    nk = len(ne.gk)
    L = len(ne.Hll)
    S = ne.Hkk.copy()
    S[np.diag_indices(nk)] += lam
    rhs = -ne.gk
    if L:
        blocks = ne.Hll + lam * np.eye(3)
        try:
            inv = np.linalg.inv(blocks)
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(inv)):
            return None
        Y = np.einsum("kla,lab->klb", ne.Hkl.reshape(nk, L, 3), inv).reshape(nk, 3 * L)
        S -= Y @ ne.Hkl.T
        rhs = rhs + Y @ ne.gl
    try:
        c = sla.cho_factor(0.5 * (S + S.T))
    except np.linalg.LinAlgError:
        return None
    dxk = sla.cho_solve(c, rhs)
    if not L:
        return dxk, np.zeros(0)
    t = (ne.gl + ne.Hkl.T @ dxk).reshape(L, 3)
    dxl = -np.einsum("lab,lb->la", inv, t).reshape(-1)
    return dxk, dxl


def _dump(window):
    return {
        "knot_times": window.times.tolist(),
        "positions": window.poses[:, :3, 3].tolist(),
        "velocities": window.vels.tolist(),
        "n_landmarks": len(window.landmarks),
    }


def solve(window, options: SolverOptions | None = None) -> SolveReport:
    """Minimize the window cost in place."""
    o = options or SolverOptions()
    ne = window.normal_equations()
    cost = ne.cost
    if not np.isfinite(cost):
        raise EstimationDivergence("non-finite cost before optimization", _dump(window))
    report = SolveReport(initial_cost=cost, costs=[cost])
    lam = o.lambda_init
    for it in range(o.max_iterations):
        accepted = False
        while lam <= o.lambda_max:
            step = schur_solve(ne, lam)
            if step is None:
                lam *= o.lambda_up
                continue
            dxk, dxl = step
            saved = window.save()
            window.retract(dxk, dxl)
            # linearize at the trial point; reused as-is when the step is accepted
            trial = window.normal_equations()
            new_cost = trial.cost
            if not np.isfinite(new_cost):
                window.restore(saved)
                raise EstimationDivergence("non-finite residual during optimization", _dump(window))
            if new_cost <= cost:
                accepted = True
                lam = max(lam / o.lambda_down, 1e-12)
                break
            window.restore(saved)
            lam *= o.lambda_up
        report.iterations = it + 1
        if not accepted:
            report.reason = "damping limit"
            break
        step_norm = float(np.sqrt(dxk @ dxk + dxl @ dxl))
        decrease = (cost - new_cost) / max(cost, 1e-300)
        cost = new_cost
        report.costs.append(cost)
        if decrease < o.rel_cost_tol:
            report.reason = "relative cost decrease"
            break
        if step_norm < o.step_tol:
            report.reason = "step norm"
            break
        ne = trial
    else:
        report.reason = "iteration limit"
    report.final_cost = cost
    log.debug("LM: %d iterations, cost %.6g -> %.6g (%s)", report.iterations,
              report.initial_cost, report.final_cost, report.reason)
    return report
