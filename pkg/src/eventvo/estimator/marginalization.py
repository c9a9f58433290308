"""Dynamic marginalization: which variables leave the window, and how.

Variables leaving the window are folded into a single Gaussian prior on their
Markov blanket by Schur complement.  The prior keeps its own linearization
points and is re-expressed at the current estimate every time it is evaluated.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .. import liegroups as lg

log = logging.getLogger(__name__)

DAMPING = 1e-8
EARLY_FRACTION = 0.2  # t_eps = 0.2 * t_0 + 0.8 * t_N


@dataclass(frozen=True)
class MarginalizationPlan:
    knots: list          # indices into the window, oldest first
    trajectories: set    # trajectory ids
    remaining_knots: list
    remaining_trajectories: set


def dynamic_marginalization(knot_times: Sequence[float], trajectories: Mapping[int, tuple],
                            n_min: int, associated: Callable[[int], Iterable[int]]) -> MarginalizationPlan:
    """Select knots and trajectories to marginalize.

    ``trajectories`` maps id -> ``(t_front, t_back)``, the first and last
    measurement times.  ``associated(k)`` returns the ids of trajectories with
    measurements between knot ``k`` and knot ``k + 1``.

    A trajectory is marked when it starts in ``[t_0, t_1)`` and ends before
    ``t_eps = 0.2 t_0 + 0.8 t_N``.  Knots are then marked front to back while
    every associated trajectory is marked, never shrinking the window below
    ``n_min`` knots.
    """
    n = len(knot_times)
    if n < 2:
        raise ValueError("the window needs at least two knots")
    t0, t1, tN = knot_times[0], knot_times[1], knot_times[-1]
    t_eps = EARLY_FRACTION * t0 + (1.0 - EARLY_FRACTION) * tN
    marked_f = {fid for fid, (front, back) in trajectories.items() if back < t_eps and t0 <= front < t1}

    marked_x = []
    for k in range(n):
        if n - len(marked_x) - 1 < n_min:
            break
        if set(associated(k)) - marked_f:
            break
        marked_x.append(k)
    return MarginalizationPlan(
        knots=marked_x,
        trajectories=marked_f,
        remaining_knots=[k for k in range(n) if k not in set(marked_x)],
        remaining_trajectories=set(trajectories) - marked_f,
    )


def _robust_inverse(M, what):
    M = 0.5 * (M + M.T)
    try:
        c = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        log.warning("rank-deficient %s block (%d dims), damping with %.0e", what, len(M), DAMPING)
        M = M + DAMPING * np.eye(len(M))
        return np.linalg.inv(M)
    ci = np.linalg.inv(c)
    return ci.T @ ci


def schur_eliminate(H, g, elim, keep, what="variable"):
    """Marginalize index set ``elim`` out of the quadratic ``(H, g)``."""
    elim = np.asarray(elim, dtype=int)
    keep = np.asarray(keep, dtype=int)
    if len(elim) == 0:
        return H[np.ix_(keep, keep)].copy(), g[keep].copy()
    Hmm_inv = _robust_inverse(H[np.ix_(elim, elim)], what)
    Hkm = H[np.ix_(keep, elim)]
    X = Hkm @ Hmm_inv
    Hn = H[np.ix_(keep, keep)] - X @ Hkm.T
    gn = g[keep] - X @ g[elim]
    return 0.5 * (Hn + Hn.T), gn


def marginalize_system(H, g, landmark_blocks, knot_blocks, keep):
    """Eliminate landmark blocks first (block-diagonal), then knot blocks.

    ``landmark_blocks`` is a list of index arrays, each a nuisance variable
    coupled only to knots; ``knot_blocks`` a flat index array.  Returns the
    information ``(H, g)`` on ``keep`` (in the given order).
    """
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    keep = np.asarray(keep, dtype=int)
    knot_blocks = np.asarray(knot_blocks, dtype=int)
    rest = np.concatenate([knot_blocks, keep]).astype(int)
    if landmark_blocks:
        lm_idx = np.concatenate(landmark_blocks).astype(int)
        Hrr = H[np.ix_(rest, rest)].copy()
        gr = g[rest].copy()
        for block in landmark_blocks:
            block = np.asarray(block, dtype=int)
            Hbb_inv = _robust_inverse(H[np.ix_(block, block)], "landmark")
            Hrb = H[np.ix_(rest, block)]
            X = Hrb @ Hbb_inv
            Hrr -= X @ Hrb.T
            gr -= X @ g[block]
        # landmark-landmark coupling would have made block elimination wrong
        off = H[np.ix_(lm_idx, lm_idx)].copy()
        for block in landmark_blocks:
            off[np.ix_(np.searchsorted(lm_idx, block), np.searchsorted(lm_idx, block))] = 0.0
        if np.any(off != 0.0):
            raise ValueError("marginalized landmarks are coupled to each other")
    else:
        Hrr = H[np.ix_(rest, rest)].copy()
        gr = g[rest].copy()
    n_k = len(knot_blocks)
    return schur_eliminate(Hrr, gr, np.arange(n_k), np.arange(n_k, len(rest)), what="knot")


@dataclass
class MarginalPrior:
    """Gaussian prior ``|| S dx + r0 ||^2`` on retained knots.

    ``dx`` stacks, per knot, ``[log(T0^-1 T); w - w0]`` relative to the
    linearization points.  ``H = S^T S`` and ``g = S^T r0`` are the marginal
    information and gradient.
    """

    knot_ids: list
    poses: np.ndarray      # (n, 4, 4) linearization points
    vels: np.ndarray       # (n, 6)
    H: np.ndarray
    g: np.ndarray
    S: np.ndarray
    r0: np.ndarray

    @classmethod
    def from_information(cls, knot_ids, poses, vels, H, g, rel_eps=1e-12):
        H = 0.5 * (H + H.T)
        evals, evecs = np.linalg.eigh(H)
        keep = evals > rel_eps * max(evals.max(), 0.0)
        sq = np.sqrt(evals[keep])
        S = sq[:, None] * evecs[:, keep].T
        r0 = (evecs[:, keep].T @ g) / sq
        return cls(list(knot_ids), np.array(poses), np.array(vels), H, g, S, r0)

    def delta(self, poses, vels):
        d_pose = lg.local(self.poses, poses)
        return np.concatenate([d_pose, vels - self.vels], axis=-1), d_pose

    def evaluate(self, poses, vels, jacobian=True):
        """Residual and Jacobian wrt right perturbations of the prior's knots."""
        dx, d_pose = self.delta(poses, vels)
        r = self.S @ dx.reshape(-1) + self.r0
        if not jacobian:
            return r, None
        n = len(self.knot_ids)
        Jd = np.zeros((12 * n, 12 * n))
        jinv = lg.right_jacobian_inv(d_pose)
        for i in range(n):
            Jd[12 * i:12 * i + 6, 12 * i:12 * i + 6] = jinv[i]
            Jd[12 * i + 6:12 * i + 12, 12 * i + 6:12 * i + 12] = np.eye(6)
        return r, self.S @ Jd


def landmark_coupling(H, n_knot_cols, n_landmarks):
    """Largest magnitude among landmark-landmark off-diagonal blocks of ``H``."""
    Hll = np.asarray(H[n_knot_cols:, n_knot_cols:].todense() if hasattr(H, "todense") else H[n_knot_cols:, n_knot_cols:])
    if n_landmarks == 0:
        return 0.0
    blocks = Hll.reshape(n_landmarks, 3, n_landmarks, 3).transpose(0, 2, 1, 3).copy()
    idx = np.arange(n_landmarks)
    blocks[idx, idx] = 0.0
    return float(np.abs(blocks).max())
