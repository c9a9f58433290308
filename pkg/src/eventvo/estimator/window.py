"""Factor graph over a sliding window of knots and landmarks.

Column layout of every linearization: 12 columns per knot (pose then
velocity, oldest knot first) followed by 3 columns per landmark in the
insertion order of :attr:`SlidingWindow.landmarks`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .. import gp_motion as gp
from .. import liegroups as lg
from ..gp_motion import MotionState, QcModel
from .camera import CameraModel
from .factors import DistancePrior, PosePrior, huber, interval_index, project_batch
from .marginalization import MarginalPrior, marginalize_system

log = logging.getLogger(__name__)


@dataclass
class Landmark:
    point: np.ndarray
    t: np.ndarray          # all known measurement times of the trajectory
    uv: np.ndarray         # (m, 2) ideal pixels
    t_start: float         # measurements before this are not part of the graph


@dataclass
class Linearization:
    A: sp.csr_matrix | None
    r: np.ndarray
    cost: float
    n_knot_cols: int
    n_landmarks: int
    n_residuals: int


@dataclass
class NormalEquations:
    """``H = [[Hkk, Hkl], [Hkl^T, blockdiag(Hll)]]`` and ``g = [gk; gl]``."""

    Hkk: np.ndarray
    Hkl: np.ndarray
    Hll: np.ndarray     # (L, 3, 3)
    gk: np.ndarray
    gl: np.ndarray
    cost: float


@dataclass
class WindowParams:
    pixel_sigma: float = 1.0
    huber_delta: float = 2.0
    d_min: float = 0.05


class SlidingWindow:
    def __init__(self, camera: CameraModel, qc: QcModel, params: WindowParams | None = None):
        self.camera = camera
        self.qc = qc
        self.params = params or WindowParams()
        self.times = np.zeros(0)
        self.poses = np.zeros((0, 4, 4))
        self.vels = np.zeros((0, 6))
        self.knot_ids = np.zeros(0, dtype=int)
        self._next_knot_id = 0
        self.landmarks: dict[int, Landmark] = {}
        self.prior: MarginalPrior | None = None
        self.pose_priors: list[PosePrior] = []
        self.distance_priors: list[DistancePrior] = []
        self._gather_cache = None

    # -- state ---------------------------------------------------------------
    def __len__(self):
        return len(self.times)

    def add_knot(self, state: MotionState):
        if len(self.times) and state.t <= self.times[-1]:
            raise ValueError("knot times must be strictly increasing")
        self.times = np.append(self.times, state.t)
        self.poses = np.concatenate([self.poses, state.pose[None]])
        self.vels = np.concatenate([self.vels, state.velocity[None]])
        self.knot_ids = np.append(self.knot_ids, self._next_knot_id)
        self._next_knot_id += 1
        return int(self.knot_ids[-1])

    def knot(self, i) -> MotionState:
        return MotionState(float(self.times[i]), self.poses[i].copy(), self.vels[i].copy())

    def index_of(self, knot_id):
        idx = np.searchsorted(self.knot_ids, knot_id)
        if idx >= len(self.knot_ids) or self.knot_ids[idx] != knot_id:
            raise KeyError(knot_id)
        return int(idx)

    def save(self):
        return (self.poses.copy(), self.vels.copy(), {k: lm.point.copy() for k, lm in self.landmarks.items()})

    def restore(self, saved):
        poses, vels, points = saved
        self.poses, self.vels = poses.copy(), vels.copy()
        for k, p in points.items():
            self.landmarks[k].point = p.copy()

    def retract(self, dx_knots, dx_landmarks):
        d = dx_knots.reshape(-1, 12)
        self.poses = lg.normalize_pose(self.poses @ lg.se3_exp(d[:, :6]))
        self.vels = self.vels + d[:, 6:]
        for j, lm in enumerate(self.landmarks.values()):
            lm.point = lm.point + dx_landmarks[3 * j:3 * j + 3]

    def interpolate_poses(self, t):
        """Poses at arbitrary times inside the window (no Jacobians)."""
        t = np.asarray(t, dtype=float)
        k = interval_index(self.times, t)
        if np.any(k < 0):
            raise ValueError("query time outside the window")
        lam, psi = gp.interpolation_coefficients(t - self.times[k], self.times[k + 1] - self.times[k])
        terms = gp.interval_terms(self.poses[:-1], self.vels[:-1], self.poses[1:], self.vels[1:], derivatives=False)
        xi_t, _, _ = gp.query_local(terms, k, lam, psi, self.vels[k], jacobian=False)
        return self.poses[k] @ lg.se3_exp(xi_t)

    def active_measurements(self, landmark_id):
        lm = self.landmarks[landmark_id]
        if len(self.times) < 2:
            return np.zeros(0, dtype=bool)
        lo = max(lm.t_start, self.times[0])
        return (lm.t >= lo) & (lm.t < self.times[-1])

    def association(self):
        """Per knot index, the set of landmark ids with a measurement in ``[t_k, t_k1)``."""
        assoc = [set() for _ in range(len(self.times))]
        for lid, lm in self.landmarks.items():
            sel = self.active_measurements(lid)
            if not np.any(sel):
                continue
            for k in np.unique(interval_index(self.times, lm.t[sel])):
                if k >= 0:
                    assoc[k].add(lid)
        return assoc

    # -- linearization -------------------------------------------------------
    def _gather(self, landmark_ids):
        """Active measurements of the given landmarks, sorted by (interval, landmark).

        The structure only changes when knots or measurements do, so it is
        cached; landmark positions are looked up fresh on every call.
        """
        ids = tuple(self.landmarks) if landmark_ids is None else tuple(landmark_ids)
        key = (ids, len(self.times), float(self.times[0]), float(self.times[-1]),
               tuple((len(self.landmarks[i].t), self.landmarks[i].t_start) for i in ids))
        if self._gather_cache is None or self._gather_cache[0] != key:
            order = {lid: j for j, lid in enumerate(self.landmarks)}
            cols, ts, uvs = [], [], []
            for lid in ids:
                lm = self.landmarks[lid]
                sel = self.active_measurements(lid)
                n = int(sel.sum())
                if n == 0:
                    continue
                cols.append(np.full(n, order[lid]))
                ts.append(lm.t[sel])
                uvs.append(lm.uv[sel])
            if ts:
                lcol, t, uv = np.concatenate(cols), np.concatenate(ts), np.concatenate(uvs)
                k = interval_index(self.times, t)
                srt = np.lexsort((lcol, k))
                value = (lcol[srt], t[srt], uv[srt], k[srt])
            else:
                value = None
            self._gather_cache = (key, value)
        value = self._gather_cache[1]
        if value is None:
            return None
        lcol, t, uv, k = value
        points = np.array([lm.point for lm in self.landmarks.values()])
        return lcol, t, uv, k, points[lcol]

    def _factor_blocks(self, jacobian=True, landmark_ids=None, prior_knots=None, include_marginal=True):
        """Whitened residual/Jacobian blocks of every factor (or a subset).

        ``landmark_ids`` restricts projection factors; ``prior_knots`` restricts
        GP prior and gauge factors to those touching the given knot indices.
        Returns ``(projection, knot_blocks, cost)``: ``projection`` is None or
        ``(r (m,2), Jk (m,2,24), Jl (m,2,3), k (m,), lm (m,))``, each knot block
        ``(r (K,d), J (K,d,c), cols (K,c))`` with knot columns only.
        """
        N = len(self.times)
        p = self.params
        cost = 0.0
        proj = None
        blocks = []
        ids = list(self.landmarks) if landmark_ids is None else list(landmark_ids)
        gathered = self._gather(ids) if N >= 2 else None
        if gathered is not None:
            lcol, t, uv, k, pts = gathered
            terms = gp.interval_terms(self.poses[:-1], self.vels[:-1], self.poses[1:], self.vels[1:],
                                      derivatives=jacobian)
            b = project_batch(self.times, self.poses, self.vels, k, t, pts, uv, self.camera,
                              d_min=p.d_min, jacobian=jacobian, terms=terms)
            v = b.valid
            res = b.residual[v] / p.pixel_sigma
            rho, w = huber(np.linalg.norm(res, axis=1), p.huber_delta)
            cost += float(rho.sum())
            sw = np.sqrt(w)[:, None]
            Jk = Jl = None
            if jacobian:
                Jk = b.J_knots[v] * (sw[:, :, None] / p.pixel_sigma)
                Jl = b.J_landmark[v] * (sw[:, :, None] / p.pixel_sigma)
            proj = (res * sw, Jk, Jl, k[v], lcol[v])

        if N >= 2:
            pk = np.arange(N - 1)
            if prior_knots is not None:
                pk = np.array([i for i in range(N - 1) if i in prior_knots or i + 1 in prior_knots], dtype=int)
            if len(pk):
                r, J = self._gp_priors(pk, jacobian)
                cost += float((r * r).sum())
                blocks.append((r, J, 12 * pk[:, None] + np.arange(24)[None, :]))

        for pp in self.pose_priors:
            i = self._maybe_index(pp.knot_id)
            if i is None or (prior_knots is not None and i not in prior_knots):
                continue
            r, J = pp.evaluate(self.poses[i], jacobian)
            cost += float(r @ r)
            blocks.append((r[None], None if J is None else J[None], (12 * i + np.arange(6))[None]))
        for dp in self.distance_priors:
            ia, ib = self._maybe_index(dp.knot_a), self._maybe_index(dp.knot_b)
            if ia is None or ib is None:
                continue
            if prior_knots is not None and ia not in prior_knots and ib not in prior_knots:
                continue
            r, Ja, Jb = dp.evaluate(self.poses[ia], self.poses[ib], jacobian)
            cost += float(r @ r)
            J = None if Ja is None else np.hstack([Ja, Jb])[None]
            blocks.append((r[None], J, np.concatenate([12 * ia + np.arange(12), 12 * ib + np.arange(12)])[None]))

        if include_marginal and self.prior is not None:
            idx = np.array([self.index_of(kid) for kid in self.prior.knot_ids])
            r, J = self.prior.evaluate(self.poses[idx], self.vels[idx], jacobian)
            cost += float(r @ r)
            cols = (12 * idx[:, None] + np.arange(12)[None, :]).reshape(-1)
            blocks.append((r[None], None if J is None else J[None], cols[None]))
        return proj, blocks, cost

    def linearize(self, jacobian=True, landmark_ids=None, prior_knots=None, include_marginal=True):
        """Stack every factor (or a subset) into a sparse whitened Jacobian."""
        N, L = len(self.times), len(self.landmarks)
        nk = 12 * N
        proj, blocks, cost = self._factor_blocks(jacobian, landmark_ids, prior_knots, include_marginal)
        rows, cols, vals, res = [], [], [], []
        n = 0
        if proj is not None:
            r, Jk, Jl, k, lcol = proj
            m = len(r)
            if jacobian:
                c = np.concatenate([12 * k[:, None] + np.arange(24), nk + 3 * lcol[:, None] + np.arange(3)], axis=1)
                rr = np.arange(2 * m).reshape(m, 2)
                rows.append(np.repeat(rr.reshape(-1), 27))
                cols.append(np.repeat(c, 2, axis=0).reshape(-1))
                vals.append(np.concatenate([Jk, Jl], axis=2).reshape(-1))
            res.append(r.reshape(-1))
            n += 2 * m
        for r, J, c in blocks:
            K, d = r.shape
            if jacobian:
                rr = n + np.arange(K * d).reshape(K, d)
                rows.append(np.repeat(rr.reshape(-1), c.shape[1]))
                cols.append(np.repeat(c, d, axis=0).reshape(-1))
                vals.append(J.reshape(-1))
            res.append(r.reshape(-1))
            n += K * d
        r = np.concatenate(res) if res else np.zeros(0)
        A = None
        if jacobian:
            if rows:
                A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                                  shape=(n, nk + 3 * L))
            else:
                A = sp.csr_matrix((0, nk + 3 * L))
        return Linearization(A, r, cost, nk, L, n)

    def normal_equations(self):
        """Gauss-Newton system in arrow form, assembled without forming ``A``."""
        N, L = len(self.times), len(self.landmarks)
        nk = 12 * N
        proj, blocks, cost = self._factor_blocks()
        Hkk = np.zeros((nk, nk))
        gk = np.zeros(nk)
        Hkl = np.zeros((nk, 3 * L))
        Hll = np.zeros((L, 3, 3))
        gl = np.zeros((L, 3))
        if proj is not None and len(proj[0]):
            r, Jk, Jl, k, lcol = proj
            # measurements arrive sorted by (interval, landmark)
            kstart = np.flatnonzero(np.r_[True, k[1:] != k[:-1]])
            kend = np.r_[kstart[1:], len(k)]
            H4 = Hkk.reshape(N, 12, N, 12)
            g2 = gk.reshape(N, 12)
            for s, e in zip(kstart, kend):
                # one GEMM per interval instead of per-measurement outer products
                Js = Jk[s:e].reshape(-1, 24)
                Hs = Js.T @ Js
                gs = Js.T @ r[s:e].reshape(-1)
                i = k[s]
                H4[i:i + 2, :, i:i + 2, :] += Hs.reshape(2, 12, 2, 12)
                g2[i:i + 2] += gs.reshape(2, 12)
            pair = k * L + lcol
            pstart = np.flatnonzero(np.r_[True, pair[1:] != pair[:-1]])
            Hp = np.add.reduceat(np.einsum("mia,mib->mab", Jk, Jl), pstart, axis=0)   # (P, 24, 3)
            pk, pl = k[pstart], lcol[pstart]
            K4 = Hkl.reshape(N, 12, L, 3)
            K4[pk, :, pl, :] += Hp[:, :12]
            K4[pk + 1, :, pl, :] += Hp[:, 12:]
            np.add.at(Hll, lcol, np.einsum("mia,mib->mab", Jl, Jl))
            np.add.at(gl, lcol, np.einsum("mia,mi->ma", Jl, r))
        for r, J, c in blocks:
            JtJ = np.swapaxes(J, 1, 2) @ J
            Hkk.reshape(-1)[:] += np.bincount((c[:, :, None] * nk + c[:, None, :]).reshape(-1),
                                              JtJ.reshape(-1), nk * nk)
            gk += np.bincount(c.reshape(-1), np.einsum("kia,ki->ka", J, r).reshape(-1), nk)
        return NormalEquations(Hkk, Hkl, Hll, gk, gl.reshape(-1), cost)

    def _maybe_index(self, knot_id):
        try:
            return self.index_of(knot_id)
        except KeyError:
            return None

    def _gp_priors(self, pk, jacobian):
        dt = self.times[pk + 1] - self.times[pk]
        e, Jk, Jk1 = gp.prior_residual_batch(dt, self.poses[pk], self.vels[pk], self.poses[pk + 1], self.vels[pk + 1])
        q = self.qc.matrix
        Q = np.empty((len(pk), 12, 12))
        Q[:, :6, :6] = (dt**3 / 3.0)[:, None, None] * q
        Q[:, :6, 6:] = Q[:, 6:, :6] = (dt**2 / 2.0)[:, None, None] * q
        Q[:, 6:, 6:] = dt[:, None, None] * q
        W = np.linalg.inv(np.linalg.cholesky(Q))
        r = np.einsum("kij,kj->ki", W, e)
        J = np.concatenate([W @ Jk, W @ Jk1], axis=2) if jacobian else None
        return r, J

    def cost(self):
        return self.linearize(jacobian=False).cost

    def information(self):
        """Dense Gauss-Newton information ``H`` and gradient ``g`` of the whole window."""
        lin = self.linearize()
        H = (lin.A.T @ lin.A).toarray()
        return H, lin.A.T @ lin.r, lin

    # -- marginalization -----------------------------------------------------
    def marginalize(self, knot_indices, landmark_ids):
        """Fold the given oldest knots and landmarks into the marginal prior.

        Returns the removed knots as MotionStates.
        """
        knot_indices = sorted(int(k) for k in knot_indices)
        if knot_indices != list(range(len(knot_indices))):
            raise ValueError("only the oldest contiguous knots can be marginalized")
        landmark_ids = [lid for lid in self.landmarks if lid in set(landmark_ids)]
        if not knot_indices and not landmark_ids:
            return []
        mk = set(knot_indices)
        lin = self.linearize(landmark_ids=landmark_ids, prior_knots=mk, include_marginal=True)
        # only the Markov blanket columns are touched; a dense product on those is far cheaper
        A = lin.A.tocsc()
        used = np.flatnonzero(np.diff(A.indptr))
        Au = A[:, used].toarray()
        H = np.zeros((A.shape[1], A.shape[1]))
        H[np.ix_(used, used)] = Au.T @ Au
        g = np.zeros(A.shape[1])
        g[used] = Au.T @ lin.r
        order = {lid: j for j, lid in enumerate(self.landmarks)}
        nk = lin.n_knot_cols
        lm_blocks = [nk + 3 * order[lid] + np.arange(3) for lid in landmark_ids]
        knot_cols = np.concatenate([12 * k + np.arange(12) for k in knot_indices]) if knot_indices else np.zeros(0, int)
        touched = np.flatnonzero(np.abs(H).sum(axis=0) > 0)
        elim = set(knot_cols.tolist())
        for b in lm_blocks:
            elim.update(b.tolist())
        blanket_cols = np.array([c for c in touched if c not in elim], dtype=int)
        if np.any(blanket_cols >= nk):
            raise ValueError("marginalization would couple retained landmarks")
        blanket_knots = np.unique(blanket_cols // 12)
        keep_cols = np.concatenate([12 * k + np.arange(12) for k in blanket_knots]) if len(blanket_knots) else np.zeros(0, int)
        Hn, gn = marginalize_system(H, g, lm_blocks, knot_cols, keep_cols)

        removed = [self.knot(k) for k in knot_indices]
        if len(blanket_knots):
            self.prior = MarginalPrior.from_information(
                [int(self.knot_ids[k]) for k in blanket_knots], self.poses[blanket_knots],
                self.vels[blanket_knots], Hn, gn)
        else:
            self.prior = None
        for lid in landmark_ids:
            del self.landmarks[lid]
        n = len(knot_indices)
        removed_ids = set(int(i) for i in self.knot_ids[:n])
        self.times, self.poses, self.vels = self.times[n:], self.poses[n:], self.vels[n:]
        self.knot_ids = self.knot_ids[n:]
        self.pose_priors = [pp for pp in self.pose_priors if pp.knot_id not in removed_ids]
        self.distance_priors = [dp for dp in self.distance_priors
                                if dp.knot_a not in removed_ids and dp.knot_b not in removed_ids]
        return removed
