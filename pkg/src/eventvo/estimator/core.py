"""Consumer side of the pipeline: feature tracks in, knots and landmarks out."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import cv2
import numpy as np

from .. import gp_motion as gp
from .. import liegroups as lg
from ..gp_motion import MotionState, QcModel
from ..tracks import CLOSED, FeatureTrajectory
from .camera import CameraModel
from .factors import DistancePrior, PosePrior, interval_index
from .marginalization import dynamic_marginalization
from .solver import SolverOptions, solve
from .triangulation import TriangulationGates, triangulate
from .window import Landmark, SlidingWindow, WindowParams

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EstimatorConfig:
    knot_dt: float = 0.05
    n_min: int = 5
    n0: int = 6
    n_init: int = 15
    init_max_knots: int = 40
    min_track_obs: int = 5
    d_min: float = 0.05
    d_max: float = 200.0
    max_reproj_rms: float = 3.0
    min_parallax_deg: float = 1.0
    pixel_sigma: float = 1.0
    huber_delta: float = 2.0
    qc_sigma_trans: float = 10.0
    qc_sigma_rot: float = 0.02
    window_ceiling: int = 60
    gauge_pose_sigma: float = 1e-4
    gauge_scale_sigma: float = 1e-3
    lm_lambda_init: float = 1e-4
    lm_max_iterations: int = 50

    def __post_init__(self):
        if self.knot_dt <= 0:
            raise ValueError("knot spacing must be positive")
        if self.n_min < 2 or self.n0 < 2:
            raise ValueError("window sizes must be at least 2")
        if self.window_ceiling < self.n_min + 1:
            raise ValueError("window ceiling must exceed the minimum window size")
        if not 0 < self.d_min < self.d_max:
            raise ValueError("need 0 < d_min < d_max")


@dataclass(frozen=True)
class EstimatorSnapshot:
    """Immutable per-solve state published to the export sink."""

    solve_index: int
    times: np.ndarray
    poses: np.ndarray
    velocities: np.ndarray
    landmarks: dict
    cost: float
    iterations: int
    runtime: float
    n_factors: int


@dataclass
class EstimatorStats:
    window_sizes: list = field(default_factory=list)
    factor_counts: list = field(default_factory=list)
    solve_times: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    marginalized_knots: int = 0
    forced_knots: int = 0


class Estimator:
    def __init__(self, camera: CameraModel, config: EstimatorConfig | None = None, sink=None):
        self.camera = camera
        self.config = c = config or EstimatorConfig()
        self.qc = QcModel.diagonal(c.qc_sigma_trans, c.qc_sigma_rot)
        self.window = SlidingWindow(camera, self.qc, WindowParams(c.pixel_sigma, c.huber_delta, c.d_min))
        self.gates = TriangulationGates(c.max_reproj_rms, c.min_parallax_deg, c.d_min, c.d_max)
        self.solver_options = SolverOptions(lambda_init=c.lm_lambda_init, max_iterations=c.lm_max_iterations)
        self.sink = sink
        self.tracks: dict[int, tuple] = {}
        self.closed: set = set()
        self.dead: set = set()
        self.pending: dict[int, int] = {}   # id -> measurement count at last attempt
        self.history: list[MotionState] = []
        self.retired: dict[int, np.ndarray] = {}   # marginalized landmark estimates
        self.initialized = False
        self.latest_t = -np.inf
        self.stats = EstimatorStats()
        self._solves = 0
        self._init_floor = -np.inf
        self._init_attempt_t = -np.inf

    # -- input ------------------------------------------------------------------
    def process(self, snap: FeatureTrajectory):
        """Consume one track snapshot; may trigger knot insertion and a solve."""
        if snap.id in self.dead or len(snap) == 0:
            return
        uv = self.camera.undistort(snap.uv)
        self.tracks[snap.id] = (np.array(snap.t), uv)
        if snap.status == CLOSED:
            self.closed.add(snap.id)
        self.latest_t = max(self.latest_t, float(snap.t[-1]))
        if not self.initialized:
            self._try_initialize()
            return
        lm = self.window.landmarks.get(snap.id)
        if lm is not None:
            lm.t, lm.uv = self.tracks[snap.id]
        elif snap.id not in self.pending:
            self.pending[snap.id] = 0
        if self.latest_t >= self.window.times[-1]:
            self._step()

    def finish(self):
        """Flush: one last solve over whatever is in the window."""
        if self.initialized and len(self.window) >= 2:
            self._triangulate_pending()
            self._solve()

    # -- main step ----------------------------------------------------------------
    def _step(self):
        w = self.window
        while w.times[-1] <= self.latest_t:
            w.add_knot(gp.extrapolate(w.knot(-1), self.config.knot_dt))
        self._marginalize()
        self._triangulate_pending()
        self._solve()

    def _marginalize(self):
        w = self.window
        if len(w) < 2:
            return
        trajectories = {}
        for lid, lm in w.landmarks.items():
            sel = w.active_measurements(lid)
            if np.any(sel):
                trajectories[lid] = (float(lm.t[sel][0]), float(lm.t[-1]))
        assoc = w.association()
        plan = dynamic_marginalization(w.times, trajectories, self.config.n_min, lambda k: assoc[k])
        knots = list(plan.knots)
        marked = set(plan.trajectories)
        # safety valve for tracks that never end: bound the window from above
        n_forced = len(w) - len(knots) - self.config.window_ceiling
        if n_forced > 0:
            knots = list(range(len(knots) + n_forced))
            self.stats.forced_knots += n_forced
            log.warning("window above ceiling, forcing %d knots out", n_forced)
        if not knots and not marked:
            return
        for lid in marked:
            if lid in w.landmarks:
                self.retired[lid] = w.landmarks[lid].point.copy()
        removed = w.marginalize(knots, marked)
        self.history.extend(removed)
        self.stats.marginalized_knots += len(removed)
        for lid in marked:
            self.dead.add(lid)
            self.tracks.pop(lid, None)
        self._drop_weak_landmarks()

    def _drop_weak_landmarks(self):
        w = self.window
        for lid in list(w.landmarks):
            if w.active_measurements(lid).sum() < 2:
                del w.landmarks[lid]
                self.pending[lid] = 0
        t0 = w.times[0]
        for tid in list(self.pending):
            t, _ = self.tracks.get(tid, (None, None))
            if t is None or (tid in self.closed and t[-1] < t0):
                self.pending.pop(tid, None)
                self.tracks.pop(tid, None)
                self.dead.add(tid)

    def _triangulate_pending(self):
        w = self.window
        t0, tN = w.times[0], w.times[-1]
        for tid in sorted(self.pending):
            t, uv = self.tracks[tid]
            if len(t) == self.pending[tid]:
                continue
            self.pending[tid] = len(t)
            sel = (t >= t0) & (t < tN)
            if sel.sum() < self.config.min_track_obs:
                continue
            res = triangulate(w.interpolate_poses(t[sel]), uv[sel], self.camera, self.gates)
            if res.ok:
                w.landmarks[tid] = Landmark(res.point, t, uv, float(t[sel][0]))
                del self.pending[tid]

    def _solve(self):
        w = self.window
        start = time.perf_counter()
        report = solve(w, self.solver_options)
        runtime = time.perf_counter() - start
        lin = w.linearize(jacobian=False)
        self._solves += 1
        s = self.stats
        s.window_sizes.append(len(w))
        s.factor_counts.append(self.factor_count())
        s.solve_times.append(runtime)
        s.iterations.append(report.iterations)
        if self.sink is not None:
            self.sink(EstimatorSnapshot(
                self._solves, w.times.copy(), w.poses.copy(), w.vels.copy(),
                {k: lm.point.copy() for k, lm in w.landmarks.items()},
                lin.cost, report.iterations, runtime, s.factor_counts[-1]))
        return report

    def factor_count(self):
        w = self.window
        n_proj = sum(int(w.active_measurements(lid).sum()) for lid in w.landmarks)
        n = n_proj + max(len(w) - 1, 0) + len(w.pose_priors) + len(w.distance_priors)
        return n + (1 if w.prior is not None else 0)

    # -- initialization -----------------------------------------------------------
    def _pixel_at(self, t, uv, tq, half=0.03):
        """Pixel at ``tq`` from a local straight-line fit; None if not bracketed."""
        if not t[0] <= tq <= t[-1]:
            return None
        sel = np.abs(t - tq) <= half
        if sel.sum() < 2:
            sel = np.argsort(np.abs(t - tq))[:2]
        ts, us = t[sel], uv[sel]
        if np.ptp(ts) == 0:
            return us.mean(axis=0)
        A = np.stack([np.ones_like(ts), ts - tq], axis=1)
        coef, *_ = np.linalg.lstsq(A, us, rcond=None)
        return coef[0]

    def _try_initialize(self):
        c = self.config
        if len(self.tracks) < c.n_init or self.latest_t < self._init_attempt_t + c.knot_dt:
            return
        self._init_attempt_t = self.latest_t
        firsts = np.array(sorted(t[0] for t, _ in self.tracks.values()))
        t_a = max(float(firsts[c.n_init - 1]), self._init_floor)
        for n in range(c.n0, c.init_max_knots + 1):
            t_b = t_a + (n - 1) * c.knot_dt
            if t_b > self.latest_t:
                return
            ids, pa, pb = [], [], []
            for tid in sorted(self.tracks):
                t, uv = self.tracks[tid]
                a, b = self._pixel_at(t, uv, t_a), self._pixel_at(t, uv, t_b)
                if a is not None and b is not None:
                    ids.append(tid)
                    pa.append(a)
                    pb.append(b)
            if len(ids) < c.n_init:
                # too few tracks survive this long; start over later
                self._discard_before(t_a + c.knot_dt)
                return
            pose_b = self._relative_pose(np.array(pa), np.array(pb))
            if pose_b is not None:
                if self._bootstrap(t_a, n, pose_b):
                    return
                self._discard_before(t_a + c.knot_dt)
                return
        self._discard_before(t_a + c.knot_dt)

    def _discard_before(self, t):
        self._init_floor = t
        for tid in list(self.tracks):
            if self.tracks[tid][0][-1] < t:
                del self.tracks[tid]

    def _relative_pose(self, pa, pb):
        K = self.camera.K
        E, mask = cv2.findEssentialMat(pa, pb, K, method=cv2.RANSAC, prob=0.999, threshold=1.0)
        if E is None or E.shape != (3, 3):
            return None
        _, R, t, mask = cv2.recoverPose(E, pa, pb, K, mask=mask)
        inl = mask.ravel() > 0
        if inl.sum() < self.config.n_init:
            return None
        fa = np.c_[self.camera.normalized(pa[inl]), np.ones(inl.sum())]
        fb = np.c_[self.camera.normalized(pb[inl]), np.ones(inl.sum())]
        fa = (R @ (fa / np.linalg.norm(fa, axis=1, keepdims=True)).T).T
        fb = fb / np.linalg.norm(fb, axis=1, keepdims=True)
        ang = np.degrees(np.arccos(np.clip(np.sum(fa * fb, axis=1), -1, 1)))
        if np.median(ang) < self.config.min_parallax_deg:
            return None
        # camera b in the frame of camera a
        return lg.make_pose(R.T, (-R.T @ t).ravel())

    def _bootstrap(self, t_a, n, pose_b):
        c = self.config
        w = self.window
        xi = lg.se3_log(pose_b)
        span = (n - 1) * c.knot_dt
        vel = xi / span
        times = t_a + c.knot_dt * np.arange(n)
        poses = lg.se3_exp(np.outer(np.arange(n) / (n - 1), xi))
        w.times, w.poses = times, poses
        w.vels = np.tile(vel, (n, 1))
        w.knot_ids = np.arange(n)
        w._next_knot_id = n
        points = {}
        for tid in sorted(self.tracks):
            t, uv = self.tracks[tid]
            sel = (t >= times[0]) & (t < times[-1])
            if sel.sum() < c.min_track_obs:
                continue
            res = triangulate(w.interpolate_poses(t[sel]), uv[sel], self.camera, self.gates)
            if res.ok:
                points[tid] = res.point
        if len(points) < c.n_init:
            self._reset_window()
            return False
        # unit mean depth in the first camera fixes the monocular scale
        scale = 1.0 / np.mean([p[2] for p in points.values()])
        w.poses[:, :3, 3] *= scale
        w.vels[:, :3] *= scale
        for tid, p in points.items():
            t, uv = self.tracks[tid]
            sel = t >= times[0]
            w.landmarks[tid] = Landmark(p * scale, t, uv, float(t[sel][0]))
        w.pose_priors = [PosePrior(0, np.eye(4), c.gauge_pose_sigma)]
        dist = float(np.linalg.norm(w.poses[-1, :3, 3]))
        w.distance_priors = [DistancePrior(0, n - 1, dist, c.gauge_scale_sigma)]
        self._solve()
        self.initialized = True
        log.info("initialized at t=%.3f with %d knots and %d landmarks", t_a, n, len(points))
        for tid in self.tracks:
            if tid not in w.landmarks:
                self.pending[tid] = 0
        if self.latest_t >= w.times[-1]:
            self._step()
        return True

    def _reset_window(self):
        self.window = SlidingWindow(self.camera, self.qc, self.window.params)

    # -- output -------------------------------------------------------------------
    def trajectory(self):
        """Marginalized knots followed by the current window, oldest first."""
        states = list(self.history)
        states += [self.window.knot(i) for i in range(len(self.window))]
        return states

    def landmarks(self, include_retired=True):
        """Landmark estimates by track id; marginalized ones keep their last value."""
        out = dict(self.retired) if include_retired else {}
        out.update({k: lm.point.copy() for k, lm in self.window.landmarks.items()})
        return out


def densify(states, rate_hz):
    """GP-interpolated states between consecutive knots at ``rate_hz``."""
    if len(states) < 2 or rate_hz <= 0:
        return list(states)
    out = []
    for a, b in zip(states[:-1], states[1:]):
        out.append(a)
        n = int(np.floor((b.t - a.t) * rate_hz))
        for j in range(1, n):
            tq = a.t + j / rate_hz
            if tq < b.t - 1e-9:
                out.append(gp.interpolate(a, b, None, tq).state)
    out.append(states[-1])
    return out
