"""Synthetic ground truth: camera trajectories, landmark fields, feature tracks, events.

Tracks are cut into segments of at most ``track_lifetime`` seconds separated
by ``redetect_gap``, which mimics a feature being lost and re-detected.  Each
segment is its own trajectory id.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field

import numpy as np

from . import gp_motion as gp
from . import liegroups as lg
from .estimator.camera import CameraModel
from .gp_motion import MotionState
from .tracks import CLOSED, ACTIVE, EventArray, FeatureTrajectory

log = logging.getLogger(__name__)

TRAJECTORY_KINDS = ("line", "circle", "screw", "gp")


def default_camera():
    return CameraModel(fx=320.0, fy=320.0, cx=320.0, cy=240.0, width=640, height=480)


@dataclass(frozen=True)
class SyntheticScene:
    trajectory: str = "circle"
    duration: float = 10.0
    radius: float = 2.0
    revolutions_per_s: float = 0.5
    look_at_z: float = 10.0
    line_velocity: tuple = (0.5, 0.0, 0.0)
    screw_rise: float = 0.2
    gp_sigma_trans: float = 0.5
    gp_sigma_rot: float = 0.1
    gp_initial_velocity: tuple = (0.5, 0.0, 0.0, 0.0, 0.0, 0.0)
    n_landmarks: int = 60
    box_min: tuple = (-6.0, -6.0, 6.0)
    box_max: tuple = (6.0, 6.0, 14.0)
    camera: CameraModel = field(default_factory=default_camera)
    rate_hz: float = 50.0
    pixel_sigma: float = 1.0
    min_depth: float = 0.5
    max_depth: float = 50.0
    border: float = 2.0
    track_lifetime: float = 2.0
    redetect_gap: float = 0.05
    parallax_threshold_deg: float = 1.0
    gt_rate_hz: float = 200.0

    def __post_init__(self):
        if self.trajectory not in TRAJECTORY_KINDS:
            raise ValueError(f"unknown trajectory kind {self.trajectory!r}")
        if self.duration <= 0 or self.rate_hz <= 0 or self.pixel_sigma < 0:
            raise ValueError("duration and rate must be positive, noise non-negative")
        if self.track_lifetime <= 0 or self.redetect_gap < 0:
            raise ValueError("track lifetime must be positive")
        if np.any(np.asarray(self.box_max) <= np.asarray(self.box_min)):
            raise ValueError("landmark box is empty")


# -- trajectories ---------------------------------------------------------------

def _look_at(p, target):
    f = target - p
    f /= np.linalg.norm(f, axis=-1, keepdims=True)
    x = np.cross(f, np.array([0.0, 0.0, 1.0]))
    x /= np.linalg.norm(x, axis=-1, keepdims=True)
    y = np.cross(f, x)
    return np.stack([x, y, f], axis=-1)


class Trajectory:
    """Ground-truth pose function ``T(t)`` (body to world) of a scene."""

    def __init__(self, scene: SyntheticScene, seed=0):
        self.scene = scene
        self._samples = None
        if scene.trajectory == "gp":
            self._samples = self._sample_gp(np.random.default_rng([seed, 7]))

    def _sample_gp(self, rng, dt=1e-3):
        s = self.scene
        n = int(np.ceil((s.duration + 0.1) / dt)) + 1
        qc = gp.QcModel.diagonal(s.gp_sigma_trans, s.gp_sigma_rot)
        L = np.linalg.cholesky(gp.process_cov(dt, qc))
        phi = gp.transition(dt)
        poses = np.empty((n, 4, 4))
        vels = np.empty((n, 6))
        poses[0] = np.eye(4)
        vels[0] = np.asarray(s.gp_initial_velocity, dtype=float)
        noise = rng.standard_normal((n - 1, 12)) @ L.T
        for k in range(n - 1):
            local = phi @ np.concatenate([np.zeros(6), vels[k]]) + noise[k]
            poses[k + 1] = lg.normalize_pose(poses[k] @ lg.se3_exp(local[:6]))
            vels[k + 1] = lg.right_jacobian(local[:6]) @ local[6:]
        return np.arange(n) * dt, poses, vels

    def poses(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        s = self.scene
        if s.trajectory == "line":
            T = np.broadcast_to(np.eye(4), (len(t), 4, 4)).copy()
            T[:, :3, 3] = t[:, None] * np.asarray(s.line_velocity, dtype=float)
            return T
        if s.trajectory in ("circle", "screw"):
            w = 2 * np.pi * s.revolutions_per_s
            rise = s.screw_rise if s.trajectory == "screw" else 0.0
            p = np.stack([s.radius * np.cos(w * t), s.radius * np.sin(w * t), rise * t], axis=-1)
            target = np.stack([np.zeros_like(t), np.zeros_like(t), s.look_at_z + rise * t], axis=-1)
            T = np.broadcast_to(np.eye(4), (len(t), 4, 4)).copy()
            T[:, :3, :3] = _look_at(p, target)
            T[:, :3, 3] = p
            return T
        ts, poses, vels = self._samples
        k = np.clip(np.searchsorted(ts, t, side="right") - 1, 0, len(ts) - 2)
        lam, psi = gp.interpolation_coefficients(t - ts[k], ts[k + 1] - ts[k])
        terms = gp.interval_terms(poses[k], vels[k], poses[k + 1], vels[k + 1], derivatives=False)
        xi_t, _, _ = gp.query_local(terms, np.arange(len(t)), lam, psi, vels[k], jacobian=False)
        return poses[k] @ lg.se3_exp(xi_t)

    def velocities(self, t, h=1e-5):
        """Body velocity by central difference of the pose function."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        a, b = self.poses(t - h), self.poses(t + h)
        return lg.se3_log(lg.se3_inverse(a) @ b) / (2 * h)

    def states(self, t):
        T = self.poses(t)
        V = self.velocities(t)
        return [MotionState(float(ti), Ti, Vi) for ti, Ti, Vi in zip(np.atleast_1d(t), T, V)]


# -- generation -----------------------------------------------------------------

@dataclass
class SyntheticData:
    scene: SyntheticScene
    seed: int
    trajectory: Trajectory
    states: list                 # dense ground-truth MotionStates
    landmarks: np.ndarray        # (n, 3) world points
    tracks: list                 # FeatureTrajectory, raw (distorted, noisy) pixels
    track_landmark: dict         # track id -> landmark index
    true_uv: dict                # track id -> (m, 2) noiseless ideal pixels
    excluded: list               # landmark indices never usefully visible


def camera_points(T, points):
    """World points into the camera frames of poses ``T`` (broadcasting)."""
    R = T[..., :3, :3]
    return np.einsum("...ji,...j->...i", R, points - T[..., :3, 3])


def _visible(scene, pc, uv):
    d = pc[:, 2]
    ok = (d > scene.min_depth) & (d < scene.max_depth)
    return ok & scene.camera.in_bounds(uv, margin=scene.border)


def _parallax_deg(T, point):
    rays = point - T[:, :3, 3]
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    c = np.clip(rays[1:] @ rays[0], -1.0, 1.0)
    return float(np.degrees(np.arccos(c.min()))) if len(c) else 0.0


def _segments(t, visible, phase, lifetime, gap):
    """Split visible samples into lifetime-limited runs; returns index arrays."""
    if np.isfinite(lifetime):
        period = lifetime + gap
        cyc = np.floor((t - phase) / period)
        keep = visible & ((t - phase - cyc * period) < lifetime)
    else:
        cyc = np.zeros_like(t)
        keep = visible
    idx = np.flatnonzero(keep)
    if len(idx) == 0:
        return []
    breaks = np.flatnonzero((np.diff(idx) != 1) | (np.diff(cyc[idx]) != 0)) + 1
    return np.split(idx, breaks)


def generate(scene: SyntheticScene, seed: int = 0) -> SyntheticData:
    rng = np.random.default_rng(seed)
    traj = Trajectory(scene, seed)
    t_gt = np.arange(0.0, scene.duration + 1e-9, 1.0 / scene.gt_rate_hz)
    states = traj.states(t_gt)
    lo, hi = np.asarray(scene.box_min, float), np.asarray(scene.box_max, float)
    points = lo + (hi - lo) * rng.random((scene.n_landmarks, 3))

    tracks, owner, true_uv, excluded = [], {}, {}, []
    next_id = 0
    for i, point in enumerate(points):
        n = rng.poisson(scene.rate_hz * scene.duration)
        t = np.sort(rng.random(n)) * scene.duration
        phase = rng.random() * (scene.track_lifetime + scene.redetect_gap) - scene.track_lifetime
        noise = rng.standard_normal((n, 2)) * scene.pixel_sigma
        if n < 2:
            excluded.append(i)
            continue
        T = traj.poses(t)
        pc = camera_points(T, point)
        uv = scene.camera.project(np.where(pc[:, 2:3] > 1e-9, pc, 1.0))
        vis = _visible(scene, pc, uv)
        if vis.sum() < 2 or _parallax_deg(T[vis], point) < scene.parallax_threshold_deg:
            log.info("landmark %d never usefully visible, excluded", i)
            excluded.append(i)
            continue
        runs = _segments(t, vis, phase, scene.track_lifetime, scene.redetect_gap)
        for idx in runs:
            if len(idx) < 2:
                continue
            raw = scene.camera.distort(uv[idx] + noise[idx])
            tracks.append(FeatureTrajectory(next_id, t[idx], raw, CLOSED))
            owner[next_id] = i
            true_uv[next_id] = uv[idx]
            next_id += 1
    return SyntheticData(scene, seed, traj, states, points, tracks, owner, true_uv, excluded)


def snapshot_stream(tracks, first=8, every=4, close_delay=0.1):
    """Replay tracks as the frontend would forward them.

    A snapshot goes out once a track reaches ``first`` measurements, then on
    every growth of ``every``, and a final closed snapshot ``close_delay``
    after the last measurement.  Ordered by emission time, then id.
    """
    heap = []
    for tr in tracks:
        n = len(tr)
        for m in range(first, n + 1, every):
            heap.append((float(tr.t[m - 1]), tr.id, m, ACTIVE))
        if n >= first:
            heap.append((float(tr.t[-1]) + close_delay, tr.id, n, CLOSED))
    heapq.heapify(heap)
    by_id = {tr.id: tr for tr in tracks}
    while heap:
        t, tid, m, status = heapq.heappop(heap)
        tr = by_id[tid]
        yield t, FeatureTrajectory(tid, tr.t[:m], tr.uv[:m], status)


def statistics(data: SyntheticData):
    """Mean depth of all measurements and mean per-track parallax (degrees)."""
    depths, parallax = [], []
    for tr in data.tracks:
        point = data.landmarks[data.track_landmark[tr.id]]
        T = data.trajectory.poses(tr.t)
        depths.append(camera_points(T, point)[:, 2])
        parallax.append(_parallax_deg(T, point))
    return {
        "mean_depth": float(np.concatenate(depths).mean()) if depths else float("nan"),
        "mean_parallax_deg": float(np.mean(parallax)) if parallax else float("nan"),
        "n_tracks": len(data.tracks),
        "n_measurements": int(sum(len(tr) for tr in data.tracks)),
    }


# -- events ---------------------------------------------------------------------

@dataclass(frozen=True)
class CornerPattern:
    """L-shaped corner: two arms of ``arm`` pixels leaving the corner pixel.

    ``orientation`` k rotates the default arms (+x, +y) by k * 90 degrees.
    """

    origin: tuple = (0.0, 0.0)
    arm: int = 6
    orientation: int = 0
    polarity: int = 1

    def offsets(self):
        a = np.arange(0, self.arm + 1)
        pts = np.concatenate([np.stack([a, np.zeros_like(a)], 1), np.stack([np.zeros_like(a[1:]), a[1:]], 1)])
        c, s = [(1, 0), (0, 1), (-1, 0), (0, -1)][self.orientation % 4]
        return np.stack([c * pts[:, 0] - s * pts[:, 1], s * pts[:, 0] + c * pts[:, 1]], 1)


def _pixel_poisson(rng, n_pixels, rate, duration):
    counts = rng.poisson(rate * duration, size=n_pixels)
    pix = np.repeat(np.arange(n_pixels), counts)
    t = rng.random(len(pix)) * duration
    return pix, t


def replay_corner(pattern: CornerPattern, velocity=(0.0, 0.0), duration=0.1, rate=500.0, seed=0,
                  t0=0.0, width=None, height=None):
    """Events of a corner moving at constant pixel velocity, Poisson per pixel.

    Returns ``(events, path)``; ``path(t)`` gives the true corner position.
    """
    rng = np.random.default_rng(seed)
    off = pattern.offsets()
    pix, t = _pixel_poisson(rng, len(off), rate, duration)
    v = np.asarray(velocity, dtype=float)
    o = np.asarray(pattern.origin, dtype=float)

    def path(tq):
        tq = np.asarray(tq, dtype=float)
        return o + (tq - t0)[..., None] * v

    pos = np.rint(path(t0 + t) + off[pix]).astype(np.int64)
    keep = np.ones(len(t), dtype=bool)
    if width is not None:
        keep &= (pos[:, 0] >= 0) & (pos[:, 0] < width)
    if height is not None:
        keep &= (pos[:, 1] >= 0) & (pos[:, 1] < height)
    ev = EventArray(t0 + t[keep], pos[keep, 0], pos[keep, 1], np.full(keep.sum(), pattern.polarity))
    return ev[np.argsort(ev.t, kind="stable")], path


def replay_noise(center, radius, n, duration=0.1, seed=0, t0=0.0):
    """Uniformly random events inside a square patch."""
    rng = np.random.default_rng(seed)
    c = np.asarray(center, dtype=np.int64)
    xy = c + rng.integers(-radius, radius + 1, size=(n, 2))
    t = t0 + np.sort(rng.random(n)) * duration
    return EventArray(t, xy[:, 0], xy[:, 1], rng.choice([-1, 1], size=n))


def render_events(data: SyntheticData, rate=20.0, per_pixel=2.0, arm=5, noise_rate=0.0, dt=1e-3):
    """Events of an L corner anchored at every landmark's projection.

    Each corner pixel fires as a Poisson process whose intensity is a
    baseline ``rate`` (Hz) plus ``per_pixel`` events per pixel the corner
    moves, so fast motion yields proportionally more events, as on a real
    sensor.  The corner pixel sits on the (distorted) projection, so a tracker
    locked on the corner measures the landmark.  ``noise_rate`` adds uniform
    background events (events per second over the whole sensor).
    """
    scene = data.scene
    cam = scene.camera
    rng = np.random.default_rng([data.seed, 11])
    n_lm = len(data.landmarks)
    patterns = [CornerPattern(arm=arm, orientation=int(rng.integers(4)), polarity=int(rng.choice([-1, 1])))
                for _ in range(n_lm)]
    t_grid = np.arange(0.0, scene.duration + 0.5 * dt, dt)
    T_grid = data.trajectory.poses(t_grid)
    parts = []
    for i in range(n_lm):
        if i in data.excluded:
            continue
        pc = camera_points(T_grid, data.landmarks[i])
        ok = pc[:, 2] > scene.min_depth
        uv = cam.distort(cam.project(np.where(ok[:, None], pc, 1.0)))
        ok &= cam.in_bounds(uv, margin=0)
        step = np.linalg.norm(np.diff(uv, axis=0), axis=1)
        live = ok[:-1] & ok[1:]
        lam = np.where(live, rate * dt + per_pixel * step, 0.0)
        off = patterns[i].offsets()
        counts = rng.poisson(np.repeat(lam[:, None], len(off), axis=1))
        b, pix = np.nonzero(counts)
        b, pix = np.repeat(b, counts[b, pix]), np.repeat(pix, counts[b, pix])
        if len(b) == 0:
            continue
        t = t_grid[b] + rng.random(len(b)) * dt
        pc_e = camera_points(data.trajectory.poses(t), data.landmarks[i])
        vis = pc_e[:, 2] > scene.min_depth
        pos = np.rint(cam.distort(cam.project(np.where(vis[:, None], pc_e, 1.0))) + off[pix]).astype(np.int64)
        vis &= cam.in_bounds(pos, margin=0)
        parts.append(EventArray(t[vis], pos[vis, 0], pos[vis, 1], np.full(vis.sum(), patterns[i].polarity)))
    if noise_rate > 0:
        n = rng.poisson(noise_rate * scene.duration)
        parts.append(EventArray(rng.random(n) * scene.duration, rng.integers(0, cam.width, n),
                                rng.integers(0, cam.height, n), rng.choice([-1, 1], n)))
    return EventArray.concatenate(parts)
