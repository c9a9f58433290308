"""File formats, configuration, and trajectory evaluation.

Text formats (whitespace separated, ``#`` comments allowed):

* events: ``t x y p`` with polarity ``p`` in {0, 1}
* ground truth: ``t px py pz qx qy qz qw``
* estimate: ground-truth columns followed by ``vx vy vz wx wy wz``
* landmarks: ``id x y z``
* tracks: ``id t x y``
"""

from __future__ import annotations

import configparser
import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .estimator.camera import CameraModel
from .estimator.core import EstimatorConfig
from .frontend import FrontendConfig
from .gp_motion import MotionState
from .simgen import SyntheticScene
from .tracks import CLOSED, EventArray, FeatureTrajectory

log = logging.getLogger(__name__)

FLOAT_FMT = "%.12g"
ASSOCIATION_WINDOW = 0.01


class ConfigError(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, path, lineno, line, why):
        super().__init__(f"{path}:{lineno}: {why}: {line.rstrip()!r}")
        self.lineno = lineno
        self.line = line


@dataclass
class ParseReport:
    skipped: int = 0
    out_of_order: int = 0


# -- configuration --------------------------------------------------------------

@dataclass(frozen=True)
class CameraConfig:
    fx: float = 320.0
    fy: float = 320.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480
    distortion: tuple = ()

    def model(self):
        return CameraModel(self.fx, self.fy, self.cx, self.cy, self.width, self.height, self.distortion)


@dataclass(frozen=True)
class ExportConfig:
    rate_hz: float = 100.0


@dataclass(frozen=True)
class EvalConfig:
    delta: float = 0.5
    association_window: float = ASSOCIATION_WINDOW


@dataclass(frozen=True)
class PipelineConfig:
    camera: CameraConfig = field(default_factory=CameraConfig)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    export: ExportConfig = field(default_factory=ExportConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    scene: SyntheticScene = field(default_factory=SyntheticScene)


_SECTIONS = {f.name: f for f in dataclasses.fields(PipelineConfig)}


def _parse_value(text, default):
    text = text.strip()
    if isinstance(default, bool):
        v = text.lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(float(x) for x in text.replace(",", " ").split())
    return text


def _format_value(v):
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    return str(v)


def parse_config(text, source="<string>") -> PipelineConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    parts = {}
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        cls = type(_SECTIONS[section].default_factory())
        defaults = cls()
        names = {f.name for f in dataclasses.fields(cls)}
        values = {}
        for key, raw in cp.items(section):
            if key not in names:
                raise ConfigError(f"{source}: unknown key {section}.{key}")
            if key == "camera" and section == "scene":
                raise ConfigError(f"{source}: scene camera comes from the [camera] section")
            try:
                values[key] = _parse_value(raw, getattr(defaults, key))
            except ValueError as exc:
                raise ConfigError(f"{source}: bad value for {section}.{key}: {exc}") from exc
        try:
            parts[section] = dataclasses.replace(defaults, **values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source}: [{section}] {exc}") from exc
    try:
        cfg = PipelineConfig(**parts)
        camera = cfg.camera.model()
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return dataclasses.replace(cfg, scene=dataclasses.replace(cfg.scene, camera=camera))


def read_config(path) -> PipelineConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))


def format_config(cfg: PipelineConfig) -> str:
    lines = []
    for name in _SECTIONS:
        lines.append(f"[{name}]")
        part = getattr(cfg, name)
        for f in dataclasses.fields(part):
            if name == "scene" and f.name == "camera":
                continue
            lines.append(f"{f.name} = {_format_value(getattr(part, f.name))}")
        lines.append("")
    return "\n".join(lines)


# -- readers --------------------------------------------------------------------

def _rows(path, ncols, strict, report, convert):
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            parts = body.split()
            try:
                if len(parts) != ncols:
                    raise ValueError(f"expected {ncols} columns, got {len(parts)}")
                row = convert(parts)
            except ValueError as exc:
                if strict:
                    raise ParseError(path, lineno, line, str(exc)) from None
                report.skipped += 1
                continue
            yield lineno, line, row


def _event_row(parts):
    t = float(parts[0])
    x, y, p = int(parts[1]), int(parts[2]), int(parts[3])
    if not np.isfinite(t):
        raise ValueError("non-finite timestamp")
    if p not in (0, 1):
        raise ValueError("polarity must be 0 or 1")
    return t, x, y, 1 if p == 1 else -1


def read_events(path, strict=False, report: ParseReport | None = None) -> EventArray:
    """Load an event file; out-of-order lines are rejected and counted."""
    report = report if report is not None else ParseReport()
    cols = [], [], [], []
    last = -np.inf
    for lineno, line, row in _rows(path, 4, strict, report, _event_row):
        if row[0] < last:
            if strict:
                raise ParseError(path, lineno, line, "timestamp decreases")
            report.out_of_order += 1
            continue
        last = row[0]
        for c, v in zip(cols, row):
            c.append(v)
    if report.skipped or report.out_of_order:
        log.warning("%s: skipped %d malformed and %d out-of-order lines", path, report.skipped, report.out_of_order)
    return EventArray(*cols)


def write_events(path, events: EventArray):
    with open(path, "w") as fh:
        for t, x, y, p in zip(events.t, events.x, events.y, events.p):
            fh.write(f"{t:.9f} {x} {y} {1 if p > 0 else 0}\n")


def _gt_row(parts):
    v = np.array([float(x) for x in parts])
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite value")
    n = np.linalg.norm(v[4:8])
    if abs(n - 1.0) > 1e-3:
        raise ValueError(f"quaternion norm {n:.6f} is not unit")
    return v


def poses_from_rows(rows):
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    T = np.broadcast_to(np.eye(4), (len(rows), 4, 4)).copy()
    q = rows[:, 4:8] / np.linalg.norm(rows[:, 4:8], axis=1, keepdims=True)
    if len(rows):
        T[:, :3, :3] = Rotation.from_quat(q).as_matrix()
    T[:, :3, 3] = rows[:, 1:4]
    return T


def read_groundtruth(path, strict=False, report: ParseReport | None = None):
    """Returns ``(t, poses)``; quaternions are renormalized."""
    report = report if report is not None else ParseReport()
    rows = [row for _, _, row in _rows(path, 8, strict, report, _gt_row)]
    rows = np.array(rows).reshape(-1, 8)
    order = np.argsort(rows[:, 0], kind="stable")
    rows = rows[order]
    return rows[:, 0], poses_from_rows(rows)


def _pose_rows(t, poses):
    q = Rotation.from_matrix(poses[:, :3, :3]).as_quat()
    return np.column_stack([t, poses[:, :3, 3], q])


def write_groundtruth(path, t, poses):
    np.savetxt(path, _pose_rows(np.asarray(t), np.asarray(poses)), fmt=FLOAT_FMT,
               header="timestamp px py pz qx qy qz qw")


def write_trajectory(path, states):
    t = np.array([s.t for s in states])
    poses = np.array([s.pose for s in states]).reshape(-1, 4, 4)
    vels = np.array([s.velocity for s in states]).reshape(-1, 6)
    rows = np.column_stack([_pose_rows(t, poses), vels]) if len(states) else np.zeros((0, 14))
    np.savetxt(path, rows, fmt=FLOAT_FMT, header="timestamp px py pz qx qy qz qw vx vy vz wx wy wz")


def _traj_row(parts):
    v = np.array([float(x) for x in parts])
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite value")
    return v


def read_trajectory(path, strict=True):
    """Returns a list of MotionStates (velocity zero when the file has 8 columns)."""
    report = ParseReport()
    with open(path) as fh:
        first = next((ln for ln in fh if ln.split("#", 1)[0].strip()), "")
    ncols = len(first.split("#", 1)[0].split()) or 14
    if ncols not in (8, 14):
        raise ParseError(path, 1, first, "expected 8 or 14 columns")
    rows = np.array([row for _, _, row in _rows(path, ncols, strict, report, _traj_row)]).reshape(-1, ncols)
    poses = poses_from_rows(rows[:, :8])
    vels = rows[:, 8:14] if ncols == 14 else np.zeros((len(rows), 6))
    return [MotionState(float(r[0]), T, v) for r, T, v in zip(rows, poses, vels)]


def write_landmarks(path, landmarks):
    with open(path, "w") as fh:
        fh.write("# id x y z\n")
        for k in sorted(landmarks):
            x, y, z = landmarks[k]
            fh.write(f"{k} {x:.12g} {y:.12g} {z:.12g}\n")


def read_landmarks(path):
    out = {}
    for _, _, row in _rows(path, 4, True, ParseReport(), lambda p: (int(p[0]), [float(v) for v in p[1:]])):
        out[row[0]] = np.array(row[1])
    return out


def write_tracks(path, tracks):
    with open(path, "w") as fh:
        fh.write("# id t x y\n")
        for tr in tracks:
            for t, (x, y) in zip(tr.t, tr.uv):
                fh.write(f"{tr.id} {t:.12g} {x:.12g} {y:.12g}\n")


def read_tracks(path, strict=True):
    """Tracks file to closed FeatureTrajectory records, ordered by id."""
    per = {}
    conv = lambda p: (int(p[0]), float(p[1]), float(p[2]), float(p[3]))  # noqa: E731
    for _, _, (i, t, x, y) in _rows(path, 4, strict, ParseReport(), conv):
        per.setdefault(i, []).append((t, x, y))
    out = []
    for i in sorted(per):
        a = np.array(sorted(per[i]))
        out.append(FeatureTrajectory(i, a[:, 0], a[:, 1:], CLOSED))
    return out


def write_metrics(path, metrics: dict):
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["metrics"] = {k: (" ".join(FLOAT_FMT % x for x in v) if isinstance(v, (list, tuple, np.ndarray))
                         else (FLOAT_FMT % v if isinstance(v, float) else str(v)))
                     for k, v in metrics.items()}
    with open(path, "w") as fh:
        cp.write(fh)


def read_metrics(path):
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read(path)
    return dict(cp["metrics"])


# -- evaluation -----------------------------------------------------------------

@dataclass(frozen=True)
class Sim3:
    scale: float
    R: np.ndarray
    t: np.ndarray

    def apply_points(self, p):
        return self.scale * np.asarray(p) @ self.R.T + self.t

    def apply_poses(self, T):
        T = np.array(T, dtype=float)
        T[:, :3, 3] = self.apply_points(T[:, :3, 3])
        T[:, :3, :3] = self.R @ T[:, :3, :3]
        return T


def umeyama(src, dst, with_scale=True):
    """Similarity minimizing ``sum ||dst - (s R src + t)||^2`` in closed form."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if len(src) < 3:
        raise ValueError("need at least 3 point pairs")
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    var_s = (xs**2).sum() / len(src)
    cov = xd.T @ xs / len(src)
    U, d, Vt = np.linalg.svd(cov)
    if var_s < 1e-18 or d[1] < 1e-12 * max(d[0], 1e-300):
        raise ValueError("degenerate (collinear) point configuration")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1
    R = U @ S @ Vt
    s = float(np.trace(np.diag(d) @ S) / var_s) if with_scale else 1.0
    return Sim3(s, R, mu_d - s * R @ mu_s)


def associate(t_est, t_gt, max_dt=ASSOCIATION_WINDOW):
    """Nearest ground-truth index for each estimate time, within ``max_dt``."""
    t_est, t_gt = np.asarray(t_est), np.asarray(t_gt)
    j = np.clip(np.searchsorted(t_gt, t_est), 1, len(t_gt) - 1)
    j = np.where(np.abs(t_gt[j - 1] - t_est) <= np.abs(t_gt[j] - t_est), j - 1, j)
    ok = np.abs(t_gt[j] - t_est) <= max_dt
    return np.flatnonzero(ok), j[ok]


def matched_positions(t_est, poses_est, t_gt, poses_gt, max_dt=ASSOCIATION_WINDOW):
    """Estimate positions paired with ground truth interpolated at the same times.

    Only estimate samples with a ground-truth sample within ``max_dt`` are
    kept, so gaps in the ground truth are never bridged.  Interpolating
    (rather than taking the nearest sample) matters on fast trajectories: a
    constant sub-sample time offset would otherwise be absorbed as a spurious
    rotation of the alignment.
    """
    t_est, t_gt = np.asarray(t_est, dtype=float), np.asarray(t_gt, dtype=float)
    i, _ = associate(t_est, t_gt, max_dt)
    i = i[(t_est[i] >= t_gt[0]) & (t_est[i] <= t_gt[-1])]
    g = interpolate_poses(t_est[i], t_gt, poses_gt)[:, :3, 3]
    return np.asarray(poses_est)[i, :3, 3], g


def align_sim3(t_est, poses_est, t_gt, poses_gt, max_dt=ASSOCIATION_WINDOW):
    return umeyama(*matched_positions(t_est, poses_est, t_gt, poses_gt, max_dt))


def interpolate_poses(t_query, t, poses):
    """Linear translation and spherical rotation interpolation; NaN outside."""
    t_query = np.asarray(t_query, dtype=float)
    t = np.asarray(t, dtype=float)
    out = np.full((len(t_query), 4, 4), np.nan)
    inside = (t_query >= t[0]) & (t_query <= t[-1])
    if len(t) < 2 or not inside.any():
        return out
    tq = t_query[inside]
    slerp = Slerp(t, Rotation.from_matrix(poses[:, :3, :3]))
    T = np.broadcast_to(np.eye(4), (len(tq), 4, 4)).copy()
    T[:, :3, :3] = slerp(tq).as_matrix()
    T[:, :3, 3] = np.stack([np.interp(tq, t, poses[:, :3, 3][:, k]) for k in range(3)], axis=1)
    out[inside] = T
    return out


def _inv(T):
    Ti = np.array(T)
    R = T[..., :3, :3]
    Ti[..., :3, :3] = np.swapaxes(R, -1, -2)
    Ti[..., :3, 3] = -np.einsum("...ji,...j->...i", R, T[..., :3, 3])
    return Ti


def rms_rte(t_est, poses_est, t_gt, poses_gt, delta=0.5):
    """RMS relative translation error over pose pairs ``delta`` seconds apart.

    Pairs are anchored at ground-truth timestamps; the estimate is
    interpolated there.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    t_gt = np.asarray(t_gt, dtype=float)
    poses_gt = np.asarray(poses_gt, dtype=float)
    lo = max(t_est[0], t_gt[0])
    hi = min(t_est[-1], t_gt[-1])
    ta = t_gt[(t_gt >= lo) & (t_gt + delta <= hi)]
    if len(ta) == 0:
        raise ValueError("no overlap between estimate and ground truth for this delta")
    Ea, Eb = interpolate_poses(ta, t_est, poses_est), interpolate_poses(ta + delta, t_est, poses_est)
    Ga, Gb = interpolate_poses(ta, t_gt, poses_gt), interpolate_poses(ta + delta, t_gt, poses_gt)
    dG = _inv(Ga) @ Gb
    dE = _inv(Ea) @ Eb
    err = (_inv(dG) @ dE)[:, :3, 3]
    return float(np.sqrt(np.mean(np.sum(err**2, axis=1))))


def ate(t_est, poses_est, t_gt, poses_gt, max_dt=ASSOCIATION_WINDOW):
    e, g = matched_positions(t_est, poses_est, t_gt, poses_gt, max_dt)
    d = e - g
    return float(np.sqrt(np.mean(np.sum(d**2, axis=1))))


def path_length(poses):
    p = np.asarray(poses)[:, :3, 3]
    return float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum())


def evaluate(t_est, poses_est, t_gt, poses_gt, delta=0.5, max_dt=ASSOCIATION_WINDOW):
    """SIM(3)-align the estimate, then report RMS RTE and ATE."""
    t_est = np.asarray(t_est, dtype=float)
    sim = align_sim3(t_est, poses_est, t_gt, poses_gt, max_dt)
    aligned = sim.apply_poses(poses_est)
    return {
        "rms_rte": rms_rte(t_est, aligned, t_gt, poses_gt, delta),
        "ate": ate(t_est, aligned, t_gt, poses_gt, max_dt),
        "scale": sim.scale,
        "path_length": path_length(poses_gt),
        "delta": delta,
        "aligned": aligned,
    }
