from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraModel


@dataclass(frozen=True)
class TriangulationGates:
    max_rms_px: float = 3.0
    min_parallax_deg: float = 1.0
    d_min: float = 0.05
    d_max: float = 200.0


@dataclass(frozen=True)
class Triangulation:
    point: np.ndarray | None
    rms_px: float
    parallax_deg: float
    reason: str = ""

    @property
    def ok(self):
        return self.point is not None


def parallax_deg(poses, point):
    """Largest angle between the first viewing ray and any other one."""
    rays = point - poses[:, :3, 3]
    norms = np.linalg.norm(rays, axis=1, keepdims=True)
    if len(rays) < 2 or np.any(norms <= 1e-12):
        # a point at a camera center comes from a zero-baseline solve
        return 0.0
    rays = rays / norms
    c = np.clip(rays[1:] @ rays[0], -1.0, 1.0)
    return float(np.degrees(np.arccos(c.min())))


def _camera_frame(poses, point):
    R = poses[:, :3, :3]
    return np.einsum("mji,mj->mi", R, point - poses[:, :3, 3])


def dlt(poses, xy):
    """Linear triangulation from body-to-world poses and normalized coordinates."""
    R = poses[:, :3, :3]
    p = poses[:, :3, 3]
    Rt = np.swapaxes(R, 1, 2)
    P = np.concatenate([Rt, -np.einsum("mij,mj->mi", Rt, p)[:, :, None]], axis=2)  # (m, 3, 4)
    A = np.concatenate([xy[:, 0:1] * P[:, 2] - P[:, 0], xy[:, 1:2] * P[:, 2] - P[:, 1]], axis=0)
    A /= np.linalg.norm(A, axis=1, keepdims=True)
    _, _, vt = np.linalg.svd(A)
    X = vt[-1]
    if abs(X[3]) < 1e-12:
        return None
    return X[:3] / X[3]


def refine(poses, uv, point, cam: CameraModel, iterations=5):
    """Gauss-Newton on pixel reprojection error with fixed poses."""
    R = poses[:, :3, :3]
    Rt = np.swapaxes(R, 1, 2)
    for _ in range(iterations):
        pc = _camera_frame(poses, point)
        if np.any(pc[:, 2] <= 1e-9):
            break
        r = (cam.project(pc) - uv).reshape(-1)
        J = (cam.project_jacobian(pc) @ Rt).reshape(-1, 3)
        try:
            step = np.linalg.solve(J.T @ J, -J.T @ r)
        except np.linalg.LinAlgError:
            break
        point = point + step
        if np.linalg.norm(step) < 1e-12 * (1 + np.linalg.norm(point)):
            break
    return point


def triangulate(poses, uv, cam: CameraModel, gates: TriangulationGates | None = None, refine_steps=5):
    """Triangulate one track from its (ideal) pixels and interpolated poses."""
    g = gates or TriangulationGates()
    poses = np.asarray(poses, dtype=float)
    uv = np.asarray(uv, dtype=float)
    if len(uv) < 2:
        return Triangulation(None, np.inf, 0.0, "too few measurements")
    X = dlt(poses, cam.normalized(uv))
    if X is None or not np.all(np.isfinite(X)):
        return Triangulation(None, np.inf, 0.0, "point at infinity")
    par = parallax_deg(poses, X)
    if par < g.min_parallax_deg:
        return Triangulation(None, np.inf, par, "insufficient parallax")
    depth = _camera_frame(poses, X)[:, 2]
    if np.any(depth <= g.d_min) or np.any(depth >= g.d_max):
        return Triangulation(None, np.inf, par, "depth out of range")
    if refine_steps:
        X = refine(poses, uv, X, cam, refine_steps)
        depth = _camera_frame(poses, X)[:, 2]
        if np.any(depth <= g.d_min) or np.any(depth >= g.d_max):
            return Triangulation(None, np.inf, par, "depth out of range")
        par = parallax_deg(poses, X)
    rms = float(np.sqrt(np.mean(np.sum((cam.project(_camera_frame(poses, X)) - uv) ** 2, axis=1))))
    if not rms < g.max_rms_px:
        return Triangulation(None, rms, par, "reprojection error")
    return Triangulation(X, rms, par)
