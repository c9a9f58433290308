from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics with optional radial-tangential distortion.

    ``distortion`` is ``(k1, k2, p1, p2[, k3])``.  The estimator works on ideal
    pinhole pixels; raw tracker output is passed through :meth:`undistort`
    before it reaches the factor graph.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    distortion: tuple = field(default=())

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        object.__setattr__(self, "distortion", tuple(float(d) for d in self.distortion))

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def project(self, pc):
        """Project camera-frame points ``(..., 3)`` to ideal pixels ``(..., 2)``."""
        pc = np.asarray(pc, dtype=float)
        z = pc[..., 2]
        return np.stack([self.fx * pc[..., 0] / z + self.cx, self.fy * pc[..., 1] / z + self.cy], axis=-1)

    def project_jacobian(self, pc):
        pc = np.asarray(pc, dtype=float)
        x, y, z = pc[..., 0], pc[..., 1], pc[..., 2]
        J = np.zeros(pc.shape[:-1] + (2, 3))
        J[..., 0, 0] = self.fx / z
        J[..., 0, 2] = -self.fx * x / z**2
        J[..., 1, 1] = self.fy / z
        J[..., 1, 2] = -self.fy * y / z**2
        return J

    def normalized(self, uv):
        uv = np.asarray(uv, dtype=float)
        return np.stack([(uv[..., 0] - self.cx) / self.fx, (uv[..., 1] - self.cy) / self.fy], axis=-1)

    def in_bounds(self, uv, margin=0.0):
        uv = np.asarray(uv)
        return ((uv[..., 0] >= margin) & (uv[..., 0] <= self.width - 1 - margin)
                & (uv[..., 1] >= margin) & (uv[..., 1] <= self.height - 1 - margin))

    def _distort_normalized(self, xy):
        k = list(self.distortion) + [0.0] * (5 - len(self.distortion))
        k1, k2, p1, p2, k3 = k
        x, y = xy[..., 0], xy[..., 1]
        r2 = x * x + y * y
        radial = 1 + k1 * r2 + k2 * r2**2 + k3 * r2**3
        xd = x * radial + 2 * p1 * x * y + p2 * (r2 + 2 * x * x)
        yd = y * radial + p1 * (r2 + 2 * y * y) + 2 * p2 * x * y
        return np.stack([xd, yd], axis=-1)

    def distort(self, uv):
        """Ideal pixels to distorted (raw sensor) pixels."""
        if not any(self.distortion):
            return np.asarray(uv, dtype=float)
        xd = self._distort_normalized(self.normalized(uv))
        return np.stack([self.fx * xd[..., 0] + self.cx, self.fy * xd[..., 1] + self.cy], axis=-1)

    def undistort(self, uv, iterations=20):
        """Raw pixels to ideal pinhole pixels (fixed-point inversion)."""
        uv = np.asarray(uv, dtype=float)
        if not any(self.distortion):
            return uv
        target = self.normalized(uv)
        xy = target.copy()
        for _ in range(iterations):
            xy = xy + (target - self._distort_normalized(xy))
        return np.stack([self.fx * xy[..., 0] + self.cx, self.fy * xy[..., 1] + self.cy], axis=-1)
