import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import least_squares

from eventvo import liegroups as lg
from eventvo.estimator.camera import CameraModel
from eventvo.estimator.factors import huber, interval_index, project, project_batch
from eventvo.estimator.triangulation import TriangulationGates, triangulate
from eventvo.gp_motion import MotionState, QcModel
from oracles import central_jacobian_batch, random_twist, rel_err

QC = QcModel.diagonal()
CAM = CameraModel(200.0, 210.0, 120.0, 90.0, 240, 180)


def test_optical_axis_projects_to_origin():
    cam = CameraModel(1.0, 1.0, 0.0, 0.0, 10, 10)
    x = MotionState(0.0)
    uv, _, _, _, ok = project(x, MotionState(1.0), QC, 0.0, [0, 0, 1.0], cam)
    assert ok and np.allclose(uv, 0.0, atol=0)


def test_off_axis_projection():
    cam = CameraModel(100.0, 100.0, 0.0, 0.0, 10, 10)
    uv, res, _, _, _ = project(MotionState(0.0), MotionState(1.0), QC, 0.5, [0.5, 0, 2.0], cam, measured=[20, 1])
    assert np.allclose(uv, [25, 0], atol=1e-12) and np.allclose(res, [5, -1], atol=1e-12)


def test_point_behind_camera_is_inactive():
    *_, ok = project(MotionState(0.0), MotionState(1.0), QC, 0.2, [0, 0, 0.01], CAM)
    assert not ok


def test_uses_inverse_pose_not_transpose():
    # camera translated to (1, 0, 0) sees the world origin at x = -1
    T = lg.make_pose(np.eye(3), [1.0, 0, 0])
    cam = CameraModel(1.0, 1.0, 0.0, 0.0, 10, 10)
    uv, *_ = project(MotionState(0.0, T), MotionState(1.0, T), QC, 0.3, [0, 0, 1.0], cam)
    assert np.allclose(uv, [-1, 0], atol=1e-12)


def test_interval_index_is_left_closed():
    times = np.array([0.0, 1.0, 2.0])
    k = interval_index(times, np.array([-0.1, 0.0, 0.5, 1.0, 1.999, 2.0]))
    assert k.tolist() == [-1, 0, 0, 1, 1, -1]


def _random_factor(rng):
    xk = MotionState(0.0, lg.se3_exp(random_twist(rng, 0.3, 0.3)), rng.normal(scale=0.5, size=6))
    xk1 = MotionState(0.1, xk.pose @ lg.se3_exp(random_twist(rng, 0.2, 0.2)), rng.normal(scale=0.5, size=6))
    t = rng.uniform(0.0, 0.1)
    pc = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(3, 6)])
    mid = xk.pose
    point = mid[:3, :3] @ pc + mid[:3, 3]
    return xk, xk1, t, point


def _pixels(xk, xk1, t, point, D):
    """Predicted pixels for a stack of 27-vector perturbations in one call.

    Perturbed pair j occupies knots 2j and 2j+1 of a single window; the
    intervals between pairs are never queried.
    """
    M = len(D)
    dt = xk1.t - xk.t
    times = np.repeat(2.0 * np.arange(M), 2) + np.tile([0.0, dt], M)
    poses = np.empty((2 * M, 4, 4))
    poses[0::2] = xk.pose @ lg.se3_exp(D[:, 0:6])
    poses[1::2] = xk1.pose @ lg.se3_exp(D[:, 12:18])
    vels = np.empty((2 * M, 6))
    vels[0::2] = xk.velocity + D[:, 6:12]
    vels[1::2] = xk1.velocity + D[:, 18:24]
    k = 2 * np.arange(M)
    b = project_batch(times, poses, vels, k, times[k] + (t - xk.t), point + D[:, 24:27], np.zeros((M, 2)),
                      CAM, jacobian=False)
    return b.predicted


def test_projection_jacobians_match_finite_differences(rng):
    for _ in range(100):
        xk, xk1, t, point = _random_factor(rng)
        _, _, Jk, Jl, ok = project(xk, xk1, QC, t, point, CAM)
        assert ok
        F = central_jacobian_batch(lambda D: _pixels(xk, xk1, t, point, D), np.zeros(27))
        assert rel_err(np.hstack([Jk, Jl]), F) < 1e-5


def test_huber_cost_and_weight():
    rho, w = huber(np.array([1.0, 2.0, 4.0]), 2.0)
    assert np.allclose(rho, [1.0, 4.0, 12.0]) and np.allclose(w, [1.0, 1.0, 0.5])


@given(st.floats(0.0, 50.0), st.floats(0.5, 5.0))
def test_huber_is_continuous_and_below_quadratic(s, delta):
    rho, w = huber(np.array([s]), delta)
    assert rho[0] <= s * s + 1e-9 and 0 < w[0] <= 1


# -- triangulation -------------------------------------------------------------

def _views(rng, n, baseline, point):
    poses = []
    for i in range(n):
        c = np.array([baseline * (i / max(n - 1, 1) - 0.5), 0.1 * rng.normal(), 0.0])
        poses.append(lg.make_pose(lg.so3_exp(0.02 * rng.normal(size=3)), c))
    poses = np.array(poses)
    pc = np.einsum("mji,mj->mi", poses[:, :3, :3], point - poses[:, :3, 3])
    return poses, CAM.project(pc)


def test_two_view_exact(rng):
    point = np.array([0.3, -0.2, 4.0])
    poses, uv = _views(rng, 2, 0.8, point)
    res = triangulate(poses, uv, CAM)
    assert res.ok and np.linalg.norm(res.point - point) < 1e-6


def test_zero_baseline_rejected_for_parallax():
    T = np.array([np.eye(4), np.eye(4)])
    res = triangulate(T, np.array([[130.0, 95.0], [130.0, 95.0]]), CAM)
    assert not res.ok and "parallax" in res.reason


def test_point_behind_cameras_rejected(rng):
    point = np.array([0.3, -0.2, 4.0])
    poses, uv = _views(rng, 3, 0.8, point)
    flipped = poses.copy()
    flipped[:, :3, :3] = flipped[:, :3, :3] @ np.diag([-1.0, 1.0, -1.0])
    assert not triangulate(flipped, uv, CAM).ok


def test_noisy_track_matches_nonlinear_oracle(rng):
    # 30 degrees of parallax at 4 m needs a ~2.1 m baseline
    point = np.array([0.2, 0.1, 4.0])
    poses, uv = _views(rng, 10, 2 * 4.0 * np.tan(np.radians(15)), point)
    uv = uv + rng.normal(size=uv.shape)
    res = triangulate(poses, uv, CAM, refine_steps=20)
    assert res.ok and res.parallax_deg > 25

    def resid(p):
        pc = np.einsum("mji,mj->mi", poses[:, :3, :3], p - poses[:, :3, 3])
        return (CAM.project(pc) - uv).ravel()

    oracle = least_squares(resid, point + 0.1, xtol=1e-15, ftol=1e-15, gtol=1e-15).x
    assert np.linalg.norm(res.point - oracle) < 1e-6


def test_reprojection_gate(rng):
    point = np.array([0.0, 0.0, 4.0])
    poses, uv = _views(rng, 6, 1.0, point)
    uv[3] += [25.0, -25.0]
    res = triangulate(poses, uv, CAM, TriangulationGates(max_rms_px=3.0))
    assert not res.ok and res.reason == "reprojection error"
