import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

from eventvo import liegroups as lg
from oracles import central_jacobian, expm_series, expm_twist, hat6, random_pose, random_twist, rel_err, rotvec


def test_exp_of_zero_is_identity():
    assert np.array_equal(lg.se3_exp(np.zeros(6)), np.eye(4))


def test_exp_pure_translation():
    T = lg.se3_exp([1.0, 0, 0, 0, 0, 0])
    assert np.allclose(T[:3, 3], [1, 0, 0], atol=0) and np.allclose(T[:3, :3], np.eye(3), atol=0)


def test_exp_quarter_turn_matches_power_series():
    xi = np.array([0, 0, 0, 0, 0, np.pi / 2])
    ref = expm_series(hat6(xi), terms=20)
    assert np.abs(lg.se3_exp(xi) - ref).max() < 1e-10


def test_log_of_identity_is_zero():
    assert np.array_equal(lg.se3_log(np.eye(4)), np.zeros(6))


def test_log_roundtrip_small_twists(rng):
    for _ in range(200):
        xi = random_twist(rng, rot_max=1.0)
        assert np.abs(lg.se3_log(lg.se3_exp(xi)) - xi).max() < 1e-9


def test_log_near_pi_against_quaternion_oracle(rng):
    for _ in range(20):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        R = Rotation.from_rotvec(0.9 * np.pi * axis).as_matrix()
        T = lg.make_pose(R, rng.normal(size=3))
        assert np.abs(lg.se3_log(T)[3:] - rotvec(R)).max() < 1e-8


def test_log_rejects_half_turn():
    T = lg.make_pose(Rotation.from_rotvec([0, 0, np.pi]).as_matrix(), np.zeros(3))
    with pytest.raises(lg.NearPiRotationError):
        lg.se3_log(T)


def test_exp_matches_series_oracle_for_general_twists(rng):
    for _ in range(50):
        xi = random_twist(rng, rot_max=3.0, trans_max=2.0)
        assert np.abs(lg.se3_exp(xi) - expm_twist(xi)).max() < 1e-10


def test_small_angle_branches_agree_at_switch():
    for scale in (0.999e-6, 1.001e-6):
        xi = np.array([0.3, -0.2, 0.1, 0.6 * scale, -0.8 * scale, 0.0])
        assert np.abs(lg.se3_exp(xi) - expm_twist(xi)).max() < 1e-12
        assert np.abs(lg.right_jacobian(xi) @ lg.right_jacobian_inv(xi) - np.eye(6)).max() < 1e-12


def test_right_jacobian_at_zero_is_identity():
    assert np.allclose(lg.right_jacobian(np.zeros(6)), np.eye(6), atol=1e-15)


def test_right_jacobian_matches_finite_differences(rng):
    for _ in range(50):
        xi = random_twist(rng, rot_max=2.5, trans_max=2.0)
        Tinv = lg.se3_inverse(lg.se3_exp(xi))
        J = central_jacobian(lambda d: lg.se3_log(Tinv @ lg.se3_exp(xi + d)), np.zeros(6))
        assert rel_err(lg.right_jacobian(xi), J) < 1e-5


def test_right_jacobian_inverse(rng):
    for _ in range(100):
        xi = random_twist(rng, rot_max=3.0)
        assert np.abs(lg.right_jacobian(xi) @ lg.right_jacobian_inv(xi) - np.eye(6)).max() < 1e-9


def test_jr_inv_derivative_matches_finite_differences(rng):
    for _ in range(20):
        xi, v = random_twist(rng, rot_max=2.0), rng.normal(size=6)
        J = central_jacobian(lambda x: lg.right_jacobian_inv(x) @ v, xi)
        assert rel_err(lg.right_jacobian_inv_times_derivative(xi, v), J) < 1e-6


@pytest.mark.parametrize("i", range(6))
def test_hat_vee_basis_roundtrip(i):
    e = np.eye(6)[i]
    assert np.array_equal(lg.vee(lg.hat(e)), e)


def test_vee_rejects_non_twist():
    with pytest.raises(ValueError):
        lg.vee(np.eye(4))
    with pytest.raises(ValueError):
        lg.vee(np.zeros((3, 3)))


def test_adjoint_moves_twists_across_poses(rng):
    T, xi = random_pose(rng), random_twist(rng)
    lhs = T @ lg.se3_exp(xi) @ lg.se3_inverse(T)
    assert np.abs(lhs - lg.se3_exp(lg.adjoint(T) @ xi)).max() < 1e-10


def test_normalize_restores_rotation(rng):
    R = Rotation.from_rotvec(rng.normal(size=3)).as_matrix() + 1e-6 * rng.normal(size=(3, 3))
    assert not lg.is_rotation(R)
    assert lg.is_rotation(lg.normalize_rotation(R))


# -- properties ----------------------------------------------------------------

twists = arrays(np.float64, 6, elements=st.floats(-1.8, 1.8, allow_nan=False))


@given(twists)
def test_log_inverts_exp(xi):
    if np.linalg.norm(xi[3:]) >= np.pi - 0.1:
        xi = xi.copy()
        xi[3:] *= 0.5
    assert np.abs(lg.se3_log(lg.se3_exp(xi)) - xi).max() < 1e-9


@given(twists, twists)
def test_exp_log_of_products(a, b):
    AB = lg.se3_exp(a * 0.5) @ lg.se3_exp(b * 0.5)
    if np.linalg.norm(rotvec(AB[:3, :3])) > np.pi - 1e-3:
        return
    assert np.abs(lg.se3_exp(lg.se3_log(AB)) - AB).max() < 1e-9


@given(twists)
def test_exp_is_a_rotation(xi):
    T = lg.se3_exp(xi)
    assert lg.is_rotation(T[:3, :3]) and np.array_equal(T[3], [0, 0, 0, 1])


@given(twists, arrays(np.float64, 6, elements=st.floats(-1, 1)))
def test_right_jacobian_first_order(xi, d):
    d = 1e-5 * d
    lhs = lg.se3_exp(xi + d)
    rhs = lg.se3_exp(xi) @ lg.se3_exp(lg.right_jacobian(xi) @ d)
    assert np.abs(lhs - rhs).max() <= 1e-8
