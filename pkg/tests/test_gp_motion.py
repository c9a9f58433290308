import numpy as np
import pytest
from hypothesis import given, strategies as st

from eventvo import gp_motion as gp
from eventvo import liegroups as lg
from eventvo.gp_motion import MotionState, QcModel
from oracles import central_jacobian_batch, random_pose, random_twist, rel_err, wnoa_cov_quadrature

QC = QcModel.diagonal(0.7, 0.3)


def perturbed_stacks(xk, xk1, D):
    """Knot-pair arrays for a stack of 24-vector perturbations."""
    Tk = xk.pose @ lg.se3_exp(D[:, 0:6])
    Tk1 = xk1.pose @ lg.se3_exp(D[:, 12:18])
    return Tk, xk.velocity + D[:, 6:12], Tk1, xk1.velocity + D[:, 18:24]


def residual_values(xk, xk1, D):
    Tk, wk, Tk1, wk1 = perturbed_stacks(xk, xk1, D)
    dt = np.full(len(D), xk1.t - xk.t)
    return gp.prior_residual_batch(dt, Tk, wk, Tk1, wk1, jacobian=False)[0]


def interpolation_values(xk, xk1, t, D):
    """Local state and pose at ``t`` for each perturbation, value path only."""
    Tk, wk, Tk1, wk1 = perturbed_stacks(xk, xk1, D)
    terms = gp.interval_terms(Tk, wk, Tk1, wk1, derivatives=False)
    lam, psi = gp.interpolation_coefficients(np.full(len(D), t - xk.t), xk1.t - xk.t)
    xi_t, xid_t, _ = gp.query_local(terms, np.arange(len(D)), lam, psi, wk, jacobian=False)
    return np.concatenate([xi_t, xid_t], axis=1), Tk @ lg.se3_exp(xi_t)


def random_pair(rng, dt=None):
    dt = rng.uniform(0.02, 0.3) if dt is None else dt
    t0 = rng.uniform(-1, 1)
    xk = MotionState(t0, random_pose(rng), rng.normal(size=6))
    step = random_twist(rng, rot_max=1.0, trans_max=0.5)
    xk1 = MotionState(t0 + dt, xk.pose @ lg.se3_exp(step), rng.normal(size=6))
    return xk, xk1


def screw_pair(rng, dt):
    w = random_twist(rng, rot_max=2.0, trans_max=2.0)
    xk = MotionState(0.0, random_pose(rng), w)
    xi = dt * w
    return xk, MotionState(dt, xk.pose @ lg.se3_exp(xi), lg.right_jacobian(xi) @ w)


# -- transition / process_cov ---------------------------------------------------

def test_transition_zero_is_identity():
    assert np.array_equal(gp.transition(0.0), np.eye(12))


def test_transition_block_form():
    phi = gp.transition(2.0)
    assert np.array_equal(phi[:6, 6:], 2 * np.eye(6))
    assert np.array_equal(phi[6:, :6], np.zeros((6, 6)))


def test_transition_semigroup(rng):
    t0, t1, t2 = np.sort(rng.uniform(0, 5, 3))
    assert np.allclose(gp.transition(t2 - t1) @ gp.transition(t1 - t0), gp.transition(t2 - t0), atol=1e-14)


def test_transition_rejects_negative():
    with pytest.raises(ValueError):
        gp.transition(-1e-3)


def test_process_cov_unit():
    I = np.eye(6)
    ref = np.block([[I / 3, I / 2], [I / 2, I]])
    assert np.allclose(gp.process_cov(1.0, QcModel(np.eye(6))), ref, atol=0)


def test_process_cov_symmetric(rng):
    for dt in rng.uniform(1e-3, 3, 20):
        Q = gp.process_cov(dt, QC)
        assert np.array_equal(Q, Q.T)
        assert np.linalg.eigvalsh(Q).min() > 0


@pytest.mark.parametrize("dt", [0.01, 0.05, 0.37, 2.0])
def test_process_cov_matches_quadrature(rng, dt):
    A = rng.normal(size=(6, 6))
    qc = QcModel(A @ A.T + 0.5 * np.eye(6))
    assert rel_err(gp.process_cov(dt, qc), wnoa_cov_quadrature(dt, qc.matrix)) < 1e-6


@pytest.mark.parametrize("dt", [0.0, -0.5])
def test_process_cov_rejects_nonpositive(dt):
    with pytest.raises(ValueError):
        gp.process_cov(dt, QC)


def test_qc_must_be_spd():
    with pytest.raises(ValueError):
        QcModel(np.diag([1, 1, 1, 1, 1, -1.0]))


# -- prior residual ------------------------------------------------------------

def test_residual_zero_on_constant_translation():
    w = np.array([0.4, -1.0, 2.0, 0, 0, 0])
    xk = MotionState(0.0, np.eye(4), w)
    xk1 = MotionState(0.25, lg.se3_exp(0.25 * w), w)
    e, _, _ = gp.prior_residual(xk, xk1)
    assert np.abs(e).max() < 1e-14


def test_residual_zero_on_screw_motion(rng):
    for _ in range(50):
        xk, xk1 = screw_pair(rng, rng.uniform(0.01, 0.5))
        e, _, _ = gp.prior_residual(xk, xk1)
        assert np.abs(e).max() < 1e-10


def test_residual_rejects_non_increasing_times():
    x = MotionState(1.0)
    with pytest.raises(ValueError):
        gp.prior_residual(x, MotionState(1.0))


def test_residual_jacobians_match_finite_differences(rng):
    for _ in range(100):
        xk, xk1 = random_pair(rng)
        _, Jk, Jk1 = gp.prior_residual(xk, xk1)
        F = central_jacobian_batch(lambda D: residual_values(xk, xk1, D), np.zeros(24))
        assert rel_err(Jk, F[:, :12]) < 1e-5 and rel_err(Jk1, F[:, 12:]) < 1e-5


# -- interpolation -------------------------------------------------------------

def test_interpolate_left_endpoint(rng):
    xk, xk1 = random_pair(rng)
    s = gp.interpolate(xk, xk1, QC, xk.t).state
    assert np.abs(s.pose - xk.pose).max() < 1e-10 and np.abs(s.velocity - xk.velocity).max() < 1e-10


def test_interpolate_right_endpoint(rng):
    xk, xk1 = random_pair(rng)
    s = gp.interpolate(xk, xk1, QC, xk1.t).state
    assert np.abs(s.pose - xk1.pose).max() < 1e-10 and np.abs(s.velocity - xk1.velocity).max() < 1e-10


def test_interpolate_straight_line_midpoint():
    v = np.array([1.0, 2.0, -0.5, 0, 0, 0])
    xk = MotionState(0.0, np.eye(4), v)
    xk1 = MotionState(0.2, lg.se3_exp(0.2 * v), v)
    s = gp.interpolate(xk, xk1, QC, 0.1).state
    assert np.allclose(s.pose[:3, 3], 0.1 * v[:3], atol=1e-14)
    assert np.allclose(s.pose[:3, :3], np.eye(3), atol=1e-15)
    assert np.allclose(s.velocity, v, atol=1e-14)


def test_interpolate_outside_interval_raises(rng):
    xk, xk1 = random_pair(rng)
    with pytest.raises(ValueError):
        gp.interpolate(xk, xk1, QC, xk1.t + 1e-6)


def test_interpolate_follows_screw_motion(rng):
    # on a constant-velocity curve the posterior mean is the curve itself
    xk, xk1 = screw_pair(rng, 0.2)
    for t in (0.03, 0.1, 0.17):
        s = gp.interpolate(xk, xk1, QC, t).state
        assert np.abs(s.pose - xk.pose @ lg.se3_exp(t * xk.velocity)).max() < 1e-10
        assert np.abs(s.velocity - xk.velocity).max() < 1e-10


def test_query_matrices_kronecker_form(rng):
    for _ in range(10):
        tk, dt = rng.uniform(0, 1), rng.uniform(0.01, 0.5)
        t = tk + rng.uniform(0, dt)
        Lam, Psi = gp.query_matrices(tk, tk + dt, t, QC)
        lam, psi = gp.interpolation_coefficients(np.array([t - tk]), dt)
        assert np.abs(np.kron(lam[0], np.eye(6)) - Lam).max() < 1e-9
        assert np.abs(np.kron(psi[0], np.eye(6)) - Psi).max() < 1e-9


def test_interpolation_jacobians_match_finite_differences(rng):
    for _ in range(100):
        xk, xk1 = random_pair(rng)
        t = xk.t + rng.uniform(0, 1) * (xk1.t - xk.t)
        q = gp.interpolate(xk, xk1, QC, t)
        Tinv = lg.se3_inverse(q.state.pose)
        D_local = central_jacobian_batch(lambda D: interpolation_values(xk, xk1, t, D)[0], np.zeros(24))
        D_pose = central_jacobian_batch(
            lambda D: lg.se3_log(Tinv @ interpolation_values(xk, xk1, t, D)[1]), np.zeros(24))
        assert rel_err(q.d_local, D_local) < 1e-5
        assert rel_err(q.d_pose, D_pose) < 1e-5


def test_extrapolate_is_constant_velocity(rng):
    x = MotionState(0.5, random_pose(rng), rng.normal(size=6))
    y = gp.extrapolate(x, 0.05)
    assert y.t == 0.55 and np.array_equal(y.velocity, x.velocity)
    e, _, _ = gp.prior_residual(x, MotionState(y.t, y.pose, lg.right_jacobian(0.05 * x.velocity) @ x.velocity))
    assert np.abs(e).max() < 1e-10


# -- properties ----------------------------------------------------------------

times = st.tuples(st.floats(0.001, 2.0), st.floats(0.0, 1.0))


@given(times)
def test_psi_identity(td):
    dt, frac = td
    tau = frac * dt
    _, Psi = gp.query_matrices(0.0, dt, tau, QC)
    if tau == 0:
        assert np.abs(Psi).max() == 0
        return
    lhs = Psi @ gp.process_cov(dt, QC)
    rhs = gp.process_cov(tau, QC) @ gp.transition(dt - tau).T
    assert np.abs(lhs - rhs).max() <= 1e-9 * max(1.0, np.abs(rhs).max())


@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
def test_static_pose_stays_put(seed, frac):
    T = random_pose(np.random.default_rng(seed))
    xk, xk1 = MotionState(0.0, T), MotionState(0.1, T)
    s = gp.interpolate(xk, xk1, QC, 0.1 * frac).state
    assert np.abs(s.pose - T).max() < 1e-12 and np.abs(s.velocity).max() < 1e-12


@given(st.integers(0, 2**32 - 1), st.floats(0.005, 0.5))
def test_residual_vanishes_on_integral_curves(seed, dt):
    xk, xk1 = screw_pair(np.random.default_rng(seed), dt)
    e, _, _ = gp.prior_residual(xk, xk1)
    assert np.abs(e).max() < 1e-10


@given(st.integers(0, 2**32 - 1))
def test_endpoint_consistency(seed):
    xk, xk1 = random_pair(np.random.default_rng(seed))
    a = gp.interpolate(xk, xk1, QC, xk.t).state
    b = gp.interpolate(xk, xk1, QC, xk1.t).state
    assert np.abs(a.pose - xk.pose).max() < 1e-10 and np.abs(a.velocity - xk.velocity).max() < 1e-10
    assert np.abs(b.pose - xk1.pose).max() < 1e-10 and np.abs(b.velocity - xk1.velocity).max() < 1e-10
