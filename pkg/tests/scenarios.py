"""Test drivers shared by the unit and acceptance suites."""

from dataclasses import dataclass, field

import numpy as np

from eventvo import liegroups as lg
from eventvo.estimator.factors import DistancePrior, PosePrior
from eventvo.estimator.marginalization import dynamic_marginalization, landmark_coupling, marginalize_system
from eventvo.estimator.window import Landmark, SlidingWindow
from eventvo.gp_motion import QcModel

# -- linear-Gaussian sliding window ---------------------------------------------

DS = 3  # dimension of every state and nuisance variable


@dataclass
class LinearProblem:
    n_states: int
    spans: list                   # landmark j observed by states spans[j][0]..spans[j][1]
    factors: list                 # (variables, J (rows, DS * len(vars)), z (rows,))
    newest: list = field(default_factory=list)  # per factor, the state index that completes it


def random_linear_problem(rng, n_states, max_skip=3, max_span=4):
    """Chain with skip edges and landmark-style nuisance variables.

    Variables are ``("x", i)`` for states and ``("l", j)`` for landmarks.
    """
    factors, newest = [], []

    def block(rows):
        # well-conditioned: rotation times singular values in [0.5, 1.5]
        q, _ = np.linalg.qr(rng.normal(size=(DS, DS)))
        return (q * rng.uniform(0.5, 1.5, DS))[:rows]

    def add(variables, rows, last):
        J = np.hstack([block(rows) for _ in variables])
        factors.append((variables, J, rng.normal(size=rows)))
        newest.append(last)

    add([("x", 0)], DS, 0)
    for i in range(1, n_states):
        add([("x", i - 1), ("x", i)], DS, i)
        if i >= 2 and rng.random() < 0.5:
            j = i - int(rng.integers(2, max_skip + 1))
            if j >= 0:
                add([("x", j), ("x", i)], 2, i)
    spans = []
    for a in range(n_states - 1):
        for _ in range(int(rng.integers(1, 4))):
            b = min(n_states - 1, a + int(rng.integers(1, max_span + 1)))
            spans.append((a, b))
            lid = len(spans) - 1
            for s in range(a, b + 1):
                add([("x", s), ("l", lid)], DS, s)
    return LinearProblem(n_states, spans, factors, newest)


def _assemble(variables, factors, prior=None):
    index = {v: i for i, v in enumerate(variables)}
    n = DS * len(variables)
    H, g = np.zeros((n, n)), np.zeros(n)
    for vs, J, z in factors:
        cols = np.concatenate([DS * index[v] + np.arange(DS) for v in vs])
        H[np.ix_(cols, cols)] += J.T @ J
        g[cols] += J.T @ z
    if prior is not None:
        pvars, Hp, gp_ = prior
        cols = np.concatenate([DS * index[v] + np.arange(DS) for v in pvars])
        H[np.ix_(cols, cols)] += Hp
        g[cols] += gp_
    return H, g


def batch_map(problem, upto):
    """Dense MAP over every variable touched by factors completed at ``upto``."""
    fs = [f for f, last in zip(problem.factors, problem.newest) if last <= upto]
    variables = sorted({v for vs, _, _ in fs for v in vs})
    H, g = _assemble(variables, fs)
    x = np.linalg.solve(H, g)
    return {v: x[DS * i:DS * i + DS] for i, v in enumerate(variables)}


@dataclass
class LinearWindowResult:
    max_error: float
    marginalizations: int
    max_coupling: float
    window_sizes: list


def run_linear_window(problem, n_min=4):
    """Sliding-window MAP with Alg. 1 marking and Markov-blanket marginalization.

    After every state insertion, the retained-variable MAP is compared with the
    dense batch MAP over all factors seen so far.
    """
    active_factors = []
    prior = None               # (variables, H, g) over retained knots
    knots, landmarks = [], []  # retained state / landmark indices
    max_err, n_marg, max_coupling, sizes = 0.0, 0, 0.0, []
    for i in range(problem.n_states):
        knots.append(i)
        for j, (a, _) in enumerate(problem.spans):
            if a == i:
                landmarks.append(j)
        active_factors += [f for f, last in zip(problem.factors, problem.newest) if last == i]

        trajectories = {j: (float(problem.spans[j][0]), float(problem.spans[j][1]))
                        for j in landmarks if problem.spans[j][1] <= i}
        # unfinished landmarks still count as associated but can never be marked
        ongoing = {j: (float(problem.spans[j][0]), np.inf) for j in landmarks if problem.spans[j][1] > i}
        spans = {**trajectories, **ongoing}

        def associated(k, knots=knots, spans=spans):
            t = knots[k]
            return [j for j, (a, b) in spans.items() if a <= t <= b]

        mk, ml = [], []
        if len(knots) >= 2:
            plan = dynamic_marginalization([float(k) for k in knots], spans, n_min, associated)
            mk = [knots[k] for k in plan.knots]
            ml = sorted(plan.trajectories)
        if mk or ml:
            prior = _marginalize(knots, landmarks, active_factors, prior, mk, ml)
            active_factors = [f for f in active_factors
                              if not any(v in {("x", k) for k in mk} | {("l", j) for j in ml} for v in f[0])]
            knots = [k for k in knots if k not in mk]
            landmarks = [j for j in landmarks if j not in ml]
            n_marg += 1
            # arrow shape of the retained system
            variables = [("x", k) for k in knots] + [("l", j) for j in landmarks]
            H, _ = _assemble(variables, active_factors, prior)
            max_coupling = max(max_coupling, landmark_coupling(H, DS * len(knots), len(landmarks)))
        sizes.append(len(knots))

        variables = [("x", k) for k in knots] + [("l", j) for j in landmarks]
        H, g = _assemble(variables, active_factors, prior)
        x = np.linalg.solve(H, g)
        ref = batch_map(problem, i)
        for n, v in enumerate(variables):
            max_err = max(max_err, float(np.abs(x[DS * n:DS * n + DS] - ref[v]).max()))
    return LinearWindowResult(max_err, n_marg, max_coupling, sizes)


def _marginalize(knots, landmarks, factors, prior, mk, ml):
    gone = {("x", k) for k in mk} | {("l", j) for j in ml}
    blanket_factors = [f for f in factors if any(v in gone for v in f[0])]
    touched = {v for vs, _, _ in blanket_factors for v in vs}
    if prior is not None:
        touched |= set(prior[0])
    variables = sorted(touched, key=lambda v: (v[0] != "x", v[1]))
    keep_vars = [v for v in variables if v not in gone]
    if any(v[0] == "l" for v in keep_vars):
        raise AssertionError("marginalization would put a landmark into the prior")
    H, g = _assemble(variables, blanket_factors, prior if prior is not None else None)
    idx = {v: DS * n + np.arange(DS) for n, v in enumerate(variables)}
    lm_blocks = [idx[("l", j)] for j in ml if ("l", j) in idx]
    knot_cols = np.concatenate([idx[("x", k)] for k in mk]) if mk else np.zeros(0, int)
    keep = np.concatenate([idx[v] for v in keep_vars]) if keep_vars else np.zeros(0, int)
    Hn, gn = marginalize_system(H, g, lm_blocks, knot_cols, keep)
    return (keep_vars, Hn, gn) if keep_vars else None


# -- nonlinear windows from simgen ----------------------------------------------

def window_from_truth(data, t0, n_knots, knot_dt=0.05, qc=None, use_true_pixels=True, min_obs=5):
    """Sliding window with knots and landmarks at ground truth.

    Gauge priors pin the first pose and the first-to-last knot distance to
    their true values.
    """
    times = t0 + knot_dt * np.arange(n_knots)
    states = data.trajectory.states(times)
    w = SlidingWindow(data.scene.camera, qc or QcModel.diagonal(10.0, 0.02))
    for s in states:
        w.add_knot(s)
    for tr in data.tracks:
        uv = data.true_uv[tr.id] if use_true_pixels else data.scene.camera.undistort(tr.uv)
        sel = (tr.t >= times[0]) & (tr.t < times[-1])
        if sel.sum() < min_obs:
            continue
        w.landmarks[tr.id] = Landmark(data.landmarks[data.track_landmark[tr.id]].copy(), tr.t.copy(),
                                      np.array(uv), float(tr.t[sel][0]))
    w.pose_priors = [PosePrior(0, states[0].pose.copy(), 1e-4)]
    d = float(np.linalg.norm(states[-1].pose[:3, 3] - states[0].pose[:3, 3]))
    w.distance_priors = [DistancePrior(0, n_knots - 1, d, 1e-3)]
    return w, states


def perturb_window(w, rng, scale):
    d = scale * rng.normal(size=(len(w), 12))
    w.poses = w.poses @ lg.se3_exp(d[:, :6])
    w.vels = w.vels + d[:, 6:]
    for lm in w.landmarks.values():
        lm.point = lm.point + scale * rng.normal(size=3)


# -- Alg. 1, transcribed line by line ------------------------------------------

def alg1_reference(chi, F, N_min):
    """Direct transcription of the dynamic-marginalization pseudocode.

    ``chi`` is the list of knot times and ``F`` maps trajectory id to its list
    of measurement times.  ``F(x_k)`` is the set of trajectories with a
    measurement in ``[t_k, t_{k+1})``; trajectories already in ``F_m`` do not
    count.  ``N`` is read as the window size that would remain after removing
    ``x_k``, so a window already at ``N_min`` loses nothing.
    """
    chi_m = []
    F_m = set()
    for i, F_i in F.items():
        m_1 = F_i[0]
        m_n = F_i[-1]
        t_front = m_1
        t_back = m_n
        t_0 = chi[0]
        t_1 = chi[1]
        t_N = chi[-1]
        t_eps = 0.2 * t_0 + 0.8 * t_N
        if t_back < t_eps and t_0 <= t_front < t_1:
            F_m = F_m | {i}

    def mapfn(k):
        if k + 1 >= len(chi):
            return set()
        return {i for i, F_i in F.items() if any(chi[k] <= t < chi[k + 1] for t in F_i)}

    for k, _x_k in enumerate(chi):
        N = len(chi) - len(chi_m) - 1
        if N < N_min:
            break
        F_kr = mapfn(k) - F_m
        if F_kr == set():
            chi_m = chi_m + [k]
        if F_kr != set():
            break
    return chi_m, F_m
