import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from l2lpbf.qp import (DEPTH_SCALE, OcpSpec, QpError, QpNonConvergence, QpProblem, condense,
                       depth_response, ocp_cost, solve_box_qp, solve_ocp, verify_kkt)
from l2lpbf.sysid import rollout

from qp_oracle import brute_force_box_qp

A = np.array([[0.6, 0.0], [3.0, 0.7]])
B = np.array([1.0e-7, 3.0e-7])
C = np.array([2e-6, -6e-5])


def random_box_qp(rng, n, pinned_frac=0.2):
    M = rng.normal(size=(n, n))
    H = M @ M.T + 0.1 * np.eye(n)
    target = rng.uniform(60.0, 190.0, n)
    f = -H @ target
    lo, hi = np.full(n, 100.0), np.full(n, 150.0)
    pinned = rng.random(n) < pinned_frac
    lo[pinned] = hi[pinned] = 0.0
    return QpProblem(H, f, lo, hi)


def test_separable_examples():
    n = 5
    qp = QpProblem(np.eye(n), np.full(n, -120.0), np.full(n, 100.0), np.full(n, 150.0))
    sol = solve_box_qp(qp)
    assert np.allclose(sol.u, 120.0, rtol=0, atol=1e-12) and sol.active_set == ()
    qp = QpProblem(np.eye(n), np.full(n, -200.0), np.full(n, 100.0), np.full(n, 150.0))
    sol = solve_box_qp(qp)
    assert np.all(sol.u == 150.0) and sol.upper == tuple(range(n))


@pytest.mark.parametrize("seed", range(40))
def test_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    qp = random_box_qp(rng, int(rng.integers(1, 8)))
    ref, _ = brute_force_box_qp(qp.H, qp.f, qp.lo, qp.hi)
    sol = solve_box_qp(qp)
    assert np.max(np.abs(sol.u - ref)) <= 1e-8
    assert verify_kkt(qp, sol.u).ok


def test_single_variable_closed_form():
    spec = OcpSpec(30e-6, A, B, C, xi=[True], u_min=100, u_max=150, r_smooth=0.05)
    qp = condense(spec)
    # by hand: depth after one interval d = (B0 u + c0) um, cost q (d - 30)^2 + r (u - 100)^2
    b, c0 = B[0] * DEPTH_SCALE, C[0] * DEPTH_SCALE
    u_star = (b * (30 - c0) + 0.05 * 100) / (b**2 + 0.05)
    sol = solve_box_qp(qp)
    assert sol.u[0] == pytest.approx(np.clip(u_star, 100, 150), rel=1e-7)
    for target in (5e-6, 80e-6):  # vertex cases
        spec.target_depth = target
        u_star = (b * (target * DEPTH_SCALE - c0) + 0.05 * 100) / (b**2 + 0.05)
        assert solve_box_qp(condense(spec)).u[0] == pytest.approx(np.clip(u_star, 100, 150))


def test_depth_response_matches_rollout():
    rng = np.random.default_rng(0)
    u = rng.uniform(100, 150, 25)
    G, h = depth_response(A, B, C, 25)
    assert np.allclose(G @ u + h, rollout(A, B, C, u)[:, 0], rtol=1e-12, atol=1e-20)


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=1, max_value=30), st.integers(min_value=0, max_value=2**31))
def test_condensed_objective_equals_direct_cost(n, seed):
    rng = np.random.default_rng(seed)
    xi = rng.random(n) < 0.8
    spec = OcpSpec(30e-6, A, B, C, xi)
    qp = condense(spec)
    u = np.where(xi, rng.uniform(100, 150, n), 0.0)
    eps = qp.H[0, 0] - 2 * (spec.q_depth * (depth_response(A, B, C, n)[0][:, 0] * DEPTH_SCALE) ** 2).sum() \
        - 2 * spec.r_smooth * (2.0 if n > 1 else 1.0)
    # the Tikhonov term adds 0.5 * eps * |u|^2 on top of the OCP cost
    assert qp.objective(u) == pytest.approx(ocp_cost(spec, u) + 0.5 * eps * u @ u, rel=1e-9)
    assert np.all(qp.lo[~xi] == 0) and np.all(qp.hi[~xi] == 0)


def test_all_off_mask_pins_everything():
    spec = OcpSpec(30e-6, A, B, C, np.zeros(12, dtype=bool))
    sol = solve_box_qp(condense(spec))
    assert not sol.u.any()


def test_degenerate_model_uses_regularization():
    spec = OcpSpec(30e-6, np.zeros((2, 2)), np.zeros(2), np.zeros(2), np.ones(6, dtype=bool),
                   r_smooth=0.0)
    qp = condense(spec)
    assert np.all(np.diag(qp.H) > 0)
    sol = solve_box_qp(qp)
    # no tracking term and no rate term: the regularizer pulls u toward 0, clipped at u_min
    assert np.all(sol.u == 100.0)


def test_non_pd_hessian_rejected():
    spec = OcpSpec(30e-6, A, B, C, np.ones(4, dtype=bool))
    with pytest.raises(QpError):
        spec.q_depth = -1.0
        condense(spec)
    with pytest.raises(ValueError):
        OcpSpec(30e-6, A, B, C, np.ones(4, dtype=bool), q_depth=0.0)


def test_verify_kkt_perturbation_and_infeasible():
    rng = np.random.default_rng(5)
    n = 6
    M = rng.normal(size=(n, n))
    H = M @ M.T + np.eye(n)
    u_star = rng.uniform(110, 140, n)
    qp = QpProblem(H, -H @ u_star, np.full(n, 100.0), np.full(n, 150.0))
    sol = solve_box_qp(qp)
    assert verify_kkt(qp, sol.u).ok
    j = 2
    bumped = sol.u.copy()
    bumped[j] += 1.0
    rep = verify_kkt(qp, bumped)
    assert not rep.ok
    assert rep.stationarity == pytest.approx(np.max(np.abs(H[:, j])), rel=1e-6)
    low = sol.u.copy()
    low[0] = 99.0
    rep = verify_kkt(qp, low)
    assert not rep.ok and rep.feasibility == pytest.approx(1.0)


def test_uniqueness_and_scaling_covariance():
    rng = np.random.default_rng(11)
    for _ in range(10):
        qp = random_box_qp(rng, 8)
        a, b = solve_box_qp(qp), solve_box_qp(qp)
        assert np.max(np.abs(a.u - b.u)) <= 1e-10
        scaled = QpProblem(7.5 * qp.H, 7.5 * qp.f, qp.lo, qp.hi)
        assert np.max(np.abs(solve_box_qp(scaled).u - a.u)) <= 1e-8


def test_objective_monotone_along_iterations():
    rng = np.random.default_rng(7)
    for _ in range(20):
        qp = random_box_qp(rng, 8, pinned_frac=0.0)
        hist = solve_box_qp(qp, keep_history=True).history
        # the iterate starts from the clipped unconstrained point; from there on no increase
        assert all(b <= a + 1e-9 * max(1.0, abs(a)) for a, b in zip(hist[1:], hist[2:]))


def test_nonconvergence_carries_best_iterate():
    rng = np.random.default_rng(2)
    for _ in range(50):
        qp = random_box_qp(rng, 8, pinned_frac=0.0)
        try:
            solve_box_qp(qp, max_changes=0)
        except QpNonConvergence as exc:
            assert exc.best is not None and exc.best.shape == (8,)
            assert exc.residual > 0
            return
    pytest.fail("no instance needed an active-set change")


def test_solve_ocp_reports_time():
    spec = OcpSpec(30e-6, A, B, C, np.ones(40, dtype=bool))
    sol, elapsed = solve_ocp(spec)
    assert elapsed > 0 and sol.kkt_residual <= 1e-9
    assert np.all((sol.u >= 100) & (sol.u <= 150))


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=1, max_value=60), st.integers(min_value=0, max_value=2**31),
       st.floats(min_value=5.0, max_value=80.0))
def test_condensed_solutions_satisfy_kkt(n, seed, target_um):
    rng = np.random.default_rng(seed)
    xi = np.zeros(n, dtype=bool)
    a, b = sorted(rng.integers(0, n + 1, 2))
    xi[a:max(b, a + 1)] = True
    spec = OcpSpec(target_um * 1e-6, A, B, C, xi)
    qp = condense(spec)
    sol = solve_box_qp(qp)
    rep = verify_kkt(qp, sol.u)
    assert rep.ok, rep.residual
    assert np.all(sol.u[~xi] == 0)
    assert np.all((sol.u[xi] >= 100) & (sol.u[xi] <= 150))
