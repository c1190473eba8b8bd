"""Engine building blocks: costs, states, gradients, events, and the loop.

The finite-difference check here is the small sibling of the acceptance
gate's randomized version: the analytic gradients must match central
differences of the scalar Lagrangian.  The two-generator dispatch has the
closed form P_k = D (1/c_k) / sum(1/c_j) with the balance price at
-2 c_k P_k, which pins the whole loop end to end.
"""

from __future__ import annotations

import dataclasses
import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tdcoopt.acpf import SlackAccount
from tdcoopt.core import (
    Cost,
    DerCapacityScale,
    DivergenceError,
    DualState,
    EngineError,
    GeneratorOutage,
    PrimalState,
    SolverConfig,
    StaleFeedbackError,
    apply_event,
    build_problem,
    check_stepsize,
    default_probes,
    der_signals,
    dual_update,
    eval_lagrangian,
    grad_dual,
    grad_primal,
    initial_state,
    measure,
    project_box,
    quadratic_cost,
    solve,
    total_cost,
)
from tdcoopt.network import CaseError, Der, VoltageLimits, attach_feeders

from conftest import make_chain_feeder, make_system, make_ts


def dispatch_only(gen_specs, load=2.0):
    """A transmission-only problem (no feeders) with an explicit demand."""
    ts = make_ts(gen_specs, load_bus=5, load=load, slack_bus=9)
    return build_problem(attach_feeders(ts, []), VoltageLimits(0.95, 1.05))


# ---------------------------------------------------------------------------
# costs and configuration
# ---------------------------------------------------------------------------

def test_quadratic_cost():
    cost = quadratic_cost(1.5, label="g")
    assert cost.value(2.0) == pytest.approx(6.0)
    assert cost.gradient(2.0) == pytest.approx(6.0)
    assert cost.modulus == pytest.approx(3.0)
    assert cost.label == "g"


def test_quadratic_cost_rejects_nonpositive():
    with pytest.raises(ValueError, match="positive"):
        quadratic_cost(0.0)
    with pytest.raises(ValueError, match="positive"):
        quadratic_cost(-1.0)


def test_solver_config_validation():
    with pytest.raises(ValueError, match="eps"):
        SolverConfig(eps=0.0)
    with pytest.raises(ValueError, match="eta"):
        SolverConfig(eta=-0.1)
    with pytest.raises(ValueError, match="max_iter"):
        SolverConfig(max_iter=-1)
    with pytest.raises(ValueError, match="feedback"):
        SolverConfig(feedback="dc")


def test_solver_config_allows_zero_tolerances():
    # zero tolerances force a fixed-horizon run (used by run comparisons)
    cfg = SolverConfig(tol_primal=0.0, tol_dual=0.0, tol_balance=0.0)
    assert cfg.tol_primal == 0.0


def test_project_box():
    assert project_box(0.5, 0.0, 1.0) == 0.5
    assert project_box(-3.0, 0.0, 1.0) == 0.0
    assert project_box(3.0, 0.0, 1.0) == 1.0
    with pytest.raises(ValueError, match="empty box"):
        project_box(0.5, 1.0, 0.0)


@settings(deadline=None, max_examples=60)
@given(
    a=st.floats(-50, 50), b=st.floats(-50, 50),
    lo=st.floats(-10, 10), width=st.floats(0, 10),
)
def test_project_box_nonexpansive(a, b, lo, width):
    hi = lo + width
    pa, pb = project_box(a, lo, hi), project_box(b, lo, hi)
    assert abs(pa - pb) <= abs(a - b) + 1e-12
    assert project_box(pa, lo, hi) == pa


# ---------------------------------------------------------------------------
# problem assembly and initial states
# ---------------------------------------------------------------------------

def test_build_problem_layout():
    system = make_system(n_feeders=2, gen_specs=[(1, 1.0), (2, 1.5)])
    problem = build_problem(system, VoltageLimits(0.95, 1.05))
    assert problem.n_nodes == 6  # two 3-node feeders
    assert problem.n_generators == 2
    np.testing.assert_allclose(problem.gen_coef, [1.0, 1.5])
    np.testing.assert_allclose(problem.gen_hi, [10.0, 10.0])
    # DERs sit on nodes 3 and 4, global positions 1, 2 / 4, 5
    np.testing.assert_allclose(problem.a_p != 0, [0, 1, 1, 0, 1, 1])
    np.testing.assert_allclose(problem.p_hi, [0, 0.05, 0.05, 0, 0.05, 0.05])
    np.testing.assert_allclose(problem.q_lo, [0, -0.02, -0.02, 0, -0.02, -0.02])
    # one p cost and one q cost per DER, after the generator costs
    assert len(problem.registered_costs) == 2 + 2 * 4
    assert problem.base_gen_hi is not problem.gen_hi


def test_build_problem_rejects_two_ders_on_one_node():
    feeder = make_chain_feeder(der_nodes={3: {}}, host_bus=5)
    doubled = dataclasses.replace(feeder, ders=feeder.ders + feeder.ders)
    system = attach_feeders(make_ts(extra_buses=(5,)), [doubled])
    with pytest.raises(CaseError, match="two DERs on node 3"):
        build_problem(system, VoltageLimits(0.95, 1.05))


def test_initial_state_modes():
    system = make_system()
    problem = build_problem(system, VoltageLimits(0.95, 1.05))
    x_mid, y = initial_state(problem, mode="midbox")
    np.testing.assert_allclose(x_mid.P_M, [5.0, 5.0])
    np.testing.assert_allclose(x_mid.p, 0.0)
    assert y.lam == 0.0
    assert all(np.all(mu == 0.0) for mu in y.mu)

    x_set, _ = initial_state(problem, mode="setpoint")
    np.testing.assert_allclose(x_set.P_M, [0.0, 0.0])  # recorded setpoints

    rng = np.random.default_rng(1)
    x_rnd, _ = initial_state(problem, mode="random", rng=rng)
    assert np.all(x_rnd.P_M >= 0.0) and np.all(x_rnd.P_M <= 10.0)

    x_exp, _ = initial_state(problem, P_M=np.array([99.0, -5.0]))
    np.testing.assert_allclose(x_exp.P_M, [10.0, 0.0])  # clipped to boxes


def test_initial_state_errors():
    problem = build_problem(make_system(), VoltageLimits(0.95, 1.05))
    with pytest.raises(ValueError, match="rng"):
        initial_state(problem, mode="random")
    with pytest.raises(ValueError, match="unknown init mode"):
        initial_state(problem, mode="cold")


def test_dual_state_mu_halves():
    y = DualState(lam=0.0, mu=(np.array([1.0, 2.0, 3.0, 4.0]),))
    np.testing.assert_allclose(y.mu_upper(0), [1.0, 2.0])
    np.testing.assert_allclose(y.mu_lower(0), [3.0, 4.0])


# ---------------------------------------------------------------------------
# price signals and the dual update
# ---------------------------------------------------------------------------

def test_der_signals_balance_term():
    # with zero multipliers alpha is the balance price itself (M = -1)
    problem = build_problem(make_system(n_feeders=1), VoltageLimits(0.95, 1.05))
    y = DualState(lam=-2.0, mu=(np.zeros(6),))
    alphas, betas = der_signals(problem.models, y)
    np.testing.assert_allclose(alphas[0], -2.0)
    np.testing.assert_allclose(betas[0], 0.0)


def test_der_signals_voltage_term():
    problem = build_problem(make_system(n_feeders=1), VoltageLimits(0.95, 1.05))
    model = problem.models[0]
    mu = np.array([0.3, 0.0, 0.1, 0.0, 0.2, 0.0])  # upper rows then lower
    y = DualState(lam=0.0, mu=(mu,))
    alphas, betas = der_signals(problem.models, y)
    w = mu[:3] - mu[3:]
    np.testing.assert_allclose(alphas[0], model.A.T @ w, atol=1e-15)
    np.testing.assert_allclose(betas[0], model.B.T @ w, atol=1e-15)


def test_der_signals_zero_lambda_baseline():
    # hiding the balance price keeps the voltage terms intact
    problem = build_problem(make_system(n_feeders=1), VoltageLimits(0.95, 1.05))
    mu = np.array([0.3, 0.0, 0.1, 0.0, 0.2, 0.0])
    y = DualState(lam=-2.0, mu=(mu,))
    with_lam, _ = der_signals(problem.models, y)
    hidden, _ = der_signals(problem.models, y, zero_lambda=True)
    y_mu_only = DualState(lam=0.0, mu=(mu,))
    mu_only, _ = der_signals(problem.models, y_mu_only)
    np.testing.assert_allclose(hidden[0], mu_only[0], atol=1e-15)
    assert not np.allclose(hidden[0], with_lam[0])


def test_dual_update_arithmetic(limits):
    # [TRIVIAL] one node 0.01 above the band: mu_up climbs by eps * 0.01
    # minus the eta leak, mu_lo decays toward zero, lambda integrates the
    # balance residual
    ts = make_ts([(1, 1.0)], load_bus=5, load=2.0)
    from tdcoopt.core import Measurement

    meas = Measurement(v=(np.array([1.06]),), P_L=np.array([0.3]), tag=1,
                       source="linear")
    y = DualState(lam=0.0, mu=(np.array([0.02, 0.03]),))
    account = SlackAccount(P0_slack=1.1)  # matches P_M=1.2, P_L=0.3
    y_new, residual = dual_update(
        ts, limits, y, meas, np.array([1.2]), account, eps=0.1, eta=0.5
    )
    assert residual == pytest.approx(0.0)
    # g = [1.06 - 1.05, 0.95 - 1.06] = [0.01, -0.11]
    assert y_new.mu[0][0] == pytest.approx(0.02 + 0.1 * (0.01 - 0.5 * 0.02))
    assert y_new.mu[0][1] == pytest.approx(0.03 + 0.1 * (-0.11 - 0.5 * 0.03))
    assert y_new.lam == pytest.approx(0.0)

    y_up, residual_up = dual_update(
        ts, limits, y, meas, np.array([1.7]), account, eps=0.1, eta=0.0
    )
    assert residual_up == pytest.approx(0.5)  # over-supply by 0.5
    assert y_up.lam == pytest.approx(0.05)


def test_dual_update_clamps_at_zero(limits):
    ts = make_ts([(1, 1.0)])
    from tdcoopt.core import Measurement

    meas = Measurement(v=(np.array([1.0]),), P_L=np.array([0.0]), tag=1,
                       source="linear")
    y = DualState(lam=0.0, mu=(np.zeros(2),))
    account = SlackAccount(P0_slack=0.0)
    y_new, _ = dual_update(ts, limits, y, meas, np.zeros(1), account, 0.1, 0.0)
    assert np.all(y_new.mu[0] >= 0.0)
    np.testing.assert_allclose(y_new.mu[0], 0.0)  # violations are negative


# ---------------------------------------------------------------------------
# measurements
# ---------------------------------------------------------------------------

def test_measure_linear_matches_model(limits):
    problem = build_problem(make_system(n_feeders=2), limits)
    x, _ = initial_state(problem)
    rng = np.random.default_rng(5)
    x = PrimalState(
        p=rng.uniform(problem.p_lo, problem.p_hi),
        q=rng.uniform(problem.q_lo, problem.q_hi),
        P_M=x.P_M,
    )
    meas = measure(problem, x, feedback="linear", tag=7)
    assert meas.source == "linear" and meas.tag == 7
    for k, model in enumerate(problem.models):
        sl = problem.system.feeder_slice(k)
        np.testing.assert_allclose(
            meas.v[k], model.c + model.A @ x.p[sl] + model.B @ x.q[sl]
        )
        assert meas.P_L[k] == pytest.approx(model.d - x.p[sl].sum())


def test_measure_ac_matches_sweep(limits):
    from tdcoopt.acpf import sweep_feeder

    problem = build_problem(make_system(n_feeders=1), limits)
    x, _ = initial_state(problem)
    meas = measure(problem, x, feedback="ac", tag=3)
    assert meas.source == "ac"
    ref = sweep_feeder(problem.system.feeders[0], x.p, x.q)
    np.testing.assert_allclose(meas.v[0], ref.v, atol=1e-12)
    assert meas.ac_iterations >= 1


def test_measure_unknown_feedback(limits):
    problem = build_problem(make_system(n_feeders=1), limits)
    x, _ = initial_state(problem)
    with pytest.raises(ValueError, match="feedback"):
        measure(problem, x, feedback="dc")


# ---------------------------------------------------------------------------
# gradients against finite differences
# ---------------------------------------------------------------------------

def test_gradients_match_finite_differences(limits, rng):
    problem = build_problem(
        make_system(n_feeders=1, gen_specs=[(1, 1.0), (2, 1.5)]), limits
    )
    eta = 0.07
    account = SlackAccount(P0_slack=0.4)
    x = PrimalState(
        p=rng.uniform(-0.01, 0.01, problem.n_nodes),
        q=rng.uniform(-0.01, 0.01, problem.n_nodes),
        P_M=rng.uniform(1.0, 3.0, 2),
    )
    y = DualState(lam=-0.8, mu=(rng.uniform(0.0, 0.5, 6),))

    dp, dq, dP = grad_primal(problem, x, y)
    dlam, dmu = grad_dual(problem, x, y, account=account, eta=eta)

    def L(x_, y_):
        return eval_lagrangian(problem, x_, y_, account=account, eta=eta)

    h = 1e-6
    for i in range(problem.n_nodes):
        e = np.zeros(problem.n_nodes)
        e[i] = h
        fd = (L(dataclasses.replace(x, p=x.p + e), y)
              - L(dataclasses.replace(x, p=x.p - e), y)) / (2 * h)
        assert dp[i] == pytest.approx(fd, abs=1e-7)
        fd = (L(dataclasses.replace(x, q=x.q + e), y)
              - L(dataclasses.replace(x, q=x.q - e), y)) / (2 * h)
        assert dq[i] == pytest.approx(fd, abs=1e-7)
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        fd = (L(dataclasses.replace(x, P_M=x.P_M + e), y)
              - L(dataclasses.replace(x, P_M=x.P_M - e), y)) / (2 * h)
        assert dP[i] == pytest.approx(fd, abs=1e-7)
    fd = (L(x, dataclasses.replace(y, lam=y.lam + h))
          - L(x, dataclasses.replace(y, lam=y.lam - h))) / (2 * h)
    assert dlam == pytest.approx(fd, abs=1e-7)
    for j in range(6):
        e = np.zeros(6)
        e[j] = h
        fd = (L(x, DualState(lam=y.lam, mu=(y.mu[0] + e,)))
              - L(x, DualState(lam=y.lam, mu=(y.mu[0] - e,)))) / (2 * h)
        assert dmu[0][j] == pytest.approx(fd, abs=1e-7)


def test_grad_dual_requires_fresh_ac_measurement(limits):
    problem = build_problem(make_system(n_feeders=1), limits)
    x, y = initial_state(problem)
    with pytest.raises(StaleFeedbackError, match="requires a measurement"):
        grad_dual(problem, x, y, feedback="ac")
    stale = measure(problem, x, feedback="ac", tag=3)
    with pytest.raises(StaleFeedbackError, match="tagged 3, expected 5") as exc:
        grad_dual(problem, x, y, feedback="ac", measurement=stale, iteration=5)
    assert exc.value.iteration == 5


def test_eval_lagrangian_regularization(limits, rng):
    problem = build_problem(make_system(n_feeders=1), limits)
    x, _ = initial_state(problem)
    y = DualState(lam=-1.2, mu=(rng.uniform(0, 1, 6),))
    plain = eval_lagrangian(problem, x, y, eta=0.0)
    damped = eval_lagrangian(problem, x, y, eta=0.4)
    mu_sq = float(y.mu[0] @ y.mu[0])
    assert damped == pytest.approx(plain - 0.2 * (1.44 + mu_sq))


def test_total_cost_arithmetic(limits):
    problem = build_problem(
        make_system(n_feeders=1, gen_specs=[(1, 2.0)]), limits
    )
    x = PrimalState(
        p=np.array([0.0, 0.1, 0.2]), q=np.array([0.0, 0.0, 0.3]),
        P_M=np.array([3.0]),
    )
    # [TRIVIAL] 2*9 + 1*(0.01 + 0.04) + 0.1*0.09, DERs on nodes 3 and 4
    assert total_cost(problem, x) == pytest.approx(18.0 + 0.05 + 0.009)


# ---------------------------------------------------------------------------
# stepsize certificate
# ---------------------------------------------------------------------------

def test_check_stepsize_two_by_two_example():
    # [PAPER] one generator with c = 1 against the balance row at
    # eta = 0.1: F = [[2, 1], [-1, 0.1]], s = 0.1, l = 2.4, bound = 2s/l^2
    problem = dispatch_only([(1, 1.0)])
    report = check_stepsize(problem, eta=0.1)
    assert report.s == pytest.approx(0.1)
    assert report.l == pytest.approx(2.4, abs=1e-12)
    assert report.eps_bound == pytest.approx(0.2 / 5.76, abs=1e-12)


def test_check_stepsize_eta_zero_uses_cost_curvature():
    problem = dispatch_only([(1, 1.0), (2, 1.5)])
    report = check_stepsize(problem, eta=0.0)
    assert report.s == pytest.approx(2.0)  # smallest modulus 2 * 1.0
    assert report.eps_bound == pytest.approx(2 * 2.0 / report.l**2)


def test_check_stepsize_refuses_unknown_modulus():
    problem = dispatch_only([(1, 1.0)])
    opaque = Cost(value=abs, gradient=np.sign, modulus=None, label="piecewise")
    with pytest.raises(ValueError, match="piecewise"):
        check_stepsize(problem, eta=0.1, costs=(opaque,))
    with pytest.raises(ValueError, match="no costs"):
        check_stepsize(problem, eta=0.1, costs=())


# ---------------------------------------------------------------------------
# events
# ---------------------------------------------------------------------------

def test_generator_outage_event(limits):
    problem = build_problem(make_system(), limits)
    x, _ = initial_state(problem)
    x2 = apply_event(problem, x, GeneratorOutage(iteration=5, bus_id=2))
    assert x2.P_M[1] == 0.0
    assert not problem.online[1]
    assert problem.gen_lo[1] == problem.gen_hi[1] == 0.0
    assert problem.base_gen_hi[1] == 10.0  # reference boxes untouched
    assert x2.P_M[0] == x.P_M[0]


def test_outage_unknown_bus(limits):
    problem = build_problem(make_system(), limits)
    x, _ = initial_state(problem)
    with pytest.raises(EngineError, match="bus 77") as exc:
        apply_event(problem, x, GeneratorOutage(iteration=9, bus_id=77))
    assert exc.value.iteration == 9


def test_der_capacity_scale_event(limits):
    problem = build_problem(make_system(n_feeders=1), limits)
    x, _ = initial_state(problem)
    x = dataclasses.replace(x, p=problem.p_hi.copy())
    hi_before = problem.p_hi.copy()
    x2 = apply_event(problem, x, DerCapacityScale(iteration=5, factor=0.5))
    np.testing.assert_allclose(problem.p_hi, hi_before * 0.5)
    np.testing.assert_allclose(x2.p, problem.p_hi)  # re-clipped into the box
    with pytest.raises(ValueError, match="positive"):
        DerCapacityScale(iteration=5, factor=0.0)


def test_apply_unknown_event(limits):
    problem = build_problem(make_system(), limits)
    x, _ = initial_state(problem)
    with pytest.raises(EngineError, match="unknown event type"):
        apply_event(problem, x, object())


# ---------------------------------------------------------------------------
# the solve loop
# ---------------------------------------------------------------------------

def test_solve_two_generator_dispatch():
    # [DERIVED] closed form for demand 2: P = (1.2, 0.8), price -2.4
    problem = dispatch_only([(1, 1.0), (2, 1.5)])
    cfg = SolverConfig(eps=0.05, max_iter=20000, tol_primal=1e-10,
                       tol_dual=1e-10, tol_balance=1e-10)
    res = solve(problem, cfg, account=SlackAccount(P0_slack=0.0))
    assert res.converged
    np.testing.assert_allclose(res.x.P_M, [1.2, 0.8], atol=1e-6)
    assert res.y.lam == pytest.approx(-2.4, abs=1e-6)
    assert res.iterations < 1000


def test_solve_zero_iterations_reports_not_converged():
    # [TRIVIAL] the status literal for an exhausted budget
    problem = dispatch_only([(1, 1.0)])
    res = solve(problem, SolverConfig(max_iter=0))
    assert res.status == "not-converged"
    assert not res.converged
    assert res.iterations == 0
    assert len(res.records) == 1 and res.records[0].iteration == 0
    assert res.records[0].step_primal is None


def test_records_cover_every_iteration():
    problem = dispatch_only([(1, 1.0), (2, 1.5)])
    cfg = SolverConfig(eps=0.05, max_iter=50, tol_primal=0.0, tol_dual=0.0,
                       tol_balance=0.0)
    res = solve(problem, cfg, account=SlackAccount(P0_slack=0.0))
    assert res.status == "not-converged" and res.iterations == 50
    assert [r.iteration for r in res.records] == list(range(51))
    assert res.history is None

    res2 = solve(
        problem,
        dataclasses.replace(cfg, record_state=True),
        account=SlackAccount(P0_slack=0.0),
    )
    assert len(res2.history) == len(res2.records)


def test_solve_divergence_error():
    problem = dispatch_only([(1, 1.0), (2, 1.5)])
    cfg = SolverConfig(eps=50.0, max_iter=100, divergence_limit=300.0)
    with pytest.raises(DivergenceError, match="blow-up bound") as exc:
        solve(problem, cfg, account=SlackAccount(P0_slack=0.0))
    assert exc.value.iteration >= 1


def test_solve_waits_for_scheduled_events():
    # tolerances alone would stop the run near iteration 450; a scheduled
    # outage at 3000 must keep it going, fire, and re-converge
    problem = dispatch_only([(1, 1.0), (2, 1.5)])
    cfg = SolverConfig(eps=0.05, max_iter=20000, tol_primal=1e-10,
                       tol_dual=1e-10, tol_balance=1e-10)
    res = solve(
        problem, cfg,
        account=SlackAccount(P0_slack=0.0),
        events=(GeneratorOutage(iteration=3000, bus_id=2),),
    )
    assert res.converged
    assert res.iterations > 3000
    assert res.x.P_M[1] == 0.0
    assert res.x.P_M[0] == pytest.approx(2.0, abs=1e-6)
    assert res.y.lam == pytest.approx(-4.0, abs=1e-6)
    # the record at the event iteration already reflects the trip
    assert res.records[3000].P_M[1] == 0.0


def test_solve_logs_stepsize_advisory(caplog):
    problem = dispatch_only([(1, 1.0)])
    cfg = SolverConfig(eps=0.9, max_iter=1, tol_primal=0.0, tol_dual=0.0,
                       tol_balance=0.0)
    with caplog.at_level(logging.INFO, logger="tdcoopt.core"):
        solve(problem, cfg, account=SlackAccount(P0_slack=0.0))
    assert any("advisory only at eta=0" in rec.message for rec in caplog.records)


def test_default_probes_pick_deepest_node(limits):
    problem = build_problem(make_system(n_feeders=2), limits)
    assert default_probes(problem) == (2, 2)  # last node of each chain


def test_solve_with_voltage_constraint(limits):
    # a feeder DER pushed by a tight upper band: at convergence the
    # binding node carries a positive multiplier and the voltage sits on
    # the limit (to first order in the model)
    system = make_system(
        n_feeders=1,
        gen_specs=[(1, 1.0)],
        load=0.5,
        der_layout={4: {"p_max": 2.0, "q_max": 1.0, "q_min": -1.0}},
    )
    tight = VoltageLimits(v_min=0.95, v_max=1.003)
    problem = build_problem(system, tight)
    # at eta = 0 an active constraint leaves a small projection-induced
    # limit cycle, so the band and the stopping rule get 1e-3 headroom
    cfg = SolverConfig(eps=0.02, eta=0.0, max_iter=60000, tol_primal=1e-3,
                       tol_dual=1e-3, tol_balance=1e-3)
    res = solve(problem, cfg, account=SlackAccount(P0_slack=0.0))
    assert res.converged
    meas = measure(problem, res.x, feedback="linear")
    v = meas.v[0]
    assert np.max(v) <= tight.v_max + 2e-3
    mu_up = res.y.mu_upper(0)
    binding = np.abs(v - tight.v_max) < 2e-3
    assert binding.any()
    assert mu_up[binding].max() > 1e-3
    assert res.x.p[2] > 0.1  # the DER is actively producing
    assert res.y.lam < 0
