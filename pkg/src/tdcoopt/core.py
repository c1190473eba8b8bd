"""Primal-dual gradient engine for joint dispatch and voltage regulation.

The problem: dispatch transmission generators and feeder-connected DERs to
minimize total quadratic cost, subject to a single real-power balance
(priced by ``lambda``), per-node voltage-band constraints on every feeder
(priced by nonnegative ``mu``), and box limits on every injection.  The
engine iterates a projected primal-dual gradient step on the regularized
Lagrangian

    L = sum(costs) + sum_k mu_k' g_k(v_k) + lambda * balance
        - eta/2 * (lambda^2 + ||mu||^2)

where voltages and head draws come from the affine feeder model, and the
balance term is the deviation of the implied slack-bus output from its
recorded value.

Each iteration is one synchronous round: DERs and generators move first
(using the prices of the previous round), the network response at the new
setpoints is then measured — either through the affine model or through an
exact power-flow sweep — and the dual variables move last, consuming that
measurement.  The decentralized market engine runs the identical round
with the identical arithmetic; the shared pieces live here
(:func:`der_signals`, :func:`dual_update`, the update expressions).

Primal vectors ``p``/``q`` span every feeder node; nodes without a DER are
pinned by ``[0, 0]`` boxes.  The sign convention makes the converged price
``lambda`` negative when extra generation is needed: the stationarity
condition for each generator is ``2 c P + lambda = 0``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .acpf import (
    SlackAccount,
    SweepDivergence,
    record_slack,
    slack_residual,
    sweep_feeder,
)
from .lindistflow import LinearFeederModel, build_lindistflow
from .network import (
    CaseError,
    CoupledSystem,
    VoltageLimits,
    feeder_topology,
)
from .trace import TraceRecord

__all__ = [
    "EngineError",
    "DivergenceError",
    "StaleFeedbackError",
    "Cost",
    "quadratic_cost",
    "PrimalState",
    "DualState",
    "SolverConfig",
    "DispatchProblem",
    "build_problem",
    "initial_state",
    "project_box",
    "Measurement",
    "measure",
    "measure_feeders",
    "der_signals",
    "dual_update",
    "eval_lagrangian",
    "grad_primal",
    "grad_dual",
    "total_cost",
    "check_stepsize",
    "StepsizeReport",
    "GeneratorOutage",
    "DerCapacityScale",
    "apply_event",
    "primal_dual_step",
    "StepOutcome",
    "default_probes",
    "iteration_record",
    "solve",
    "SolveResult",
]

logger = logging.getLogger(__name__)


class EngineError(RuntimeError):
    """Engine failure carrying the iteration it happened at."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


class DivergenceError(EngineError):
    """State exceeded the blow-up bound: the stepsize is too large."""


class StaleFeedbackError(EngineError):
    """An AC measurement tagged with a different iteration was supplied."""


# ---------------------------------------------------------------------------
# costs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Cost:
    """A registered cost: value, gradient, and strong-convexity modulus.

    ``modulus`` may be ``None`` for costs whose curvature is unknown; the
    stepsize check refuses those.
    """

    value: Callable[[float], float]
    gradient: Callable[[float], float]
    modulus: float | None
    label: str = ""


def quadratic_cost(coefficient: float, label: str = "") -> Cost:
    """The built-in cost family ``c * x**2`` (modulus ``2 c``)."""
    if coefficient <= 0:
        raise ValueError(f"cost coefficient must be positive, got {coefficient}")
    return Cost(
        value=lambda z: coefficient * z * z,
        gradient=lambda z: 2.0 * coefficient * z,
        modulus=2.0 * coefficient,
        label=label,
    )


# ---------------------------------------------------------------------------
# states and configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PrimalState:
    """All primal decisions: DER injections (global) and generator outputs."""

    p: np.ndarray  # real DER injections, one entry per feeder node
    q: np.ndarray  # reactive DER injections
    P_M: np.ndarray  # generator outputs


@dataclass(frozen=True)
class DualState:
    """Balance price and per-feeder voltage-band multipliers.

    ``mu[k]`` stacks the upper-bound rows then the lower-bound rows, so it
    has twice the feeder's node count; it is componentwise nonnegative.
    """

    lam: float
    mu: tuple[np.ndarray, ...]

    def mu_upper(self, k: int) -> np.ndarray:
        return self.mu[k][: len(self.mu[k]) // 2]

    def mu_lower(self, k: int) -> np.ndarray:
        return self.mu[k][len(self.mu[k]) // 2 :]


@dataclass(frozen=True)
class SolverConfig:
    """Stepsize, regularization, stopping rules, and feedback source.

    The run stops once all three normalized residuals are below their
    tolerances: primal and dual step infinity-norms divided by the
    stepsize, and the absolute balance residual.
    """

    eps: float = 5e-4
    eta: float = 0.0
    max_iter: int = 20000
    tol_primal: float = 1e-6
    tol_dual: float = 1e-6
    tol_balance: float = 1e-6
    feedback: str = "linear"  # "linear" | "ac"
    zero_lambda_to_ders: bool = False  # baseline: hide the price from DERs
    divergence_limit: float = 1e6
    ac_tol: float = 1e-8
    ac_max_iter: int = 100
    record_state: bool = False  # keep the full (x, y) trajectory

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.eta < 0:
            raise ValueError(f"eta must be nonnegative, got {self.eta}")
        if self.max_iter < 0:
            raise ValueError(f"max_iter must be nonnegative, got {self.max_iter}")
        if self.feedback not in ("linear", "ac"):
            raise ValueError(f"unknown feedback mode {self.feedback!r}")


# ---------------------------------------------------------------------------
# the assembled problem
# ---------------------------------------------------------------------------

@dataclass
class DispatchProblem:
    """A coupled system compiled into flat arrays for the iteration.

    The box arrays are runtime state: scheduled events rescale DER boxes
    and zero out failed generators in place.  All vectors over feeder
    nodes use the coupled system's global node ordering.
    """

    system: CoupledSystem
    limits: VoltageLimits
    models: tuple[LinearFeederModel, ...]
    # generators
    gen_bus: np.ndarray  # bus id per generator
    gen_coef: np.ndarray  # quadratic cost coefficients
    gen_lo: np.ndarray
    gen_hi: np.ndarray
    online: np.ndarray  # bool per generator
    gen_costs: tuple[Cost, ...]
    # DERs, expanded over all feeder nodes (zeros where no DER)
    a_p: np.ndarray
    a_q: np.ndarray
    p_lo: np.ndarray
    p_hi: np.ndarray
    q_lo: np.ndarray
    q_hi: np.ndarray
    der_costs: tuple[Cost, ...] = field(default=())
    # base boxes, kept for reference (events scale the runtime copies)
    base_gen_lo: np.ndarray = field(default=None, repr=False)
    base_gen_hi: np.ndarray = field(default=None, repr=False)

    @property
    def n_nodes(self) -> int:
        return self.system.n_total

    @property
    def n_generators(self) -> int:
        return len(self.gen_coef)

    @property
    def registered_costs(self) -> tuple[Cost, ...]:
        return self.gen_costs + self.der_costs


def build_problem(system: CoupledSystem, limits: VoltageLimits) -> DispatchProblem:
    """Compile a coupled system into the flat-array problem form."""
    models = tuple(build_lindistflow(f) for f in system.feeders)
    N = system.n_total

    gens = system.transmission.generators
    gen_bus = np.array([g.bus_id for g in gens], dtype=int)
    gen_coef = np.array([g.cost_coefficient for g in gens])
    online = np.array([g.online for g in gens], dtype=bool)
    gen_lo = np.array([g.p_min if g.online else 0.0 for g in gens])
    gen_hi = np.array([g.p_max if g.online else 0.0 for g in gens])
    gen_costs = tuple(
        quadratic_cost(g.cost_coefficient, label=f"generator@{g.bus_id}")
        for g in gens
    )

    a_p = np.zeros(N)
    a_q = np.zeros(N)
    p_lo = np.zeros(N)
    p_hi = np.zeros(N)
    q_lo = np.zeros(N)
    q_hi = np.zeros(N)
    der_costs: list[Cost] = []
    for k, feeder in enumerate(system.feeders):
        index = feeder.node_index()
        seen: set[int] = set()
        for der in feeder.ders:
            if der.node_id in seen:
                raise CaseError(
                    f"feeder {feeder.feeder_id}: two DERs on node {der.node_id}",
                    element=f"der@{der.node_id}",
                )
            seen.add(der.node_id)
            g = system.global_index(k, index[der.node_id])
            a_p[g] = der.a_p
            a_q[g] = der.a_q
            p_lo[g], p_hi[g], q_lo[g], q_hi[g] = der.box()
            tag = f"der@{feeder.feeder_id}:{der.node_id}"
            der_costs.append(quadratic_cost(der.a_p, label=f"{tag}:p"))
            der_costs.append(quadratic_cost(der.a_q, label=f"{tag}:q"))

    return DispatchProblem(
        system=system,
        limits=limits,
        models=models,
        gen_bus=gen_bus,
        gen_coef=gen_coef,
        gen_lo=gen_lo,
        gen_hi=gen_hi,
        online=online,
        gen_costs=gen_costs,
        a_p=a_p,
        a_q=a_q,
        p_lo=p_lo,
        p_hi=p_hi,
        q_lo=q_lo,
        q_hi=q_hi,
        der_costs=tuple(der_costs),
        base_gen_lo=gen_lo.copy(),
        base_gen_hi=gen_hi.copy(),
    )


def initial_state(
    problem: DispatchProblem,
    mode: str = "midbox",
    P_M: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[PrimalState, DualState]:
    """Starting point: generators per ``mode``, DERs at zero, duals at zero.

    Modes: ``midbox`` (box midpoint), ``setpoint`` (the case file's
    recorded outputs), ``random`` (uniform in the boxes, needs ``rng``).
    An explicit ``P_M`` overrides the mode.  Everything is projected into
    the current boxes.
    """
    gens = problem.system.transmission.generators
    if P_M is not None:
        P = np.clip(np.asarray(P_M, dtype=float), problem.gen_lo, problem.gen_hi)
    elif mode == "midbox":
        mid = 0.5 * (problem.gen_lo + problem.gen_hi)
        P = np.where(np.isfinite(mid), mid, 0.0)
        P = np.clip(P, problem.gen_lo, problem.gen_hi)
    elif mode == "setpoint":
        P = np.clip(
            np.array([g.setpoint_initial for g in gens]),
            problem.gen_lo,
            problem.gen_hi,
        )
    elif mode == "random":
        if rng is None:
            raise ValueError("mode='random' requires an rng")
        if not (
            np.all(np.isfinite(problem.gen_lo))
            and np.all(np.isfinite(problem.gen_hi))
        ):
            raise ValueError("mode='random' requires finite generator boxes")
        P = rng.uniform(problem.gen_lo, problem.gen_hi)
    else:
        raise ValueError(f"unknown init mode {mode!r}")

    N = problem.n_nodes
    p = np.clip(np.zeros(N), problem.p_lo, problem.p_hi)
    q = np.clip(np.zeros(N), problem.q_lo, problem.q_hi)
    x = PrimalState(p=p, q=q, P_M=P)
    y = DualState(
        lam=0.0,
        mu=tuple(np.zeros(2 * m.n_nodes) for m in problem.models),
    )
    return x, y


def project_box(value: float, lo: float, hi: float) -> float:
    """Clamp ``value`` into ``[lo, hi]``; idempotent and nonexpansive."""
    if lo > hi:
        raise ValueError(f"empty box: lo {lo} > hi {hi}")
    return min(max(value, lo), hi)


# ---------------------------------------------------------------------------
# network feedback
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Measurement:
    """Network response at one primal state: per-feeder voltages and draws.

    ``tag`` identifies the iteration the snapshot belongs to; the dual
    update refuses snapshots tagged with a different iteration.
    """

    v: tuple[np.ndarray, ...]
    P_L: np.ndarray
    tag: int | None
    source: str  # "linear" | "ac"
    ac_iterations: int = 0
    ac_residual: float = 0.0


def measure_feeders(
    feeders,
    models: tuple[LinearFeederModel, ...],
    p_list,
    q_list,
    feedback: str = "linear",
    warm: tuple[np.ndarray, ...] | None = None,
    tag: int | None = None,
    ac_tol: float = 1e-8,
    ac_max_iter: int = 100,
) -> Measurement:
    """Voltages and head draws for per-feeder injection vectors.

    ``linear`` evaluates the affine models; ``ac`` runs the exact sweep
    (optionally warm-started from ``warm`` voltage profiles).  Needs only
    the feeders' electrical data, so the market operator can call it.
    """
    v_list: list[np.ndarray] = []
    P_L = np.zeros(len(models))
    ac_iterations = 0
    ac_residual = 0.0
    for k, model in enumerate(models):
        p_k = p_list[k]
        q_k = q_list[k]
        if feedback == "linear":
            v = model.c + model.A @ p_k + model.B @ q_k
            P_L[k] = model.d + float(model.M @ p_k) + float(model.N @ q_k)
            v_list.append(v)
        elif feedback == "ac":
            res = sweep_feeder(
                feeders[k],
                p_k,
                q_k,
                tol=ac_tol,
                max_iter=ac_max_iter,
                v_init=None if warm is None else warm[k],
            )
            v_list.append(res.v)
            P_L[k] = res.P_L
            ac_iterations = max(ac_iterations, res.iterations)
            ac_residual = max(ac_residual, res.residual)
        else:
            raise ValueError(f"unknown feedback mode {feedback!r}")
    return Measurement(
        v=tuple(v_list),
        P_L=P_L,
        tag=tag,
        source=feedback,
        ac_iterations=ac_iterations,
        ac_residual=ac_residual,
    )


def measure(
    problem: DispatchProblem,
    x: PrimalState,
    feedback: str = "linear",
    warm: tuple[np.ndarray, ...] | None = None,
    tag: int | None = None,
    ac_tol: float = 1e-8,
    ac_max_iter: int = 100,
) -> Measurement:
    """Feeder voltages and head draws at the setpoints of ``x``."""
    system = problem.system
    slices = [system.feeder_slice(k) for k in range(len(system.feeders))]
    return measure_feeders(
        system.feeders,
        problem.models,
        [x.p[sl] for sl in slices],
        [x.q[sl] for sl in slices],
        feedback=feedback,
        warm=warm,
        tag=tag,
        ac_tol=ac_tol,
        ac_max_iter=ac_max_iter,
    )


# ---------------------------------------------------------------------------
# shared round pieces (used verbatim by the market engine)
# ---------------------------------------------------------------------------

def der_signals(
    models: tuple[LinearFeederModel, ...],
    y: DualState,
    zero_lambda: bool = False,
) -> tuple[tuple[np.ndarray, ...], tuple[np.ndarray, ...]]:
    """Per-feeder price vectors (alpha, beta) for the DER updates.

    ``alpha_k = -lambda M_k + A_k' (mu_upper - mu_lower)`` and likewise
    ``beta_k`` with ``N_k`` and ``B_k``.  With ``zero_lambda`` the
    balance price is hidden from the DERs (voltage terms remain) — the
    no-participation baseline.
    """
    lam = 0.0 if zero_lambda else y.lam
    alphas: list[np.ndarray] = []
    betas: list[np.ndarray] = []
    for k, model in enumerate(models):
        n = model.n_nodes
        w = y.mu[k][:n] - y.mu[k][n:]
        alphas.append(-lam * model.M + model.A.T @ w)
        betas.append(-lam * model.N + model.B.T @ w)
    return tuple(alphas), tuple(betas)


def dual_update(
    ts,
    limits: VoltageLimits,
    y: DualState,
    measurement: Measurement,
    P_M: np.ndarray,
    account: SlackAccount,
    eps: float,
    eta: float,
) -> tuple[DualState, float]:
    """Projected dual ascent step consuming a network measurement.

    Multipliers rise with the measured constraint violations; the price
    integrates the balance residual.  Returns the new duals and the
    residual that drove the price.
    """
    mu_new: list[np.ndarray] = []
    for k, v in enumerate(measurement.v):
        g = np.concatenate([v - limits.v_max, limits.v_min - v])
        mu = y.mu[k]
        mu_new.append(np.maximum(mu + eps * (g - eta * mu), 0.0))
    residual = slack_residual(account, ts, P_M, measurement.P_L)
    lam_new = y.lam + eps * (residual - eta * y.lam)
    return DualState(lam=lam_new, mu=tuple(mu_new)), residual


# ---------------------------------------------------------------------------
# Lagrangian and gradients
# ---------------------------------------------------------------------------

def _balance(problem: DispatchProblem, P_M, P_L, account: SlackAccount | None):
    ts = problem.system.transmission
    fixed = sum(b.p0 for b in ts.buses if b.id != ts.slack_bus_id)
    P0 = 0.0 if account is None else account.P0_slack
    return P0 - (float(np.sum(P_L)) - float(np.sum(P_M)) - fixed)


def total_cost(problem: DispatchProblem, x: PrimalState) -> float:
    """Generation cost plus DER cost at the given primal state."""
    return float(
        np.sum(problem.gen_coef * x.P_M * x.P_M)
        + np.sum(problem.a_p * x.p * x.p)
        + np.sum(problem.a_q * x.q * x.q)
    )


def eval_lagrangian(
    problem: DispatchProblem,
    x: PrimalState,
    y: DualState,
    account: SlackAccount | None = None,
    eta: float = 0.0,
) -> float:
    """The regularized Lagrangian, with the affine feeder model throughout."""
    value = total_cost(problem, x)
    limits = problem.limits
    P_L = np.zeros(len(problem.models))
    for k, model in enumerate(problem.models):
        sl = problem.system.feeder_slice(k)
        v = model.c + model.A @ x.p[sl] + model.B @ x.q[sl]
        n = model.n_nodes
        g = np.concatenate([v - limits.v_max, limits.v_min - v])
        value += float(y.mu[k] @ g)
        P_L[k] = model.d + float(model.M @ x.p[sl]) + float(model.N @ x.q[sl])
    value += y.lam * _balance(problem, x.P_M, P_L, account)
    if eta:
        mu_sq = sum(float(mu @ mu) for mu in y.mu)
        value -= 0.5 * eta * (y.lam * y.lam + mu_sq)
    return value


def grad_primal(
    problem: DispatchProblem, x: PrimalState, y: DualState
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Partial gradients of L in the primal blocks (p, q, P_M).

    Composed exactly as the decentralized agents compute them: private
    cost gradient plus the received price vector.
    """
    alphas, betas = der_signals(problem.models, y)
    alpha = np.concatenate(alphas) if alphas else np.zeros(0)
    beta = np.concatenate(betas) if betas else np.zeros(0)
    dp = 2.0 * problem.a_p * x.p + alpha
    dq = 2.0 * problem.a_q * x.q + beta
    dP = 2.0 * problem.gen_coef * x.P_M + y.lam
    return dp, dq, dP


def grad_dual(
    problem: DispatchProblem,
    x: PrimalState,
    y: DualState,
    account: SlackAccount | None = None,
    eta: float = 0.0,
    feedback: str = "linear",
    measurement: Measurement | None = None,
    iteration: int | None = None,
) -> tuple[float, tuple[np.ndarray, ...]]:
    """Partial gradients of L in (lambda, mu), from the chosen feedback.

    With ``feedback='ac'`` a fresh measurement must be supplied; one
    tagged with a different iteration raises :class:`StaleFeedbackError`.
    """
    if feedback == "ac":
        if measurement is None:
            raise StaleFeedbackError("ac feedback requires a measurement")
        if iteration is not None and measurement.tag != iteration:
            raise StaleFeedbackError(
                f"measurement tagged {measurement.tag}, expected {iteration}",
                iteration=iteration,
            )
    elif measurement is None:
        measurement = measure(problem, x, feedback="linear", tag=iteration)

    limits = problem.limits
    dmu: list[np.ndarray] = []
    for k, v in enumerate(measurement.v):
        g = np.concatenate([v - limits.v_max, limits.v_min - v])
        dmu.append(g - eta * y.mu[k])
    dlam = _balance(problem, x.P_M, measurement.P_L, account) - eta * y.lam
    return dlam, tuple(dmu)


# ---------------------------------------------------------------------------
# stepsize certificate
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StepsizeReport:
    """Strong-monotonicity modulus, operator norm bound, and stepsize bound.

    With ``eta == 0`` the modulus comes from the cost curvatures alone and
    the bound is advisory (the dual block is then merely monotone).
    """

    s: float
    l: float
    eps_bound: float


def check_stepsize(
    problem: DispatchProblem,
    eta: float,
    costs: tuple[Cost, ...] | None = None,
) -> StepsizeReport:
    """Bound the provably safe stepsize ``2 s / l**2``.

    ``s`` is the smallest strong-convexity modulus among the registered
    costs (and ``eta`` when positive); ``l`` is the spectral norm of the
    assembled primal-dual operator matrix, whose off-diagonal blocks are
    the (skew) couplings through the affine feeder model and the balance
    constraint.
    """
    registered = problem.registered_costs if costs is None else tuple(costs)
    if not registered:
        raise ValueError("no costs registered")
    moduli = []
    for cost in registered:
        if cost.modulus is None:
            raise ValueError(
                f"cost {cost.label or '<unnamed>'} has no strong-convexity "
                "modulus; supply one to certify a stepsize"
            )
        moduli.append(cost.modulus)
    s = min(moduli)
    if eta > 0:
        s = min(s, eta)

    N = problem.n_nodes
    G = problem.n_generators
    xdim = 2 * N + G
    ydim = 2 * N + 1
    H = np.diag(
        np.concatenate(
            [2.0 * problem.a_p, 2.0 * problem.a_q, 2.0 * problem.gen_coef]
        )
    )
    C = np.zeros((xdim, ydim))
    for k, model in enumerate(problem.models):
        sl = problem.system.feeder_slice(k)
        n = model.n_nodes
        off = 2 * problem.system.offsets[k]
        up = slice(off, off + n)
        lo = slice(off + n, off + 2 * n)
        C[sl, up] = model.A
        C[sl, lo] = -model.A
        q_rows = slice(N + sl.start, N + sl.stop)
        C[q_rows, up] = model.B
        C[q_rows, lo] = -model.B
        C[sl, -1] = -model.M
        C[q_rows, -1] = -model.N
    C[2 * N :, -1] = 1.0

    F = np.block([[H, C], [-C.T, eta * np.eye(ydim)]])
    l = float(np.linalg.norm(F, 2))
    eps_bound = 2.0 * s / (l * l) if l > 0 else math.inf
    return StepsizeReport(s=s, l=l, eps_bound=eps_bound)


# ---------------------------------------------------------------------------
# events
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GeneratorOutage:
    """Generator at ``bus_id`` trips at ``iteration``: output pinned to 0."""

    iteration: int
    bus_id: int


@dataclass(frozen=True)
class DerCapacityScale:
    """All DER boxes rescaled by ``factor`` at ``iteration``."""

    iteration: int
    factor: float

    def __post_init__(self):
        if self.factor <= 0:
            raise ValueError(f"scale factor must be positive, got {self.factor}")


def apply_event(problem: DispatchProblem, x: PrimalState, event) -> PrimalState:
    """Mutate the problem's runtime limits and re-project the state."""
    if isinstance(event, GeneratorOutage):
        hits = np.flatnonzero(problem.gen_bus == event.bus_id)
        if len(hits) == 0:
            raise EngineError(
                f"outage targets bus {event.bus_id}, which hosts no generator",
                iteration=event.iteration,
            )
        i = int(hits[0])
        problem.online[i] = False
        problem.gen_lo[i] = 0.0
        problem.gen_hi[i] = 0.0
        P = x.P_M.copy()
        P[i] = 0.0
        return replace(x, P_M=P)
    if isinstance(event, DerCapacityScale):
        problem.p_lo *= event.factor
        problem.p_hi *= event.factor
        problem.q_lo *= event.factor
        problem.q_hi *= event.factor
        return replace(
            x,
            p=np.clip(x.p, problem.p_lo, problem.p_hi),
            q=np.clip(x.q, problem.q_lo, problem.q_hi),
        )
    raise EngineError(f"unknown event type {type(event).__name__}")


# ---------------------------------------------------------------------------
# one round, and the full iteration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StepOutcome:
    """Everything produced by one primal-dual round."""

    x: PrimalState
    y: DualState
    measurement: Measurement
    balance_residual: float
    step_primal: float  # ||x' - x||_inf / eps
    step_dual: float  # ||y' - y||_inf / eps


def primal_dual_step(
    problem: DispatchProblem,
    x: PrimalState,
    y: DualState,
    account: SlackAccount,
    cfg: SolverConfig,
    iteration: int | None = None,
    warm: tuple[np.ndarray, ...] | None = None,
    signals: tuple[tuple[np.ndarray, ...], tuple[np.ndarray, ...]] | None = None,
) -> StepOutcome:
    """One synchronous round: primal moves, network response, dual moves.

    ``signals`` may carry the already-computed price vectors for the
    current duals (they are recomputed otherwise).
    """
    if signals is None:
        signals = der_signals(problem.models, y, cfg.zero_lambda_to_ders)
    alphas, betas = signals
    alpha = np.concatenate(alphas) if alphas else np.zeros(0)
    beta = np.concatenate(betas) if betas else np.zeros(0)
    eps = cfg.eps

    p_new = np.clip(
        x.p - eps * (2.0 * problem.a_p * x.p + alpha), problem.p_lo, problem.p_hi
    )
    q_new = np.clip(
        x.q - eps * (2.0 * problem.a_q * x.q + beta), problem.q_lo, problem.q_hi
    )
    P_new = np.clip(
        x.P_M - eps * (2.0 * problem.gen_coef * x.P_M + y.lam),
        problem.gen_lo,
        problem.gen_hi,
    )
    x_new = PrimalState(p=p_new, q=q_new, P_M=P_new)

    try:
        meas = measure(
            problem,
            x_new,
            feedback=cfg.feedback,
            warm=warm,
            tag=iteration,
            ac_tol=cfg.ac_tol,
            ac_max_iter=cfg.ac_max_iter,
        )
    except SweepDivergence as exc:
        raise EngineError(
            f"power flow failed at iteration {iteration}: {exc}",
            iteration=iteration,
        ) from exc

    y_new, residual = dual_update(
        problem.system.transmission,
        problem.limits,
        y,
        meas,
        P_new,
        account,
        eps,
        cfg.eta,
    )

    step_primal = max(
        _inf_diff(p_new, x.p), _inf_diff(q_new, x.q), _inf_diff(P_new, x.P_M)
    ) / eps
    step_dual = abs(y_new.lam - y.lam)
    for k in range(len(y.mu)):
        step_dual = max(step_dual, _inf_diff(y_new.mu[k], y.mu[k]))
    step_dual /= eps

    return StepOutcome(
        x=x_new,
        y=y_new,
        measurement=meas,
        balance_residual=residual,
        step_primal=step_primal,
        step_dual=step_dual,
    )


def _inf_diff(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b))) if len(a) else 0.0


# ---------------------------------------------------------------------------
# trace plumbing shared by both engines
# ---------------------------------------------------------------------------

def default_probes(problem: DispatchProblem) -> tuple[int, ...]:
    """One probe node per feeder: the node of largest path impedance."""
    probes = []
    for feeder in problem.system.feeders:
        topo = feeder_topology(feeder)
        depth = [0.0] * feeder.n_nodes
        best, best_depth = 0, -1.0
        for j in topo.order:
            parent_depth = depth[topo.parent[j]] if topo.parent[j] >= 0 else 0.0
            depth[j] = parent_depth + math.hypot(topo.r[j], topo.x[j])
            if depth[j] > best_depth:
                best, best_depth = j, depth[j]
        probes.append(best)
    return tuple(probes)


def iteration_record(
    problem: DispatchProblem,
    iteration: int,
    x: PrimalState,
    y: DualState,
    measurement: Measurement,
    balance_residual: float,
    signals: tuple[tuple[np.ndarray, ...], tuple[np.ndarray, ...]],
    probes: tuple[int, ...],
    step_primal: float | None,
    step_dual: float | None,
) -> TraceRecord:
    """Assemble the per-iteration diagnostics row."""
    alphas, betas = signals
    return TraceRecord(
        iteration=iteration,
        lam=y.lam,
        P_M=tuple(float(v) for v in x.P_M),
        P_L=tuple(float(v) for v in measurement.P_L),
        v_min=tuple(float(np.min(v)) for v in measurement.v),
        v_max=tuple(float(np.max(v)) for v in measurement.v),
        slack_residual=balance_residual,
        total_cost=total_cost(problem, x),
        alpha_probe=tuple(float(alphas[k][j]) for k, j in enumerate(probes)),
        beta_probe=tuple(float(betas[k][j]) for k, j in enumerate(probes)),
        step_primal=step_primal,
        step_dual=step_dual,
    )


# ---------------------------------------------------------------------------
# the solver
# ---------------------------------------------------------------------------

@dataclass
class SolveResult:
    """Final states, per-iteration records, and the stopping status."""

    status: str  # "converged" | "not-converged"
    iterations: int  # steps actually executed
    x: PrimalState
    y: DualState
    records: list[TraceRecord]
    account: SlackAccount
    history: list[tuple[PrimalState, DualState]] | None = None

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def solve(
    problem: DispatchProblem,
    cfg: SolverConfig,
    x0: PrimalState | None = None,
    y0: DualState | None = None,
    account: SlackAccount | None = None,
    events: tuple = (),
    probes: tuple[int, ...] | None = None,
) -> SolveResult:
    """Iterate rounds until the tolerances are met or ``max_iter`` runs out.

    Events fire just before the step of their scheduled iteration, so the
    record of that iteration already shows their effect.  Without an
    explicit slack account, the implied slack output at the start is
    recorded and held as the balance target.  Raises
    :class:`DivergenceError` when the state passes the blow-up bound.
    """
    if x0 is None or y0 is None:
        x_init, y_init = initial_state(problem)
        x = x_init if x0 is None else x0
        y = y_init if y0 is None else y0
    else:
        x, y = x0, y0
    if probes is None:
        probes = default_probes(problem)

    report = check_stepsize(problem, cfg.eta) if problem.registered_costs else None
    if report is not None and cfg.eps > report.eps_bound:
        level = logging.WARNING if cfg.eta > 0 else logging.INFO
        logger.log(
            level,
            "stepsize %.3g exceeds the certified bound %.3g (s=%.3g, l=%.3g)%s",
            cfg.eps,
            report.eps_bound,
            report.s,
            report.l,
            "" if cfg.eta > 0 else " — advisory only at eta=0",
        )

    meas = measure(
        problem,
        x,
        feedback=cfg.feedback,
        tag=0,
        ac_tol=cfg.ac_tol,
        ac_max_iter=cfg.ac_max_iter,
    )
    ts = problem.system.transmission
    if account is None:
        account = record_slack(ts, x.P_M, meas.P_L)
    residual = slack_residual(account, ts, x.P_M, meas.P_L)
    signals = der_signals(problem.models, y, cfg.zero_lambda_to_ders)

    records = [
        iteration_record(
            problem, 0, x, y, meas, residual, signals, probes, None, None
        )
    ]
    history = [(x, y)] if cfg.record_state else None
    warm = meas.v

    status = "not-converged"
    executed = 0
    for t in range(1, cfg.max_iter + 1):
        for event in events:
            if event.iteration == t:
                x = apply_event(problem, x, event)
        outcome = primal_dual_step(
            problem, x, y, account, cfg, iteration=t, warm=warm, signals=signals
        )
        x, y = outcome.x, outcome.y
        warm = outcome.measurement.v
        executed = t

        bound = cfg.divergence_limit
        worst = max(
            _inf_norm(x.p), _inf_norm(x.q), _inf_norm(x.P_M), abs(y.lam)
        )
        if not math.isfinite(worst) or worst > bound:
            raise DivergenceError(
                f"state norm {worst:.3g} exceeded the blow-up bound {bound:.3g} "
                f"at iteration {t}; reduce the stepsize",
                iteration=t,
            )

        signals = der_signals(problem.models, y, cfg.zero_lambda_to_ders)
        records.append(
            iteration_record(
                problem,
                t,
                x,
                y,
                outcome.measurement,
                outcome.balance_residual,
                signals,
                probes,
                outcome.step_primal,
                outcome.step_dual,
            )
        )
        if history is not None:
            history.append((x, y))

        # never stop while scheduled events are still ahead: the run must
        # reach and absorb every perturbation before it can count as done
        if (
            outcome.step_primal < cfg.tol_primal
            and outcome.step_dual < cfg.tol_dual
            and abs(outcome.balance_residual) < cfg.tol_balance
            and all(event.iteration <= t for event in events)
        ):
            status = "converged"
            break

    return SolveResult(
        status=status,
        iterations=executed,
        x=x,
        y=y,
        records=records,
        account=account,
        history=history,
    )


def _inf_norm(a: np.ndarray) -> float:
    return float(np.max(np.abs(a))) if len(a) else 0.0
