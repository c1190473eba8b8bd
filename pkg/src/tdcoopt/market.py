"""Decentralized market engine: the same dispatch via price signals.

Three agent roles exchange messages over an in-process bus.  Each round:
DER users and generators take one projected step on their own private
objectives using the last broadcast prices (the user objective is the
private cost plus ``alpha p + beta q``); the operator collects the
reported setpoints, measures the network response, performs the dual
update, and broadcasts fresh incentive signals.  No private cost or
capacity data ever reaches the operator — it works from setpoint reports,
the feeder electrical models, and the transmission data alone (its feeder
records carry no DER entries at all).

In gradient mode the produced trajectory coincides with the centralized
engine's, coordinate for coordinate: both engines call the same shared
update arithmetic in the same order.  Best-response mode instead lets
users jump straight to their box-clamped optimum against the current
prices (a dual-ascent variant, quadratic costs only).

Rounds are strictly synchronous: one broadcast, one report per agent, one
power-flow result per feeder, one dual update.  A missing, duplicated, or
stale message — including any injected bus fault — aborts the round.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Callable

import numpy as np

from .acpf import SlackAccount, record_slack, slack_residual
from .core import (
    DivergenceError,
    DualState,
    EngineError,
    Measurement,
    PrimalState,
    SolveResult,
    SolverConfig,
    build_problem,
    default_probes,
    der_signals,
    dual_update,
    initial_state,
    iteration_record,
    measure_feeders,
    project_box,
)
from .network import (
    CoupledSystem,
    Der,
    DistributionFeeder,
    Generator,
    TransmissionSystem,
    VoltageLimits,
)

__all__ = [
    "RoundAbort",
    "IncentiveSignals",
    "AgentMessage",
    "MessageBus",
    "user_step",
    "user_best_response",
    "generator_step",
    "UserAgent",
    "GeneratorAgent",
    "OperatorConfig",
    "OperatorOutcome",
    "operator_step",
    "run_market",
]


class RoundAbort(RuntimeError):
    """The synchronous round contract was violated (missing/stale message)."""


# ---------------------------------------------------------------------------
# messages
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IncentiveSignals:
    """Broadcast prices: per-feeder (alpha, beta) vectors plus the balance
    price for generators, all tagged with the round they were computed in."""

    alpha: tuple[np.ndarray, ...]
    beta: tuple[np.ndarray, ...]
    lambda_broadcast: float
    iteration_tag: int


@dataclass(frozen=True)
class AgentMessage:
    """One bus message: kind, sender, round tag, and a payload dict."""

    kind: str  # signal-broadcast | setpoint-report | pf-result | dual-update
    sender: str
    iteration_tag: int
    payload: Any

    def to_jsonable(self) -> dict:
        return {
            "kind": self.kind,
            "sender": self.sender,
            "iteration_tag": self.iteration_tag,
            "payload": _jsonable(self.payload),
        }


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return [float(v) for v in value]
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, IncentiveSignals):
        return {
            "alpha": [_jsonable(a) for a in value.alpha],
            "beta": [_jsonable(b) for b in value.beta],
            "lambda": value.lambda_broadcast,
            "iteration_tag": value.iteration_tag,
        }
    return value


@dataclass
class MessageBus:
    """In-process bus with deterministic delivery order.

    ``drop`` is a fault-injection hook: messages it matches are silently
    discarded, which the synchronous round logic then surfaces as a
    :class:`RoundAbort`.  With ``record`` set, every delivered message is
    kept in ``journal`` for debugging (JSON-dumpable).
    """

    drop: Callable[[AgentMessage], bool] | None = None
    record: bool = False
    journal: list[AgentMessage] = field(default_factory=list)
    _queues: dict = field(default_factory=dict)

    def publish(self, message: AgentMessage) -> bool:
        if self.drop is not None and self.drop(message):
            return False
        self._queues.setdefault((message.kind, message.iteration_tag), []).append(
            message
        )
        if self.record:
            self.journal.append(message)
        return True

    def collect(self, kind: str, tag: int) -> list[AgentMessage]:
        return list(self._queues.get((kind, tag), []))

    def counts(self, tag: int) -> dict[str, int]:
        return {
            kind: len(msgs)
            for (kind, t), msgs in self._queues.items()
            if t == tag
        }


# ---------------------------------------------------------------------------
# agent update rules (pure)
# ---------------------------------------------------------------------------

def user_step(
    state: tuple[float, float],
    signals: tuple[float, float],
    der: Der,
    eps: float,
) -> tuple[float, float]:
    """One projected gradient step on the user's own objective.

    Uses only the user's private cost data and the received prices.
    """
    p, q = state
    alpha, beta = signals
    p_lo, p_hi, q_lo, q_hi = der.box()
    p_new = project_box(p - eps * (2.0 * der.a_p * p + alpha), p_lo, p_hi)
    q_new = project_box(q - eps * (2.0 * der.a_q * q + beta), q_lo, q_hi)
    return p_new, q_new


def user_best_response(
    signals: tuple[float, float], der: Der
) -> tuple[float, float]:
    """Box-clamped exact minimizer of the user objective (quadratic cost)."""
    alpha, beta = signals
    p_lo, p_hi, q_lo, q_hi = der.box()
    p_star = project_box(-alpha / (2.0 * der.a_p), p_lo, p_hi)
    q_star = project_box(-beta / (2.0 * der.a_q), q_lo, q_hi)
    return p_star, q_star


def generator_step(P_M: float, lam: float, gen: Generator, eps: float) -> float:
    """One projected gradient step for a dispatchable generator.

    An offline generator holds zero output regardless of the price.
    """
    if not gen.online:
        return 0.0
    return project_box(
        P_M - eps * (2.0 * gen.cost_coefficient * P_M + lam),
        gen.p_min,
        gen.p_max,
    )


# ---------------------------------------------------------------------------
# agents
# ---------------------------------------------------------------------------

@dataclass
class UserAgent:
    """A DER owner: private cost and limits, plus the current setpoint."""

    name: str
    feeder_pos: int
    node_pos: int
    der: Der
    p: float = 0.0
    q: float = 0.0

    def step(self, signals: IncentiveSignals, eps: float, mode: str) -> None:
        alpha = float(signals.alpha[self.feeder_pos][self.node_pos])
        beta = float(signals.beta[self.feeder_pos][self.node_pos])
        if mode == "gradient":
            self.p, self.q = user_step(
                (self.p, self.q), (alpha, beta), self.der, eps
            )
        elif mode == "best-response":
            self.p, self.q = user_best_response((alpha, beta), self.der)
        else:
            raise ValueError(f"unknown market mode {mode!r}")

    def report(self, tag: int) -> AgentMessage:
        return AgentMessage(
            kind="setpoint-report",
            sender=self.name,
            iteration_tag=tag,
            payload={
                "feeder": self.feeder_pos,
                "node": self.node_pos,
                "p": self.p,
                "q": self.q,
            },
        )

    def scale_capacity(self, factor: float) -> None:
        self.der = replace(
            self.der, capacity_scale=self.der.capacity_scale * factor
        )
        p_lo, p_hi, q_lo, q_hi = self.der.box()
        self.p = project_box(self.p, p_lo, p_hi)
        self.q = project_box(self.q, q_lo, q_hi)

    def cost_value(self) -> float:
        return self.der.a_p * self.p * self.p + self.der.a_q * self.q * self.q


@dataclass
class GeneratorAgent:
    """A dispatchable generator: cost, box, online flag, current output."""

    name: str
    index: int
    gen: Generator
    P: float = 0.0

    def step(self, signals: IncentiveSignals, eps: float) -> None:
        self.P = generator_step(self.P, signals.lambda_broadcast, self.gen, eps)

    def report(self, tag: int) -> AgentMessage:
        return AgentMessage(
            kind="setpoint-report",
            sender=self.name,
            iteration_tag=tag,
            payload={"generator": self.index, "P": self.P},
        )

    def trip(self) -> None:
        self.gen = replace(self.gen, online=False)
        self.P = 0.0


# ---------------------------------------------------------------------------
# operator
# ---------------------------------------------------------------------------

@dataclass
class OperatorConfig:
    """Everything the operator is allowed to know.

    The feeder records here must carry no DER entries (strip them with
    ``dataclasses.replace(feeder, ders=())``); the operator sees topology,
    impedances, and base loads, never user costs or limits.
    """

    ts: TransmissionSystem
    limits: VoltageLimits
    feeders: tuple[DistributionFeeder, ...]
    expected_reports: tuple[str, ...]
    eps: float
    eta: float
    feedback: str = "linear"
    zero_lambda_to_ders: bool = False
    ac_tol: float = 1e-8
    ac_max_iter: int = 100

    def __post_init__(self):
        for feeder in self.feeders:
            if feeder.ders:
                raise ValueError(
                    f"operator feeder record {feeder.feeder_id} still "
                    "carries DER data; strip it first"
                )


@dataclass(frozen=True)
class OperatorOutcome:
    """Dual update plus fresh signals, with the measurement they rest on."""

    y: DualState
    signals: IncentiveSignals
    measurement: Measurement
    balance_residual: float
    P_M: np.ndarray
    p_list: tuple[np.ndarray, ...]
    q_list: tuple[np.ndarray, ...]


def operator_step(
    reports: list[AgentMessage],
    pf_results: Measurement | None,
    y: DualState,
    models,
    cfg: OperatorConfig,
    account: SlackAccount,
    tag: int,
    warm: tuple[np.ndarray, ...] | None = None,
) -> OperatorOutcome:
    """Validate the round, measure the network, update duals, price anew.

    ``pf_results`` may carry an externally produced measurement for this
    round; by default the operator runs the power flow itself.  Any
    missing, duplicated, or stale report aborts the round.
    """
    seen: dict[str, AgentMessage] = {}
    for msg in reports:
        if msg.iteration_tag != tag:
            raise RoundAbort(
                f"stale report from {msg.sender}: tag {msg.iteration_tag}, "
                f"round {tag}"
            )
        if msg.sender in seen:
            raise RoundAbort(f"duplicate report from {msg.sender} in round {tag}")
        seen[msg.sender] = msg
    missing = [s for s in cfg.expected_reports if s not in seen]
    if missing:
        raise RoundAbort(
            f"round {tag} missing reports from: {', '.join(missing)}"
        )

    p_list = [np.zeros(m.n_nodes) for m in models]
    q_list = [np.zeros(m.n_nodes) for m in models]
    P_M = np.zeros(len(cfg.ts.generators))
    for msg in seen.values():
        pay = msg.payload
        if "generator" in pay:
            P_M[pay["generator"]] = pay["P"]
        else:
            p_list[pay["feeder"]][pay["node"]] = pay["p"]
            q_list[pay["feeder"]][pay["node"]] = pay["q"]

    if pf_results is not None:
        if pf_results.tag != tag:
            raise RoundAbort(
                f"stale power-flow result: tag {pf_results.tag}, round {tag}"
            )
        meas = pf_results
    else:
        meas = measure_feeders(
            cfg.feeders,
            models,
            p_list,
            q_list,
            feedback=cfg.feedback,
            warm=warm,
            tag=tag,
            ac_tol=cfg.ac_tol,
            ac_max_iter=cfg.ac_max_iter,
        )

    y_new, residual = dual_update(
        cfg.ts, cfg.limits, y, meas, P_M, account, cfg.eps, cfg.eta
    )
    alphas, betas = der_signals(models, y_new, cfg.zero_lambda_to_ders)
    signals = IncentiveSignals(
        alpha=alphas, beta=betas, lambda_broadcast=y_new.lam, iteration_tag=tag
    )
    return OperatorOutcome(
        y=y_new,
        signals=signals,
        measurement=meas,
        balance_residual=residual,
        P_M=P_M,
        p_list=tuple(p_list),
        q_list=tuple(q_list),
    )


# ---------------------------------------------------------------------------
# the market loop
# ---------------------------------------------------------------------------

def run_market(
    system: CoupledSystem,
    limits: VoltageLimits,
    cfg: SolverConfig,
    events: tuple = (),
    mode: str = "gradient",
    x0: PrimalState | None = None,
    y0: DualState | None = None,
    account: SlackAccount | None = None,
    probes: tuple[int, ...] | None = None,
    bus: MessageBus | None = None,
) -> SolveResult:
    """Run synchronous market rounds until the stopping rule fires.

    In ``gradient`` mode the trajectory equals the centralized engine's.
    ``x0`` seeds the agents (its ``p``/``q`` entries at nodes without a
    DER are ignored; agents exist only where DERs do).
    """
    if mode not in ("gradient", "best-response"):
        raise ValueError(f"unknown market mode {mode!r}")
    problem = build_problem(system, limits)  # diagnostics mirror only
    models = problem.models
    if probes is None:
        probes = default_probes(problem)
    if bus is None:
        bus = MessageBus()
    ts = system.transmission

    if x0 is None or y0 is None:
        x_init, y_init = initial_state(problem)
        x0 = x_init if x0 is None else x0
        y0 = y_init if y0 is None else y0

    users: list[UserAgent] = []
    for k, feeder in enumerate(system.feeders):
        index = feeder.node_index()
        for der in feeder.ders:
            j = index[der.node_id]
            g = system.global_index(k, j)
            users.append(
                UserAgent(
                    name=f"user:{feeder.feeder_id}:{der.node_id}",
                    feeder_pos=k,
                    node_pos=j,
                    der=der,
                    p=float(x0.p[g]),
                    q=float(x0.q[g]),
                )
            )
    generators = [
        GeneratorAgent(
            name=f"generator:{gen.bus_id}", index=i, gen=gen,
            P=0.0 if not gen.online else float(x0.P_M[i]),
        )
        for i, gen in enumerate(ts.generators)
    ]
    agents = users + generators

    op_cfg = OperatorConfig(
        ts=ts,
        limits=limits,
        feeders=tuple(replace(f, ders=()) for f in system.feeders),
        expected_reports=tuple(a.name for a in agents),
        eps=cfg.eps,
        eta=cfg.eta,
        feedback=cfg.feedback,
        zero_lambda_to_ders=cfg.zero_lambda_to_ders,
        ac_tol=cfg.ac_tol,
        ac_max_iter=cfg.ac_max_iter,
    )

    y = y0
    p_list0 = [np.zeros(m.n_nodes) for m in models]
    q_list0 = [np.zeros(m.n_nodes) for m in models]
    for u in users:
        p_list0[u.feeder_pos][u.node_pos] = u.p
        q_list0[u.feeder_pos][u.node_pos] = u.q
    P0 = np.array([g.P for g in generators])
    meas = measure_feeders(
        op_cfg.feeders,
        models,
        p_list0,
        q_list0,
        feedback=cfg.feedback,
        tag=0,
        ac_tol=cfg.ac_tol,
        ac_max_iter=cfg.ac_max_iter,
    )
    if account is None:
        account = record_slack(ts, P0, meas.P_L)
    residual = slack_residual(account, ts, P0, meas.P_L)

    alphas, betas = der_signals(models, y, cfg.zero_lambda_to_ders)
    signals = IncentiveSignals(
        alpha=alphas, beta=betas, lambda_broadcast=y.lam, iteration_tag=0
    )
    bus.publish(
        AgentMessage("signal-broadcast", "operator", 0, signals)
    )

    x = _assemble(p_list0, q_list0, P0)
    records = [
        iteration_record(
            problem, 0, x, y, meas, residual, (alphas, betas), probes, None, None
        )
    ]
    history = [(x, y)] if cfg.record_state else None
    warm = meas.v

    status = "not-converged"
    executed = 0
    for t in range(1, cfg.max_iter + 1):
        for event in events:
            if event.iteration == t:
                _apply_market_event(users, generators, event)

        for u in users:
            u.step(signals, cfg.eps, mode)
            bus.publish(u.report(t))
        for g in generators:
            g.step(signals, cfg.eps)
            bus.publish(g.report(t))

        reports = bus.collect("setpoint-report", t)
        outcome = operator_step(
            reports, None, y, models, op_cfg, account, tag=t, warm=warm
        )
        for k, v in enumerate(outcome.measurement.v):
            bus.publish(
                AgentMessage(
                    "pf-result",
                    "operator",
                    t,
                    {
                        "feeder": k,
                        "v": v,
                        "P_L": float(outcome.measurement.P_L[k]),
                    },
                )
            )
        bus.publish(
            AgentMessage(
                "dual-update",
                "operator",
                t,
                {"lambda": outcome.y.lam, "residual": outcome.balance_residual},
            )
        )
        bus.publish(AgentMessage("signal-broadcast", "operator", t, outcome.signals))

        x_new = _assemble(outcome.p_list, outcome.q_list, outcome.P_M)
        eps = cfg.eps
        step_primal = max(
            _inf_diff(x_new.p, x.p),
            _inf_diff(x_new.q, x.q),
            _inf_diff(x_new.P_M, x.P_M),
        ) / eps
        step_dual = abs(outcome.y.lam - y.lam)
        for k in range(len(y.mu)):
            step_dual = max(step_dual, _inf_diff(outcome.y.mu[k], y.mu[k]))
        step_dual /= eps

        x, y = x_new, outcome.y
        warm = outcome.measurement.v
        signals = outcome.signals
        executed = t

        worst = max(
            _inf_norm(x.p), _inf_norm(x.q), _inf_norm(x.P_M), abs(y.lam)
        )
        if not np.isfinite(worst) or worst > cfg.divergence_limit:
            raise DivergenceError(
                f"state norm {worst:.3g} exceeded the blow-up bound "
                f"{cfg.divergence_limit:.3g} at round {t}; reduce the stepsize",
                iteration=t,
            )

        records.append(
            iteration_record(
                problem,
                t,
                x,
                y,
                outcome.measurement,
                outcome.balance_residual,
                (signals.alpha, signals.beta),
                probes,
                step_primal,
                step_dual,
            )
        )
        if history is not None:
            history.append((x, y))

        # same guard as the monolithic loop: pending events veto stopping
        if (
            step_primal < cfg.tol_primal
            and step_dual < cfg.tol_dual
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


def _assemble(p_list, q_list, P_M: np.ndarray) -> PrimalState:
    p = np.concatenate(p_list) if len(p_list) else np.zeros(0)
    q = np.concatenate(q_list) if len(q_list) else np.zeros(0)
    return PrimalState(p=p.copy(), q=q.copy(), P_M=np.asarray(P_M, dtype=float).copy())


def _apply_market_event(users, generators, event) -> None:
    from .core import DerCapacityScale, GeneratorOutage

    if isinstance(event, GeneratorOutage):
        hits = [g for g in generators if g.gen.bus_id == event.bus_id]
        if not hits:
            raise EngineError(
                f"outage targets bus {event.bus_id}, which hosts no generator",
                iteration=event.iteration,
            )
        hits[0].trip()
    elif isinstance(event, DerCapacityScale):
        for u in users:
            u.scale_capacity(event.factor)
    else:
        raise EngineError(f"unknown event type {type(event).__name__}")


def _inf_diff(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b))) if len(a) else 0.0


def _inf_norm(a: np.ndarray) -> float:
    return float(np.max(np.abs(a))) if len(a) else 0.0
