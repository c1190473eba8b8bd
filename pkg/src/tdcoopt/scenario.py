"""Scenario loading, execution, comparison, and the brute-force oracle.

A scenario JSON bundles everything one experiment needs: the transmission
case, feeder cases with their host buses, voltage limits, solver
configuration, engine choice, scheduled events, and initial-state
options.  Running one produces a per-iteration CSV trace and a JSON
summary (final dispatch, final voltages, active constraint sets, and the
converged price of each phase between events).

``compare_runs`` diffs two traces over a shared horizon — used to price
DER participation against the baseline run that hides the balance price
from users.  ``probe_oracle`` solves small instances (at most four free
decision variables) by nested grid refinement over the affine feeder
model and reports the gap to the engine's converged point.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .acpf import SlackAccount
from .core import (
    DerCapacityScale,
    DispatchProblem,
    DualState,
    GeneratorOutage,
    PrimalState,
    SolveResult,
    SolverConfig,
    build_problem,
    default_probes,
    initial_state,
    solve,
    total_cost,
)
from .market import run_market
from .network import (
    CaseError,
    CoupledSystem,
    DistributionFeeder,
    TransmissionSystem,
    VoltageLimits,
    attach_feeders,
    parse_case,
)
from .trace import TraceRecord, read_trace, write_trace

__all__ = [
    "ScenarioError",
    "ScenarioEvent",
    "Scenario",
    "load_scenario",
    "RunArtifacts",
    "run_scenario",
    "ComparisonReport",
    "compare_runs",
    "OracleInfeasible",
    "OracleReport",
    "probe_oracle",
]

ENGINES = ("core", "market", "market-br")
EVENT_KINDS = ("generator-outage", "der-capacity-scale")


class ScenarioError(ValueError):
    """Scenario file invalid or inconsistent."""


@dataclass(frozen=True)
class ScenarioEvent:
    """A timed perturbation: a generator trip or a DER capacity rescale."""

    iteration: int
    kind: str
    target: int | str
    factor: float | None = None

    def to_engine_event(self):
        if self.kind == "generator-outage":
            return GeneratorOutage(iteration=self.iteration, bus_id=int(self.target))
        return DerCapacityScale(iteration=self.iteration, factor=float(self.factor))


@dataclass(frozen=True)
class Scenario:
    """A fully resolved experiment: system, limits, config, events, init."""

    name: str
    system: CoupledSystem
    limits: VoltageLimits
    config: SolverConfig
    engine: str
    events: tuple[ScenarioEvent, ...]
    init_mode: str = "midbox"
    init_P_M: tuple[float, ...] | None = None
    slack_mode: str = "record"  # "record" | "explicit"
    slack_value: float = 0.0
    probes: dict[str, int] | None = None  # feeder id -> probe node id
    seed: int | None = None
    path: Path | None = None


def _require(raw: dict, key: str, where: str):
    if key not in raw:
        raise ScenarioError(f"{where}: missing field {key!r}")
    return raw[key]


def load_scenario(path, overrides: dict | None = None) -> Scenario:
    """Read and validate a scenario file; case paths resolve relative to it.

    ``overrides`` (engine, feedback, max_iter, eps, eta, seed) are applied
    before validation, so command-line flags are checked like file fields.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ScenarioError(
            f"{path}: syntax error at line {exc.lineno}, column {exc.colno}: "
            f"{exc.msg}"
        ) from exc
    if not isinstance(raw, dict):
        raise ScenarioError(f"{path}: scenario must be a JSON object")
    overrides = dict(overrides or {})

    name = raw.get("name", path.stem)
    base = path.parent

    ts_path = base / _require(raw, "transmission", name)
    ts = _load_case(ts_path, TransmissionSystem)

    feeders: list[DistributionFeeder] = []
    hosts: list[int] = []
    for i, entry in enumerate(raw.get("feeders", [])):
        case_path = base / _require(entry, "case", f"{name}: feeders[{i}]")
        feeder = _load_case(case_path, DistributionFeeder)
        host = int(_require(entry, "host_bus", f"{name}: feeders[{i}]"))
        feeders.append(replace(feeder, host_bus_id=host))
        hosts.append(host)
    try:
        system = attach_feeders(ts, feeders)
    except CaseError as exc:
        raise ScenarioError(f"{name}: {exc}") from exc

    lim = raw.get("limits", {})
    limits = VoltageLimits(
        v_min=float(lim.get("v_min", 0.95)), v_max=float(lim.get("v_max", 1.05))
    )

    cfg_raw = dict(raw.get("config", {}))
    cfg_raw.setdefault("feedback", raw.get("feedback", "linear"))
    for key in ("max_iter", "eps", "eta"):
        if overrides.get(key) is not None:
            cfg_raw[key] = overrides[key]
    if overrides.get("feedback") is not None:
        cfg_raw["feedback"] = overrides["feedback"]
    known = {
        "eps", "eta", "max_iter", "tol_primal", "tol_dual", "tol_balance",
        "feedback", "zero_lambda_to_ders", "divergence_limit", "ac_tol",
        "ac_max_iter", "record_state",
    }
    unknown = set(cfg_raw) - known
    if unknown:
        raise ScenarioError(f"{name}: unknown config fields {sorted(unknown)}")
    try:
        config = SolverConfig(**cfg_raw)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"{name}: bad config: {exc}") from exc

    engine = overrides.get("engine") or raw.get("engine", "core")
    if engine not in ENGINES:
        raise ScenarioError(f"{name}: unknown engine {engine!r}")

    events: list[ScenarioEvent] = []
    for i, entry in enumerate(raw.get("events", [])):
        where = f"{name}: events[{i}]"
        kind = _require(entry, "kind", where)
        if kind not in EVENT_KINDS:
            raise ScenarioError(f"{where}: unknown kind {kind!r}")
        iteration = int(_require(entry, "iteration", where))
        if not 1 <= iteration < config.max_iter:
            raise ScenarioError(
                f"{where}: iteration {iteration} outside [1, max_iter)"
            )
        target = _require(entry, "target", where)
        factor = entry.get("factor")
        if kind == "generator-outage":
            target = int(target)
            if not any(g.bus_id == target for g in ts.generators):
                raise ScenarioError(f"{where}: no generator at bus {target}")
        else:
            if target != "all-DERs":
                raise ScenarioError(
                    f"{where}: der-capacity-scale target must be 'all-DERs'"
                )
            if factor is None or float(factor) <= 0:
                raise ScenarioError(f"{where}: needs a positive factor")
            factor = float(factor)
        events.append(
            ScenarioEvent(iteration=iteration, kind=kind, target=target, factor=factor)
        )

    init = raw.get("init", {})
    init_mode = init.get("mode", "midbox")
    if init_mode not in ("midbox", "setpoint", "random"):
        raise ScenarioError(f"{name}: unknown init mode {init_mode!r}")
    init_P_M = init.get("P_M")
    if init_P_M is not None:
        init_P_M = tuple(float(v) for v in init_P_M)
        if len(init_P_M) != len(ts.generators):
            raise ScenarioError(
                f"{name}: init.P_M has {len(init_P_M)} entries, "
                f"system has {len(ts.generators)} generators"
            )

    slack = raw.get("slack", {})
    slack_mode = slack.get("mode", "record")
    if slack_mode not in ("record", "explicit"):
        raise ScenarioError(f"{name}: unknown slack mode {slack_mode!r}")
    slack_value = float(slack.get("value", 0.0))

    probes = raw.get("probes")
    if probes is not None:
        probes = {str(k): int(v) for k, v in probes.items()}
        ids = {f.feeder_id: f for f in system.feeders}
        for fid, node in probes.items():
            if fid not in ids:
                raise ScenarioError(f"{name}: probes name unknown feeder {fid!r}")
            if node not in ids[fid].node_index():
                raise ScenarioError(
                    f"{name}: probe node {node} not in feeder {fid}"
                )

    seed = overrides.get("seed", raw.get("seed"))
    if init_mode == "random" and seed is None:
        raise ScenarioError(f"{name}: init mode 'random' requires a seed")

    return Scenario(
        name=str(name),
        system=system,
        limits=limits,
        config=config,
        engine=engine,
        events=tuple(events),
        init_mode=init_mode,
        init_P_M=init_P_M,
        slack_mode=slack_mode,
        slack_value=slack_value,
        probes=probes,
        seed=None if seed is None else int(seed),
        path=path,
    )


def _load_case(path: Path, expect_type):
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read case {path}: {exc}") from exc
    try:
        model = parse_case(text)
    except CaseError as exc:
        raise ScenarioError(f"{path}: {exc}") from exc
    if not isinstance(model, expect_type):
        raise ScenarioError(
            f"{path}: expected a {expect_type.__name__} case, "
            f"got {type(model).__name__}"
        )
    return model


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunArtifacts:
    """Everything a run leaves behind."""

    scenario: Scenario
    result: SolveResult
    trace_path: Path
    summary_path: Path
    summary: dict


def _probe_positions(scenario: Scenario, problem: DispatchProblem) -> tuple[int, ...]:
    positions = list(default_probes(problem))
    if scenario.probes:
        for k, feeder in enumerate(scenario.system.feeders):
            if feeder.feeder_id in scenario.probes:
                positions[k] = feeder.node_index()[
                    scenario.probes[feeder.feeder_id]
                ]
    return tuple(positions)


def _label(text: str) -> str:
    return re.sub(r"[^0-9A-Za-z_.@-]", "_", text)


def run_scenario(scenario: Scenario, out_dir=".") -> RunArtifacts:
    """Execute the scenario and write its trace CSV and summary JSON."""
    problem = build_problem(scenario.system, scenario.limits)
    result = run_scenario_in_memory(scenario)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gen_labels = tuple(
        _label(str(g.bus_id)) for g in scenario.system.transmission.generators
    )
    feeder_labels = tuple(
        _label(f.feeder_id) for f in scenario.system.feeders
    )
    trace_path = out / f"{_label(scenario.name)}_trace.csv"
    write_trace(trace_path, result.records, gen_labels, feeder_labels)

    summary = _summarize(scenario, problem, result)
    summary_path = out / f"{_label(scenario.name)}_summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return RunArtifacts(
        scenario=scenario,
        result=result,
        trace_path=trace_path,
        summary_path=summary_path,
        summary=summary,
    )


def _summarize(
    scenario: Scenario, problem: DispatchProblem, result: SolveResult
) -> dict:
    system = scenario.system
    last = result.records[-1]
    active: dict[str, dict[str, list[int]]] = {}
    threshold = 1e-8
    for k, feeder in enumerate(system.feeders):
        n = feeder.n_nodes
        mu = result.y.mu[k]
        active[feeder.feeder_id] = {
            "upper": [
                feeder.nodes[j].id for j in np.flatnonzero(mu[:n] > threshold)
            ],
            "lower": [
                feeder.nodes[j].id for j in np.flatnonzero(mu[n:] > threshold)
            ],
        }

    executed = result.iterations
    boundaries = sorted(
        {e.iteration for e in scenario.events if e.iteration <= executed}
    )
    edges = [0, *boundaries, executed + 1]
    phases = []
    for a, b in zip(edges[:-1], edges[1:]):
        if b <= a:
            continue
        phases.append(
            {
                "from_iteration": a,
                "to_iteration": b - 1,
                "lambda": result.records[b - 1].lam,
            }
        )

    return {
        "scenario": scenario.name,
        "engine": scenario.engine,
        "feedback": scenario.config.feedback,
        "status": result.status,
        "iterations": executed,
        "seed": scenario.seed,
        "config": {
            "eps": scenario.config.eps,
            "eta": scenario.config.eta,
            "max_iter": scenario.config.max_iter,
            "tol_primal": scenario.config.tol_primal,
            "tol_dual": scenario.config.tol_dual,
            "tol_balance": scenario.config.tol_balance,
            "zero_lambda_to_ders": scenario.config.zero_lambda_to_ders,
        },
        "final": {
            "lambda": result.y.lam,
            "total_cost": total_cost(problem, result.x),
            "slack_residual": last.slack_residual,
            "P_M": {
                str(g.bus_id): float(P)
                for g, P in zip(system.transmission.generators, result.x.P_M)
            },
            "P_L": {
                f.feeder_id: float(v)
                for f, v in zip(system.feeders, last.P_L)
            },
            "voltage": {
                f.feeder_id: {"min": float(lo), "max": float(hi)}
                for f, lo, hi in zip(system.feeders, last.v_min, last.v_max)
            },
            "active_constraints": active,
        },
        "phases": phases,
        "events": [
            {
                "iteration": e.iteration,
                "kind": e.kind,
                "target": e.target,
                "factor": e.factor,
            }
            for e in scenario.events
        ],
    }


# ---------------------------------------------------------------------------
# comparing runs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ComparisonReport:
    """Per-iteration and final deltas of one metric between two traces."""

    metric: str
    iterations: np.ndarray
    values_a: np.ndarray
    values_b: np.ndarray
    deltas: np.ndarray  # a - b
    final_a: float
    final_b: float
    final_delta: float


_METRIC_COLUMNS = {"total-cost": "total_cost"}


def compare_runs(trace_a, trace_b, metric: str = "total-cost") -> ComparisonReport:
    """Diff two trace files over their (identical) iteration horizon."""
    if metric not in _METRIC_COLUMNS:
        raise ValueError(
            f"unknown metric {metric!r}; supported: {sorted(_METRIC_COLUMNS)}"
        )
    a = read_trace(trace_a)
    b = read_trace(trace_b)
    it_a = a.iterations
    it_b = b.iterations
    if len(it_a) != len(it_b) or not np.array_equal(it_a, it_b):
        raise ValueError(
            f"trace horizons differ: {len(it_a)} records "
            f"(0..{int(it_a[-1]) if len(it_a) else '-'}) vs {len(it_b)} "
            f"(0..{int(it_b[-1]) if len(it_b) else '-'})"
        )
    col = _METRIC_COLUMNS[metric]
    va = a.column(col)
    vb = b.column(col)
    return ComparisonReport(
        metric=metric,
        iterations=it_a,
        values_a=va,
        values_b=vb,
        deltas=va - vb,
        final_a=float(va[-1]),
        final_b=float(vb[-1]),
        final_delta=float(va[-1] - vb[-1]),
    )


# ---------------------------------------------------------------------------
# brute-force oracle
# ---------------------------------------------------------------------------

class OracleInfeasible(RuntimeError):
    """No grid point satisfied the constraints."""


@dataclass(frozen=True)
class OracleReport:
    """Grid-refined optimum and its gap to the engine's converged point."""

    objective_oracle: float
    objective_engine: float
    objective_gap_rel: float
    coordinate_gap_inf: float
    engine_feasibility: float  # max constraint violation at the engine point
    point_oracle: dict
    point_engine: dict
    resolution: float
    evaluations: int


def probe_oracle(scenario: Scenario, resolution: float = 1e-4) -> OracleReport:
    """Solve a small instance by nested grid refinement; gap to the engine.

    Works on the affine feeder model (the same one the engine prices
    from).  The balance constraint eliminates the last free generator;
    every remaining free variable is gridded, so the instance may have at
    most four free decision variables in total.
    """
    problem = build_problem(scenario.system, scenario.limits)
    system = scenario.system
    ts = system.transmission
    N = problem.n_nodes

    free_p = [int(i) for i in np.flatnonzero(problem.p_hi > problem.p_lo)]
    free_q = [int(i) for i in np.flatnonzero(problem.q_hi > problem.q_lo)]
    free_g = [int(i) for i in np.flatnonzero(problem.gen_hi > problem.gen_lo)]
    n_free = len(free_p) + len(free_q) + len(free_g)
    if n_free > 4:
        raise ValueError(
            f"instance has {n_free} free decision variables; "
            "the oracle handles at most 4"
        )
    if not free_g:
        raise ValueError("oracle needs at least one free generator to absorb "
                         "the balance constraint")
    elim = free_g[-1]
    grid_g = free_g[:-1]

    # affine pieces: total head draw and per-node voltages as functions of
    # the gridded variables
    fixed_inj = sum(b.p0 for b in ts.buses if b.id != ts.slack_bus_id)
    P0 = scenario.slack_value if scenario.slack_mode == "explicit" else None
    if P0 is None:
        raise ValueError(
            "oracle requires an explicit slack target "
            "(scenario slack mode 'explicit')"
        )

    dims = (
        [("p", i) for i in free_p]
        + [("q", i) for i in free_q]
        + [("P", i) for i in grid_g]
    )
    lo = np.array(
        [
            problem.p_lo[i] if kind == "p" else
            problem.q_lo[i] if kind == "q" else problem.gen_lo[i]
            for kind, i in dims
        ]
    )
    hi = np.array(
        [
            problem.p_hi[i] if kind == "p" else
            problem.q_hi[i] if kind == "q" else problem.gen_hi[i]
            for kind, i in dims
        ]
    )

    def evaluate(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Objective and feasibility for an (m, ndim) batch of grid points."""
        m = len(points)
        p = np.zeros((m, N))
        q = np.zeros((m, N))
        P = np.zeros((m, problem.n_generators))
        for d, (kind, i) in enumerate(dims):
            if kind == "p":
                p[:, i] = points[:, d]
            elif kind == "q":
                q[:, i] = points[:, d]
            else:
                P[:, i] = points[:, d]
        violation = np.zeros(m)
        P_L = np.zeros(m)
        for k, model in enumerate(problem.models):
            sl = system.feeder_slice(k)
            v = model.c + p[:, sl] @ model.A.T + q[:, sl] @ model.B.T
            violation = np.maximum(violation, np.max(v - problem.limits.v_max, axis=1))
            violation = np.maximum(violation, np.max(problem.limits.v_min - v, axis=1))
            P_L += model.d + p[:, sl] @ model.M + q[:, sl] @ model.N
        P[:, elim] = P_L - fixed_inj - P0 - (np.sum(P, axis=1) - P[:, elim])
        violation = np.maximum(violation, P[:, elim] - problem.gen_hi[elim])
        violation = np.maximum(violation, problem.gen_lo[elim] - P[:, elim])
        objective = (
            np.sum(problem.gen_coef * P * P, axis=1)
            + np.sum(problem.a_p * p * p, axis=1)
            + np.sum(problem.a_q * q * q, axis=1)
        )
        return objective, violation

    points_per_dim = 15
    ndim = len(dims)
    cur_lo, cur_hi = lo.copy(), hi.copy()
    best_point = None
    best_obj = math.inf
    evaluations = 0
    slack = 1e-9
    while True:
        axes = [np.linspace(cur_lo[d], cur_hi[d], points_per_dim) for d in range(ndim)]
        mesh = np.meshgrid(*axes, indexing="ij") if ndim else []
        pts = (
            np.stack([m.ravel() for m in mesh], axis=1)
            if ndim
            else np.zeros((1, 0))
        )
        obj, vio = evaluate(pts)
        evaluations += len(pts)
        feasible = vio <= slack
        if not np.any(feasible):
            if best_point is None:
                raise OracleInfeasible(
                    "no grid point satisfies the voltage and balance "
                    "constraints"
                )
        else:
            idx = int(np.argmin(np.where(feasible, obj, math.inf)))
            if obj[idx] < best_obj:
                best_obj = float(obj[idx])
                best_point = pts[idx].copy()
        spacing = (cur_hi - cur_lo) / (points_per_dim - 1) if ndim else np.zeros(0)
        if ndim == 0 or np.all(spacing <= resolution):
            break
        center = best_point if best_point is not None else 0.5 * (cur_lo + cur_hi)
        half = np.maximum(spacing * 2.0, resolution * 0.5)
        cur_lo = np.clip(center - half, lo, hi)
        cur_hi = np.clip(center + half, lo, hi)

    if best_point is None:
        raise OracleInfeasible("no feasible point found")

    oracle_P = _full_point(problem, system, dims, best_point, elim, fixed_inj, P0)

    # engine's converged point on the same instance
    run = run_scenario_in_memory(scenario)
    xe = run.x
    engine_point = {
        "p": [float(v) for v in xe.p],
        "q": [float(v) for v in xe.q],
        "P_M": [float(v) for v in xe.P_M],
    }
    eng_obj = total_cost(problem, xe)
    eng_vec = np.concatenate([xe.p, xe.q, xe.P_M])
    ora_vec = np.concatenate(
        [oracle_P["p"], oracle_P["q"], oracle_P["P_M"]]
    )
    coord_gap = float(np.max(np.abs(eng_vec - ora_vec))) if len(eng_vec) else 0.0

    # feasibility of the engine point under the same model
    _, eng_vio = evaluate(_project_dims(problem, dims, xe).reshape(1, -1))
    gap_rel = abs(eng_obj - best_obj) / max(1.0, abs(best_obj))
    return OracleReport(
        objective_oracle=best_obj,
        objective_engine=eng_obj,
        objective_gap_rel=gap_rel,
        coordinate_gap_inf=coord_gap,
        engine_feasibility=float(eng_vio[0]),
        point_oracle={
            "p": [float(v) for v in oracle_P["p"]],
            "q": [float(v) for v in oracle_P["q"]],
            "P_M": [float(v) for v in oracle_P["P_M"]],
        },
        point_engine=engine_point,
        resolution=resolution,
        evaluations=evaluations,
    )


def _full_point(problem, system, dims, x, elim, fixed_inj, P0):
    N = problem.n_nodes
    p = np.zeros(N)
    q = np.zeros(N)
    P = np.zeros(problem.n_generators)
    for d, (kind, i) in enumerate(dims):
        if kind == "p":
            p[i] = x[d]
        elif kind == "q":
            q[i] = x[d]
        else:
            P[i] = x[d]
    P_L = 0.0
    for k, model in enumerate(problem.models):
        sl = system.feeder_slice(k)
        P_L += model.d + float(model.M @ p[sl]) + float(model.N @ q[sl])
    P[elim] = P_L - fixed_inj - P0 - (float(np.sum(P)) - P[elim])
    return {"p": p, "q": q, "P_M": P}


def _project_dims(problem, dims, x: PrimalState) -> np.ndarray:
    out = np.zeros(len(dims))
    for d, (kind, i) in enumerate(dims):
        if kind == "p":
            out[d] = x.p[i]
        elif kind == "q":
            out[d] = x.q[i]
        else:
            out[d] = x.P_M[i]
    return out


def run_scenario_in_memory(scenario: Scenario) -> SolveResult:
    """Run the scenario's engine without writing any files."""
    problem = build_problem(scenario.system, scenario.limits)
    probes = _probe_positions(scenario, problem)
    rng = (
        np.random.default_rng(scenario.seed)
        if scenario.seed is not None
        else None
    )
    x0, y0 = initial_state(
        problem,
        mode=scenario.init_mode,
        P_M=None if scenario.init_P_M is None else np.array(scenario.init_P_M),
        rng=rng,
    )
    account = (
        SlackAccount(P0_slack=scenario.slack_value)
        if scenario.slack_mode == "explicit"
        else None
    )
    events = tuple(e.to_engine_event() for e in scenario.events)
    if scenario.engine == "core":
        return solve(
            problem,
            scenario.config,
            x0=x0,
            y0=y0,
            account=account,
            events=events,
            probes=probes,
        )
    mode = "gradient" if scenario.engine == "market" else "best-response"
    return run_market(
        scenario.system,
        scenario.limits,
        scenario.config,
        events=events,
        mode=mode,
        x0=x0,
        y0=y0,
        account=account,
        probes=probes,
    )
