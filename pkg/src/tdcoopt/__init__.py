"""Joint transmission dispatch and distribution voltage regulation.

A regularized saddle-point engine couples a transmission-level economic
dispatch with voltage regulation on radial distribution feeders.  Two
interchangeable drivers — a monolithic iteration (`solve`) and a
message-passing market simulation (`run_market`) — produce identical
trajectories, which is the point: the price-and-incentive protocol loses
nothing relative to centrally coordinated gradient steps.

Layout
------
``network``      case dataclasses, JSON parsing, feeder-to-bus attachment
``lindistflow``  affine voltage/head-draw model of a radial feeder
``acpf``         backward/forward power-flow sweep and slack accounting
``core``         costs, states, gradients, step-size audit, `solve`
``market``       agents, message bus, operator step, `run_market`
``trace``        per-iteration CSV records, write/read round trip
``scenario``     scenario JSON, `run_scenario`, `compare_runs`, oracle
``cli``          ``tdcoopt run | compare | oracle | lindump``
"""

from .acpf import (
    AcSolution,
    SlackAccount,
    SweepDivergence,
    SweepResult,
    record_slack,
    slack_residual,
    sweep_feeder,
)
from .core import (
    Cost,
    DerCapacityScale,
    DispatchProblem,
    DivergenceError,
    DualState,
    EngineError,
    GeneratorOutage,
    Measurement,
    PrimalState,
    SolveResult,
    SolverConfig,
    StaleFeedbackError,
    StepsizeReport,
    apply_event,
    build_problem,
    check_stepsize,
    der_signals,
    dual_update,
    eval_lagrangian,
    grad_dual,
    grad_primal,
    initial_state,
    measure,
    measure_feeders,
    primal_dual_step,
    project_box,
    quadratic_cost,
    solve,
    total_cost,
)
from .lindistflow import LinearFeederModel, build_lindistflow, predict
from .market import (
    AgentMessage,
    GeneratorAgent,
    IncentiveSignals,
    MessageBus,
    OperatorConfig,
    OperatorOutcome,
    RoundAbort,
    UserAgent,
    generator_step,
    operator_step,
    run_market,
    user_best_response,
    user_step,
)
from .network import (
    Bus,
    CaseError,
    CoupledSystem,
    Der,
    DistributionFeeder,
    FeederLine,
    FeederNode,
    Generator,
    TransmissionSystem,
    VoltageLimits,
    attach_feeders,
    parse_case,
    rebase_feeder,
    serialize_case,
    validate_feeder,
    validate_transmission,
)
from .scenario import (
    ComparisonReport,
    OracleInfeasible,
    OracleReport,
    RunArtifacts,
    Scenario,
    ScenarioError,
    ScenarioEvent,
    compare_runs,
    load_scenario,
    probe_oracle,
    run_scenario,
)
from .trace import Trace, TraceRecord, read_trace, trace_columns, write_trace

__version__ = "0.1.0"

__all__ = [
    "AcSolution",
    "AgentMessage",
    "Bus",
    "CaseError",
    "ComparisonReport",
    "Cost",
    "CoupledSystem",
    "Der",
    "DerCapacityScale",
    "DispatchProblem",
    "DistributionFeeder",
    "DivergenceError",
    "DualState",
    "EngineError",
    "FeederLine",
    "FeederNode",
    "Generator",
    "GeneratorAgent",
    "GeneratorOutage",
    "IncentiveSignals",
    "LinearFeederModel",
    "Measurement",
    "MessageBus",
    "OperatorConfig",
    "OperatorOutcome",
    "OracleInfeasible",
    "OracleReport",
    "PrimalState",
    "RoundAbort",
    "RunArtifacts",
    "Scenario",
    "ScenarioError",
    "ScenarioEvent",
    "SlackAccount",
    "SolveResult",
    "SolverConfig",
    "StaleFeedbackError",
    "StepsizeReport",
    "SweepDivergence",
    "SweepResult",
    "Trace",
    "TraceRecord",
    "TransmissionSystem",
    "UserAgent",
    "VoltageLimits",
    "apply_event",
    "attach_feeders",
    "build_lindistflow",
    "build_problem",
    "check_stepsize",
    "compare_runs",
    "der_signals",
    "dual_update",
    "eval_lagrangian",
    "generator_step",
    "grad_dual",
    "grad_primal",
    "initial_state",
    "load_scenario",
    "measure",
    "measure_feeders",
    "operator_step",
    "parse_case",
    "predict",
    "primal_dual_step",
    "probe_oracle",
    "project_box",
    "quadratic_cost",
    "read_trace",
    "rebase_feeder",
    "record_slack",
    "run_market",
    "run_scenario",
    "serialize_case",
    "slack_residual",
    "solve",
    "sweep_feeder",
    "total_cost",
    "trace_columns",
    "user_best_response",
    "user_step",
    "validate_feeder",
    "validate_transmission",
    "write_trace",
]
