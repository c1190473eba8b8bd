"""Scenario files: loading, validation, run artifacts, diffs, the oracle,
and the command-line front end (exit codes 0 converged / 2 not / 1 error).
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np
import pytest

from tdcoopt.cli import main
from tdcoopt.core import DerCapacityScale, GeneratorOutage
from tdcoopt.scenario import (
    OracleInfeasible,
    ScenarioError,
    ScenarioEvent,
    compare_runs,
    load_scenario,
    probe_oracle,
    run_scenario,
    run_scenario_in_memory,
)
from tdcoopt.trace import read_trace

from conftest import CASES_DIR, SCENARIOS_DIR


def write_scenario(tmp_path, patch: dict | None = None, drop: tuple = ()):
    """A small valid scenario (absolute case paths) with fields patched in."""
    raw = {
        "name": "t",
        "transmission": str(CASES_DIR / "gen2.json"),
        "feeders": [{"case": str(CASES_DIR / "feeder4.json"), "host_bus": 3}],
        "limits": {"v_min": 0.95, "v_max": 1.05},
        "engine": "core",
        "feedback": "linear",
        "config": {"eps": 0.02, "max_iter": 100},
        "init": {"mode": "midbox"},
        "slack": {"mode": "explicit", "value": 0.0},
    }
    for key, value in (patch or {}).items():
        if isinstance(value, dict) and isinstance(raw.get(key), dict):
            raw[key] = {**raw[key], **value}
        else:
            raw[key] = value
    for key in drop:
        raw.pop(key, None)
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps(raw))
    return path


def fixed_horizon(scenario, n: int):
    cfg = dataclasses.replace(
        scenario.config, max_iter=n, tol_primal=0.0, tol_dual=0.0,
        tol_balance=0.0,
    )
    return dataclasses.replace(scenario, config=cfg)


# ---------------------------------------------------------------------------
# loading and validation
# ---------------------------------------------------------------------------

def test_load_shipped_default_scenario():
    sc = load_scenario(SCENARIOS_DIR / "default.json")
    assert sc.name == "default"
    assert sc.engine == "core"
    assert sc.config.feedback == "ac"
    assert sc.config.eps == 5e-4
    assert len(sc.system.feeders) == 2
    assert {f.feeder_id for f in sc.system.feeders} == {"feeder18", "case33bw"}
    assert sc.limits.v_max == 1.05
    assert len(sc.events) == 2
    assert {e.kind for e in sc.events} == {
        "generator-outage", "der-capacity-scale"
    }
    assert sc.init_mode == "setpoint"
    assert sc.slack_mode == "record"


def test_event_mapping_to_engine_events():
    outage = ScenarioEvent(iteration=7, kind="generator-outage", target=36)
    scale = ScenarioEvent(iteration=9, kind="der-capacity-scale",
                          target="all-DERs", factor=2.0)
    assert outage.to_engine_event() == GeneratorOutage(iteration=7, bus_id=36)
    assert scale.to_engine_event() == DerCapacityScale(iteration=9, factor=2.0)


def test_overrides_are_applied_before_validation(tmp_path):
    path = write_scenario(tmp_path)
    sc = load_scenario(
        path,
        overrides={"engine": "market", "feedback": "ac", "max_iter": 7,
                   "eps": 0.01, "eta": 0.2, "seed": 5},
    )
    assert sc.engine == "market"
    assert sc.config.feedback == "ac"
    assert sc.config.max_iter == 7
    assert sc.config.eps == 0.01
    assert sc.config.eta == 0.2
    assert sc.seed == 5

    bad = load_scenario  # overrides go through the same validation
    with pytest.raises(ScenarioError, match="bad config"):
        bad(path, overrides={"eps": -1.0})
    with pytest.raises(ScenarioError, match="unknown engine"):
        bad(path, overrides={"engine": "quantum"})


def test_relative_case_paths_resolve_against_scenario_file():
    # every shipped scenario uses ../cases/ paths
    sc = load_scenario(SCENARIOS_DIR / "dispatch9.json")
    assert sc.system.transmission.name == "gen9"
    assert len(sc.system.transmission.generators) == 9


@pytest.mark.parametrize(
    "patch, drop, message",
    [
        ({}, ("transmission",), "missing field 'transmission'"),
        ({"engine": "quantum"}, (), "unknown engine"),
        ({"config": {"eps": -3.0}}, (), "bad config"),
        ({"config": {"warp": 9}}, (), "unknown config fields"),
        ({"init": {"mode": "cold"}}, (), "unknown init mode"),
        ({"init": {"mode": "random"}}, (), "requires a seed"),
        ({"init": {"P_M": [1.0]}}, (), "init.P_M has 1 entries"),
        ({"slack": {"mode": "float"}}, (), "unknown slack mode"),
        ({"probes": {"nope": 2}}, (), "unknown feeder"),
        ({"probes": {"feeder4": 99}}, (), "probe node 99"),
        ({"feeders": [{"case": str(CASES_DIR / "feeder4.json")}]}, (),
         "missing field 'host_bus'"),
        ({"feeders": [{"case": str(CASES_DIR / "feeder4.json"),
                       "host_bus": 4}]}, (), "slack bus"),
    ],
)
def test_scenario_validation_errors(tmp_path, patch, drop, message):
    path = write_scenario(tmp_path, patch, drop)
    with pytest.raises(ScenarioError, match=message):
        load_scenario(path)


@pytest.mark.parametrize(
    "event, message",
    [
        ({"kind": "comet-strike", "iteration": 5, "target": 1},
         "unknown kind"),
        ({"kind": "generator-outage", "iteration": 0, "target": 1},
         "outside"),
        ({"kind": "generator-outage", "iteration": 100, "target": 1},
         "outside"),
        ({"kind": "generator-outage", "iteration": 5, "target": 42},
         "no generator at bus 42"),
        ({"kind": "der-capacity-scale", "iteration": 5, "target": "some"},
         "all-DERs"),
        ({"kind": "der-capacity-scale", "iteration": 5, "target": "all-DERs"},
         "positive factor"),
        ({"kind": "der-capacity-scale", "iteration": 5, "target": "all-DERs",
          "factor": -2.0}, "positive factor"),
        ({"kind": "generator-outage", "target": 1}, "missing field"),
    ],
)
def test_event_validation_errors(tmp_path, event, message):
    path = write_scenario(tmp_path, {"events": [event]})
    with pytest.raises(ScenarioError, match=message):
        load_scenario(path)


def test_load_rejects_broken_files(tmp_path):
    with pytest.raises(ScenarioError, match="cannot read"):
        load_scenario(tmp_path / "missing.json")

    syntax = tmp_path / "syntax.json"
    syntax.write_text('{"name": "x",}')
    with pytest.raises(ScenarioError, match="syntax error at line 1"):
        load_scenario(syntax)

    listfile = tmp_path / "list.json"
    listfile.write_text("[1, 2]")
    with pytest.raises(ScenarioError, match="must be a JSON object"):
        load_scenario(listfile)


def test_load_rejects_wrong_case_kind(tmp_path):
    path = write_scenario(
        tmp_path, {"transmission": str(CASES_DIR / "feeder4.json")}
    )
    with pytest.raises(ScenarioError, match="expected a TransmissionSystem"):
        load_scenario(path)
    path = write_scenario(
        tmp_path,
        {"feeders": [{"case": str(CASES_DIR / "gen2.json"), "host_bus": 3}]},
    )
    with pytest.raises(ScenarioError, match="expected a DistributionFeeder"):
        load_scenario(path)


# ---------------------------------------------------------------------------
# running and artifacts
# ---------------------------------------------------------------------------

def test_run_scenario_writes_trace_and_summary(tmp_path):
    sc = fixed_horizon(load_scenario(SCENARIOS_DIR / "oracle_demo.json"), 40)
    artifacts = run_scenario(sc, out_dir=tmp_path / "out")
    assert artifacts.trace_path == tmp_path / "out" / "oracle_demo_trace.csv"
    assert artifacts.summary_path.name == "oracle_demo_summary.json"

    trace = read_trace(artifacts.trace_path)
    assert len(trace) == 41
    assert "P_M_1" in trace.columns and "P_M_2" in trace.columns
    assert "v_min_feeder4" in trace.columns

    summary = json.loads(artifacts.summary_path.read_text())
    assert summary == artifacts.summary
    assert summary["status"] == "not-converged"
    assert summary["iterations"] == 40
    assert set(summary["final"]["P_M"]) == {"1", "2"}
    assert 0.9 < summary["final"]["voltage"]["feeder4"]["min"] < 1.1
    assert summary["config"]["eps"] == 0.02
    # trace row 40 and the summary describe the same state
    assert trace.column("lambda")[-1] == summary["final"]["lambda"]
    assert trace.column("v_min_feeder4")[-1] == pytest.approx(
        summary["final"]["voltage"]["feeder4"]["min"]
    )


def test_run_scenario_is_deterministic(tmp_path):
    sc = fixed_horizon(load_scenario(SCENARIOS_DIR / "oracle_demo.json"), 30)
    a = run_scenario(sc, out_dir=tmp_path / "a")
    b = run_scenario(sc, out_dir=tmp_path / "b")
    assert a.trace_path.read_bytes() == b.trace_path.read_bytes()
    assert a.summary_path.read_bytes() == b.summary_path.read_bytes()


def test_run_in_memory_matches_run_scenario(tmp_path):
    sc = fixed_horizon(load_scenario(SCENARIOS_DIR / "oracle_demo.json"), 25)
    mem = run_scenario_in_memory(sc)
    artifacts = run_scenario(sc, out_dir=tmp_path)
    assert mem.records == artifacts.result.records


def test_summary_phases_split_at_events(tmp_path):
    path = write_scenario(
        tmp_path,
        {
            "config": {"eps": 0.02, "max_iter": 40, "tol_primal": 0.0,
                       "tol_dual": 0.0, "tol_balance": 0.0},
            "events": [
                {"kind": "generator-outage", "iteration": 20, "target": 2}
            ],
        },
    )
    artifacts = run_scenario(load_scenario(path), out_dir=tmp_path)
    phases = artifacts.summary["phases"]
    assert [(p["from_iteration"], p["to_iteration"]) for p in phases] == [
        (0, 19), (20, 40),
    ]
    assert artifacts.summary["events"] == [
        {"iteration": 20, "kind": "generator-outage", "target": 2,
         "factor": None}
    ]
    assert artifacts.summary["final"]["P_M"]["2"] == 0.0


def test_market_engine_scenario_runs(tmp_path):
    path = write_scenario(
        tmp_path,
        {"engine": "market",
         "config": {"eps": 0.02, "max_iter": 30, "tol_primal": 0.0,
                    "tol_dual": 0.0, "tol_balance": 0.0}},
    )
    result = run_scenario_in_memory(load_scenario(path))
    assert result.iterations == 30


def test_scenario_probes_override_trace_column(tmp_path):
    # alpha only differs across nodes once voltage multipliers are active,
    # so squeeze the lower band to light them up; then probing node 2
    # instead of the deepest node (4) must change the trace column
    path = write_scenario(
        tmp_path,
        {"limits": {"v_min": 0.999, "v_max": 1.05},
         "config": {"eps": 0.02, "max_iter": 20, "tol_primal": 0.0,
                    "tol_dual": 0.0, "tol_balance": 0.0}},
    )
    base = load_scenario(path)
    probed = dataclasses.replace(base, probes={"feeder4": 2})
    a = run_scenario(base, out_dir=tmp_path / "deep")
    b = run_scenario(probed, out_dir=tmp_path / "shallow")
    col_a = read_trace(a.trace_path).column("alpha_feeder4")
    col_b = read_trace(b.trace_path).column("alpha_feeder4")
    assert not np.allclose(col_a[1:], col_b[1:])
    # everything else is untouched by the probe choice
    np.testing.assert_allclose(
        read_trace(a.trace_path).column("lambda"),
        read_trace(b.trace_path).column("lambda"),
    )


# ---------------------------------------------------------------------------
# comparing runs
# ---------------------------------------------------------------------------

def test_compare_identical_runs_is_zero(tmp_path):
    sc = fixed_horizon(load_scenario(SCENARIOS_DIR / "oracle_demo.json"), 20)
    a = run_scenario(sc, out_dir=tmp_path / "a")
    b = run_scenario(sc, out_dir=tmp_path / "b")
    report = compare_runs(a.trace_path, b.trace_path)
    assert report.metric == "total-cost"
    assert len(report.iterations) == 21
    np.testing.assert_allclose(report.deltas, 0.0)
    assert report.final_delta == 0.0


def test_compare_rejects_horizon_mismatch(tmp_path):
    sc = load_scenario(SCENARIOS_DIR / "oracle_demo.json")
    a = run_scenario(fixed_horizon(sc, 20), out_dir=tmp_path / "a")
    b = run_scenario(fixed_horizon(sc, 21), out_dir=tmp_path / "b")
    with pytest.raises(ValueError, match="horizons differ"):
        compare_runs(a.trace_path, b.trace_path)


def test_compare_rejects_unknown_metric(tmp_path):
    sc = fixed_horizon(load_scenario(SCENARIOS_DIR / "oracle_demo.json"), 5)
    a = run_scenario(sc, out_dir=tmp_path)
    with pytest.raises(ValueError, match="unknown metric"):
        compare_runs(a.trace_path, a.trace_path, metric="entropy")


# ---------------------------------------------------------------------------
# the brute-force oracle
# ---------------------------------------------------------------------------

def test_probe_oracle_agrees_with_engine():
    sc = load_scenario(SCENARIOS_DIR / "oracle_demo.json")
    report = probe_oracle(sc, resolution=1e-4)
    assert report.objective_gap_rel < 1e-6
    assert report.coordinate_gap_inf < 1e-3
    assert report.engine_feasibility <= 1e-9
    assert report.evaluations > 1000
    # the oracle point balances: free gens + DER output match the demand
    P = report.point_oracle["P_M"]
    p = report.point_oracle["p"]
    assert sum(P) + sum(p) == pytest.approx(1.2 + 0.0030, abs=1e-6)


def test_probe_oracle_requires_explicit_slack(tmp_path):
    path = write_scenario(tmp_path, {"slack": {"mode": "record"}})
    with pytest.raises(ValueError, match="explicit slack"):
        probe_oracle(load_scenario(path))


def test_probe_oracle_rejects_large_instances():
    sc = load_scenario(SCENARIOS_DIR / "default.json")
    with pytest.raises(ValueError, match="at most 4"):
        probe_oracle(sc)


def test_probe_oracle_needs_a_free_generator(tmp_path):
    import tdcoopt.network as net

    ts = net.parse_case((CASES_DIR / "gen2.json").read_text())
    pinned = dataclasses.replace(
        ts,
        generators=tuple(
            dataclasses.replace(g, p_min=0.5, p_max=0.5) for g in ts.generators
        ),
    )
    case_path = tmp_path / "pinned.json"
    case_path.write_text(net.serialize_case(pinned))
    path = write_scenario(tmp_path, {"transmission": str(case_path)})
    with pytest.raises(ValueError, match="free generator"):
        probe_oracle(load_scenario(path))


def test_probe_oracle_infeasible(tmp_path):
    path = write_scenario(tmp_path, {"limits": {"v_min": 1.2, "v_max": 1.3}})
    with pytest.raises(OracleInfeasible):
        probe_oracle(load_scenario(path))


# ---------------------------------------------------------------------------
# command-line interface
# ---------------------------------------------------------------------------

def test_cli_run_converged_exit_0(tmp_path, capsys):
    code = main(
        ["run", str(SCENARIOS_DIR / "dispatch9.json"), "--out", str(tmp_path)]
    )
    out = capsys.readouterr().out
    assert code == 0
    assert "status   : converged" in out
    assert (tmp_path / "dispatch9_trace.csv").exists()
    assert (tmp_path / "dispatch9_summary.json").exists()


def test_cli_run_iteration_limit_exit_2(tmp_path, capsys):
    code = main(
        ["run", str(SCENARIOS_DIR / "dispatch9.json"), "--out", str(tmp_path),
         "--max-iter", "10"]
    )
    assert code == 2
    assert "not-converged" in capsys.readouterr().out


def test_cli_run_error_exit_1(tmp_path, capsys):
    code = main(["run", str(tmp_path / "nope.json")])
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_cli_compare(tmp_path, capsys):
    sc = str(SCENARIOS_DIR / "dispatch9.json")
    assert main(["run", sc, "--out", str(tmp_path / "a"),
                 "--max-iter", "30"]) == 2
    assert main(["run", sc, "--out", str(tmp_path / "b"),
                 "--max-iter", "30"]) == 2
    capsys.readouterr()
    code = main(
        ["compare", str(tmp_path / "a" / "dispatch9_trace.csv"),
         str(tmp_path / "b" / "dispatch9_trace.csv")]
    )
    out = capsys.readouterr().out
    assert code == 0
    assert "final a - b   : 0.000000" in out

    code = main(
        ["compare", str(tmp_path / "a" / "dispatch9_trace.csv"),
         str(tmp_path / "b" / "dispatch9_trace.csv"), "--metric", "vibes"]
    )
    assert code == 1
    assert "unknown metric" in capsys.readouterr().err


def test_cli_oracle(capsys):
    code = main(["oracle", str(SCENARIOS_DIR / "oracle_demo.json")])
    out = capsys.readouterr().out
    assert code == 0
    assert "relative gap" in out
    assert "grid evaluations" in out


def test_cli_lindump(tmp_path, capsys):
    code = main(
        ["lindump", str(CASES_DIR / "feeder4.json"), "--out", str(tmp_path)]
    )
    assert code == 0
    for piece in ("A", "B", "c", "M", "N", "d"):
        assert (tmp_path / f"feeder4_{piece}.csv").exists()
    A = np.loadtxt(tmp_path / "feeder4_A.csv", delimiter=",")
    assert A.shape == (3, 3)
    np.testing.assert_allclose(A, A.T)
    capsys.readouterr()

    code = main(["lindump", str(CASES_DIR / "gen2.json"), "--out", str(tmp_path)])
    assert code == 1
    assert "not a feeder case" in capsys.readouterr().err
