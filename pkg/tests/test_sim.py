import json

import numpy as np
import pytest

from cbflab.episode import inject_disturbance, run_episode
from cbflab.metrics import (aggregate_metrics, compute_metrics, episode_violation_interval,
                            wilson_interval)
from cbflab.plants import make_plant, make_rng
from cbflab.scenario import Scenario, ScenarioError, apply_overrides, load_scenario
from cbflab.sweep import run_cell, sweep, write_report, write_trace_csv


def base_doc(**over):
    doc = {
        "name": "t", "plant": "scalar_integrator", "dt": 0.02, "horizon": 120,
        "variant": "fixed_params", "x0": [1.0],
        "barriers": [{"family": "halfspace", "index": 0, "offset": 0.0}],
        "covariance": {"epi": 0.002, "ale": 0.05},
        "reference": {"kind": "setpoint", "target": [-0.5], "gain": 2.0},
        "risk": {"alpha0": 1.0, "kappa0": 2.0, "fixed_kappa": 2.0},
    }
    doc.update(over)
    return doc


# ---------------------------------------------------------------------------
# scenario schema
# ---------------------------------------------------------------------------

def test_schema_rejections_name_field():
    with pytest.raises(ScenarioError, match="dt"):
        Scenario.from_dict(base_doc(dt=0.0))
    with pytest.raises(ScenarioError, match="variant"):
        Scenario.from_dict(base_doc(variant="magic"))
    with pytest.raises(ScenarioError, match="barriers"):
        Scenario.from_dict(base_doc(barriers=[]))
    with pytest.raises(ScenarioError, match="unknown key"):
        Scenario.from_dict(base_doc(extra_field=1))
    with pytest.raises(ScenarioError, match="schema_version"):
        Scenario.from_dict(base_doc(schema_version=99))


def test_load_missing_scenario_names_path(tmp_path):
    with pytest.raises(ScenarioError, match="nope.json"):
        load_scenario(tmp_path / "nope.json")


def test_overrides():
    scn = Scenario.from_dict(base_doc())
    scn2 = apply_overrides(scn, ["kappa_max=4.5", "risk.kappa0=0.7", "noise_scale=2.0",
                                 "barriers.0.offset=0.1"])
    assert scn2.risk["kappa_bounds"][1] == 4.5
    assert scn2.risk["kappa0"] == 0.7
    assert scn2.noise_scale == 2.0
    assert scn2.barriers[0]["offset"] == 0.1
    with pytest.raises(ScenarioError):
        apply_overrides(scn, ["not-an-override"])


# ---------------------------------------------------------------------------
# episode
# ---------------------------------------------------------------------------

def test_zero_noise_feasible_reference_tracks_exactly():
    doc = base_doc(covariance={"epi": 0.0, "ale": 0.0},
                   reference={"kind": "setpoint", "target": [2.0], "gain": 1.5},
                   x0=[2.0])
    tr = run_episode(Scenario.from_dict(doc), 0)
    assert not tr.violation.any()
    assert np.array_equal(tr.u_star, tr.u_ref)  # filter inactive throughout


def test_bitwise_determinism():
    scn = Scenario.from_dict(base_doc(variant="full", risk={"alpha0": 1.0, "kappa0": 0.5}))
    a = run_episode(scn, 123)
    b = run_episode(scn, 123)
    for field in ("xi", "u_ref", "u_star", "h_c", "sigma_h", "alpha", "kappa", "slack"):
        assert np.array_equal(getattr(a, field), getattr(b, field)), field
    c = run_episode(scn, 124)
    assert not np.array_equal(a.xi, c.xi)


def test_push_recovery():
    doc = base_doc(horizon=300,
                   disturbances=[{"kind": "push", "t": 1.0, "impulse": [-2.0]}],
                   risk={"alpha0": 2.0, "kappa0": 3.0, "fixed_kappa": 3.0})
    scn = Scenario.from_dict(doc)
    tr = run_episode(scn, 4)
    k_push = int(1.0 / scn.dt)
    assert tr.xi[k_push + 1, 0] < tr.xi[k_push - 1, 0] - 1.0  # impulse landed
    m = compute_metrics(tr, scn)
    assert np.isfinite(m.t_recover)  # recovered within the episode
    assert tr.violation[k_push + 5:].sum() <= tr.violation.sum()


def test_trace_lengths_and_monotone_time():
    scn = Scenario.from_dict(base_doc())
    tr = run_episode(scn, 0)
    assert len(tr) == scn.horizon
    assert (np.diff(tr.t) > 0).all()


def test_robust_margin_variant_is_more_conservative():
    det = Scenario.from_dict(base_doc(variant="det_cbf"))
    rob = Scenario.from_dict(base_doc(
        variant="robust_margin",
        risk={"alpha0": 1.0, "kappa0": 0.0, "robust_margin": 0.4}))
    h_det = np.mean([run_episode(det, s).h_c.mean() for s in range(10)])
    h_rob = np.mean([run_episode(rob, s).h_c.mean() for s in range(10)])
    assert h_rob > h_det + 0.1  # fixed inflation holds the state higher


def test_parallel_jobs_match_sequential():
    scn = Scenario.from_dict(base_doc(horizon=40))
    seq = run_cell(scn, 6, seed0=3, jobs=1)
    par = run_cell(scn, 6, seed0=3, jobs=2)
    assert par.violations == seq.violations
    assert par.svr == seq.svr
    assert par.energy == pytest.approx(seq.energy, abs=1e-15)


# ---------------------------------------------------------------------------
# disturbances (unit level)
# ---------------------------------------------------------------------------

def test_push_impulse_momentum():
    plant = make_plant("scalar_integrator")
    xi = np.array([0.5])
    out, ss, ds, fr = inject_disturbance({"kind": "push", "t": 1.0, "impulse": [5.0]},
                                         1.0, 0.02, xi, plant, 1.0, 1.0, False)
    assert out[0] == pytest.approx(5.5)  # velocity state jumps by the impulse
    # outside the trigger window: identity
    out2, *_ = inject_disturbance({"kind": "push", "t": 1.0, "impulse": [5.0]},
                                  2.0, 0.02, xi, plant, 1.0, 1.0, False)
    assert out2[0] == pytest.approx(0.5)


def test_no_events_identity():
    plant = make_plant("scalar_integrator")
    xi = np.array([0.3])
    out, ss, ds, fr = inject_disturbance({"kind": "friction_collapse", "t0": 5.0, "t1": 6.0},
                                         1.0, 0.02, xi, plant, 1.0, 1.0, False)
    assert out is xi and ss == 1.0 and ds == 1.0 and not fr


def test_friction_collapse_scales():
    plant = make_plant("scalar_integrator")
    _, ss, ds, _ = inject_disturbance(
        {"kind": "friction_collapse", "t0": 0.0, "t1": 1.0, "sigma_scale": 4.0,
         "drift_scale": 0.3}, 0.5, 0.02, np.zeros(1), plant, 1.0, 1.0, False)
    assert ss == pytest.approx(4.0)
    assert ds == pytest.approx(0.3)


def test_sensor_dropout_bounded_divergence():
    doc = base_doc(horizon=200, plant="planar_double_integrator",
                   x0=[0.0, 0.0, 0.5, 0.0],
                   barriers=[{"family": "halfspace", "index": 1, "offset": -5.0}],
                   covariance={"epi": 0.0, "ale": 0.0},
                   reference={"kind": "setpoint", "target": [1.0, 0.0], "gain": 1.0,
                              "damping": 0.8},
                   disturbances=[{"kind": "sensor_dropout", "t0": 1.0, "t1": 2.0}])
    scn = Scenario.from_dict(doc)
    tr = run_episode(scn, 0)
    # during the window the controller's command is frozen at the t0 value
    k0, k1 = int(1.0 / scn.dt), int(2.0 / scn.dt)
    assert np.allclose(tr.u_ref[k0:k1], tr.u_ref[k0], atol=1e-12)
    # true state keeps evolving but stays bounded by window * max drift
    drift_bound = (k1 - k0) * scn.dt * np.abs(tr.xi[k0:k1, 2:]).max() + 1e-9
    assert np.abs(tr.xi[k1, :2] - tr.xi[k0, :2]).max() <= drift_bound


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def test_metric_examples():
    scn = Scenario.from_dict(base_doc(horizon=100))
    tr = run_episode(scn, 0)
    tr.violation[:] = False
    m = compute_metrics(tr, scn)
    assert m.svr == 0.0
    tr.violation[:50] = True
    m2 = compute_metrics(tr, scn)
    assert m2.svr == pytest.approx(0.5)
    # constant control norm 2 -> E = 4
    tr.u_star[:] = 2.0
    m3 = compute_metrics(tr, scn)
    assert m3.energy == pytest.approx(4.0)
    assert m3.jerk == pytest.approx(0.0)


def test_metric_consistency_with_independent_recomputation():
    scn = Scenario.from_dict(base_doc(variant="full", risk={"alpha0": 1.0, "kappa0": 0.5}))
    tr = run_episode(scn, 5)
    m = compute_metrics(tr, scn)
    e = float(np.mean([u @ u for u in tr.u_star]))
    j = float(np.mean([d @ d for d in np.diff(tr.u_star, axis=0)]))
    assert abs(m.energy - e) <= 1e-12
    assert abs(m.jerk - j) <= 1e-12


def test_wilson_examples():
    lo, hi = wilson_interval(0, 100, 1.96)
    assert lo == pytest.approx(0.0, abs=1e-12)
    assert hi == pytest.approx(0.0370, abs=5e-5)
    lo, hi = wilson_interval(50, 100, 1.96)
    assert lo == pytest.approx(0.4038, abs=5e-5)
    assert hi == pytest.approx(0.5962, abs=5e-5)
    _, hi_full = wilson_interval(100, 100, 1.96)
    assert hi_full == pytest.approx(1.0)
    with pytest.raises(ValueError):
        wilson_interval(5, 0)
    with pytest.raises(ValueError):
        wilson_interval(7, 5)


def test_wilson_coverage_on_synthetic_bernoulli():
    rng = make_rng(2718, 0)
    n, p = 200, 0.05
    covered = 0
    reps = 1000
    for _ in range(reps):
        k = rng.binomial(n, p)
        lo, hi = wilson_interval(int(k), n)
        covered += int(lo <= p <= hi)
    assert covered / reps >= 0.93


def test_aggregate_pools_counts():
    scn = Scenario.from_dict(base_doc(horizon=60))
    per = [compute_metrics(run_episode(scn, s), scn) for s in range(5)]
    agg = aggregate_metrics(per)
    assert agg.steps == 300
    assert agg.violations == sum(m.violations for m in per)
    assert agg.episodes == 5
    lo, hi = episode_violation_interval(agg)
    assert 0.0 <= lo <= hi <= 1.0


# ---------------------------------------------------------------------------
# sweep + persistence
# ---------------------------------------------------------------------------

def test_single_cell_sweep_equals_run_cell():
    scn = Scenario.from_dict(base_doc(horizon=50))
    table = sweep(scn, "kappa_grid", [2.0], episodes_per_cell=4, seed0=10)
    direct = run_cell(apply_overrides(scn, ["risk.kappa0=2.0", "risk.fixed_kappa=2.0"]),
                      4, 10)
    assert table.metrics[0].svr == direct.svr
    assert table.metrics[0].violations == direct.violations


def test_sweep_seed_derivation():
    scn = Scenario.from_dict(base_doc(horizon=40))
    t1 = sweep(scn, "noise_grid", [0.5, 1.0], episodes_per_cell=3, seed0=100)
    # cell 1 episodes use seeds 103..105: reproduce directly
    cell1 = run_cell(apply_overrides(scn, ["noise_scale=1.0"]), 3, 103)
    assert t1.metrics[1].violations == cell1.violations
    with pytest.raises(ValueError):
        sweep(scn, "kappa_grid", [], 1, 0)
    with pytest.raises(ValueError):
        sweep(scn, "bogus_axis", [1.0], 1, 0)


def test_trace_csv_schema(tmp_path):
    scn = Scenario.from_dict(base_doc(horizon=25))
    tr = run_episode(scn, 3)
    path = tmp_path / "trace.csv"
    write_trace_csv(tr, path)
    lines = path.read_text().strip().splitlines()
    header = lines[0].split(",")
    assert header == ["t", "state_0", "u_ref_0", "u_star_0", "h_c", "sigma_h",
                      "alpha", "kappa", "slack", "iters", "violation"]
    assert len(lines) == 26
    row = lines[1].split(",")
    assert float(row[0]) == 0.0
    assert row[-1] in ("0", "1")


def test_report_roundtrip(tmp_path):
    doc = {"metrics": {"svr": 0.1, "energy": 2.0}, "cells": None}
    write_report({"svr": 0.1}, tmp_path / "r.json", "json")
    loaded = json.loads((tmp_path / "r.json").read_text())
    assert loaded["svr"] == 0.1


def test_scenario_files_all_load(scenario_dir):
    for path in scenario_dir.glob("*.json"):
        if path.name == "team_headon.json":
            continue  # team schema, loaded by the team command
        scn = load_scenario(path)
        assert scn.horizon >= 1
