"""Command-line entry point: run, sweep, ablate, gradcheck, bench, team.

Every command is reproducible from (scenario file, seed, overrides) alone.
Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .bench import run_bench
from .episode import run_episode
from .kkt import DegenerateActiveSetError, finite_diff, kkt_differentiate
from .metrics import aggregate_metrics, compute_metrics, episode_violation_interval
from .plants import make_rng
from .qp import build_qp, solve_qp
from .scenario import Scenario, ScenarioError, apply_overrides, load_scenario
from .sweep import sweep, trace_csv_path, write_report, write_trace_csv
from .team import TeamScenario, run_team_episode
from .metrics import wilson_interval

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

KAPPA_GRID = (0.5, 1.5, 3.0, 5.0)
NOISE_GRID = (0.0, 0.15, 0.25, 0.35)
ABLATION_VARIANTS = ("full", "no_stochastic", "det_cbf", "no_meta", "fixed_params")


def _outdir(args) -> Path:
    if args.output:
        return Path(args.output)
    return Path(os.environ.get("CBFLAB_OUT", "out"))


def _load(args) -> Scenario:
    scn = load_scenario(args.scenario)
    if args.override:
        scn = apply_overrides(scn, args.override)
    return scn


def cmd_run(args) -> int:
    scn = _load(args)
    outdir = _outdir(args)
    per = []
    for i in range(args.episodes):
        seed = args.seed + i
        trace = run_episode(scn, seed)
        per.append(compute_metrics(trace, scn))
        if not args.no_traces:
            write_trace_csv(trace, trace_csv_path(outdir, seed))
    agg = aggregate_metrics(per)
    ep_ci = episode_violation_interval(agg)
    report = {
        "command": "run", "scenario": scn.name, "seed": args.seed,
        "episodes": args.episodes, "metrics": agg.to_dict(),
        "episode_violation_ci": list(ep_ci),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    write_report(report, outdir / "report.json" if args.format == "json" else outdir / "report.csv",
                 args.format)
    print(json.dumps({"svr": agg.svr, "svr_ci": list(agg.svr_ci),
                      "episode_violation_ci": list(ep_ci)}, sort_keys=True))
    return EXIT_OK


def cmd_sweep(args) -> int:
    scn = _load(args)
    grids = {"kappa_grid": KAPPA_GRID, "noise_grid": NOISE_GRID, "variant_grid": ABLATION_VARIANTS}
    grid = grids[args.axis]
    if args.grid:
        if args.axis == "variant_grid":
            grid = [v.strip().strip('"') for v in args.grid.split(",")]
        else:
            grid = [float(v) for v in args.grid.split(",")]
    table = sweep(scn, args.axis, grid, args.episodes, args.seed, jobs=args.jobs)
    report = {"command": "sweep", "scenario": scn.name, "seed": args.seed,
              "episodes_per_cell": args.episodes,
              "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"), **table.to_dict()}
    out = _outdir(args) / ("sweep.json" if args.format == "json" else "sweep.csv")
    write_report(report, out, args.format)
    for value, m in zip(table.cells, table.metrics):
        print(f"{args.axis}={value}: svr={m.svr:.6f} ci=({m.svr_ci[0]:.6f},{m.svr_ci[1]:.6f}) "
              f"energy={m.energy:.4f} rmse={m.rmse:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    args.axis = "variant_grid"
    args.grid = args.grid or ",".join(json.dumps(v) for v in ABLATION_VARIANTS)
    return cmd_sweep(args)


def cmd_gradcheck(args) -> int:
    """Compare KKT implicit gradients to central finite differences."""
    rng = make_rng(args.seed, stream=3)
    worst = 0.0
    skipped = 0
    checked = 0
    rows_out = []
    for case in range(args.instances):
        n = int(rng.integers(1, 5))
        m = int(rng.integers(1, 4))
        r_diag = 0.5 + rng.random(n) * 2.0
        u_ref = rng.standard_normal(n)
        a = rng.standard_normal((m, n))
        b = a @ u_ref + rng.standard_normal(m) * 0.5  # mix of active/inactive rows
        qp = build_qp(u_ref, None, r_diag, None, list(zip(a, b)), reg_eps=1e-4)
        sol = solve_qp(qp)
        if sol.status != "optimal":
            skipped += 1
            continue
        lam_act = sol.lam[sol.lam > 1e-7]
        resid = np.abs(a @ sol.u_star - b)
        weak = ((sol.lam <= 1e-7) & (resid < 1e-7)).any()
        if weak:
            skipped += 1
            continue
        spec = [("b", i) for i in range(m)]
        try:
            sens = kkt_differentiate(qp, sol, spec)
        except DegenerateActiveSetError:
            skipped += 1
            continue

        def u_of_b(bvec):
            qq = build_qp(u_ref, None, r_diag, None, list(zip(a, bvec)), reg_eps=1e-4)
            return solve_qp(qq).u_star

        fd = finite_diff(u_of_b, b, h=1e-6)
        denom = np.maximum(1.0, np.abs(fd) * 10.0)
        err = float(np.max(np.abs(sens.du_dtheta - fd) / denom))
        worst = max(worst, err)
        checked += 1
        rows_out.append((case, err))
    print(f"gradcheck: {checked} checked, {skipped} skipped-degenerate, max rel err {worst:.3e}")
    for case, err in rows_out[:10]:
        print(f"  case {case}: max rel err {err:.3e}")
    return EXIT_OK if worst <= args.tol else EXIT_RUNTIME


def cmd_bench(args) -> int:
    res = run_bench(n_u=args.n_u, n_rows=args.rows, solves=args.solves, seed=args.seed)
    print(json.dumps(res.to_dict(), indent=2, sort_keys=True))
    out = _outdir(args) / "bench.json"
    write_report(res.to_dict(), out, "json")
    print(f"median {res.median_ms:.4f} ms vs 1.3 ms budget; "
          f"warm iters {res.mean_iters_warm:.2f} vs cold {res.mean_iters_cold:.2f}")
    return EXIT_OK


DEFAULT_TEAM = dict(n_agents=2, d_min=0.5, margin=0.25, rho=0.0, est_noise_std=0.02,
                    sigma=0.002, dt=0.02, horizon=400, x0=(-2.0, 2.0), targets=(2.0, -2.0),
                    gain=1.0, u_max=10.0, alpha=2.0, kappa=3.0, stochastic_terms=True)


def cmd_team(args) -> int:
    doc = dict(DEFAULT_TEAM)
    if args.scenario:
        path = Path(args.scenario)
        if not path.exists():
            raise ScenarioError(f"scenario file not found: {path}")
        doc.update(json.loads(path.read_text()))
    scn = TeamScenario(**{k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()})
    successes = 0
    min_d = []
    for i in range(args.episodes):
        trace = run_team_episode(scn, args.seed + i)
        ok = trace.min_distance >= scn.d_min
        successes += int(ok)
        min_d.append(trace.min_distance)
    lo, hi = wilson_interval(successes, args.episodes)
    report = {"command": "team", "episodes": args.episodes, "successes": successes,
              "success_rate": successes / args.episodes, "wilson_lo": lo, "wilson_hi": hi,
              "min_distance": float(np.min(min_d)),
              "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S")}
    write_report(report, _outdir(args) / "team.json", "json")
    print(json.dumps({k: report[k] for k in ("success_rate", "wilson_lo", "min_distance")},
                     sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cbflab",
                                description="stochastic CBF safety-filter simulation lab")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, scenario_required=True):
        if scenario_required:
            sp.add_argument("--scenario", required=True, help="scenario JSON path")
        else:
            sp.add_argument("--scenario", default=None)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--episodes", type=int, default=100)
        sp.add_argument("--output", default=None, help="output dir (default $CBFLAB_OUT or ./out)")
        sp.add_argument("--override", action="append", default=[],
                        help="key=value with dotted paths into the scenario")
        sp.add_argument("--format", choices=("csv", "json"), default="json")
        sp.add_argument("--jobs", type=int, default=1)

    sp = sub.add_parser("run", help="run episodes of one scenario")
    common(sp)
    sp.add_argument("--no-traces", action="store_true", help="skip per-episode trace CSVs")
    sp.set_defaults(fn=cmd_run)

    sp = sub.add_parser("sweep", help="grid sweep over kappa/noise/variants")
    common(sp)
    sp.add_argument("--axis", choices=("kappa_grid", "noise_grid", "variant_grid"),
                    default="kappa_grid")
    sp.add_argument("--grid", default=None, help="comma-separated grid override")
    sp.set_defaults(fn=cmd_sweep, episodes=2000)  # CI-driven default per cell

    sp = sub.add_parser("ablate", help="controller-variant ablation sweep")
    common(sp)
    sp.add_argument("--grid", default=None)
    sp.set_defaults(fn=cmd_ablate, episodes=2000)

    sp = sub.add_parser("gradcheck", help="KKT gradient vs finite differences")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--instances", type=int, default=100)
    sp.add_argument("--tol", type=float, default=1e-5)
    sp.add_argument("--output", default=None)
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("bench", help="QP solver timing at n_u=12, M=8")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n-u", type=int, default=12, dest="n_u")
    sp.add_argument("--rows", type=int, default=8)
    sp.add_argument("--solves", type=int, default=100_000)
    sp.add_argument("--output", default=None)
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("team", help="two-agent separation episodes")
    common(sp, scenario_required=False)
    sp.set_defaults(fn=cmd_team)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ScenarioError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TypeError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failures map to exit 3
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
