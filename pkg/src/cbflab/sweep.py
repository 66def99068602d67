"""Grids over kappa / noise scale / controller variants, plus persistence.

Seeds derive deterministically as seed0 + cell * episodes + index, so any
cell of any sweep can be reproduced in isolation. Episodes parallelize over
a worker pool when jobs > 1; the merge is ordered, so results match the
sequential run.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

from .episode import EpisodeTrace, run_episode
from .metrics import Metrics, aggregate_metrics, compute_metrics
from .scenario import Scenario, apply_overrides


@dataclass
class ReportTable:
    """One row of aggregated Metrics per sweep cell."""

    axis: str
    cells: list            # axis values
    metrics: list          # aggregated Metrics per cell

    def to_dict(self) -> dict:
        return {"axis": self.axis,
                "cells": [{"value": v, **m.to_dict()} for v, m in zip(self.cells, self.metrics)]}


def _episode_metrics(args):
    scn, seed = args
    trace = run_episode(scn, seed)
    return compute_metrics(trace, scn)


def run_cell(scn: Scenario, episodes: int, seed0: int, jobs: int = 1) -> Metrics:
    """Aggregate `episodes` runs of one scenario with derived seeds."""
    seeds = [seed0 + i for i in range(episodes)]
    if jobs > 1:
        import multiprocessing as mp
        with mp.Pool(jobs) as pool:
            per = pool.map(_episode_metrics, [(scn, s) for s in seeds])
    else:
        per = [_episode_metrics((scn, s)) for s in seeds]
    return aggregate_metrics(per)


def _cell_scenario(base: Scenario, axis: str, value) -> Scenario:
    if axis == "kappa_grid":
        return apply_overrides(base, [f"risk.kappa0={value}", f"risk.fixed_kappa={value}"])
    if axis == "noise_grid":
        return apply_overrides(base, [f"noise_scale={value}"])
    if axis == "variant_grid":
        return apply_overrides(base, [f"variant={json.dumps(value)}"])
    raise ValueError(f"unknown sweep axis {axis!r}")


def sweep(base: Scenario, axis: str, grid, episodes_per_cell: int, seed0: int,
          jobs: int = 1) -> ReportTable:
    """Per-cell aggregated metrics; seed for cell c, episode i is
    seed0 + c * episodes_per_cell + i."""
    if not list(grid):
        raise ValueError("sweep grid must be non-empty")
    cells = list(grid)
    out = []
    for c, value in enumerate(cells):
        scn = _cell_scenario(base, axis, value)
        out.append(run_cell(scn, episodes_per_cell, seed0 + c * episodes_per_cell, jobs))
    return ReportTable(axis, cells, out)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def trace_csv_path(outdir: Path, seed: int) -> Path:
    return Path(outdir) / "traces" / f"episode_{seed}.csv"


def write_trace_csv(trace: EpisodeTrace, path: Path) -> None:
    """Exact column layout: t, state..., u_ref..., u_star..., h_c, sigma_h,
    alpha, kappa, slack, iters, violation."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = trace.xi.shape[1]
    n_u = trace.u_ref.shape[1]
    header = (["t"] + [f"state_{i}" for i in range(n)] + [f"u_ref_{i}" for i in range(n_u)]
              + [f"u_star_{i}" for i in range(n_u)]
              + ["h_c", "sigma_h", "alpha", "kappa", "slack", "iters", "violation"])
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k in range(len(trace)):
            row = ([repr(float(trace.t[k]))]
                   + [repr(float(v)) for v in trace.xi[k]]
                   + [repr(float(v)) for v in trace.u_ref[k]]
                   + [repr(float(v)) for v in trace.u_star[k]]
                   + [repr(float(trace.h_c[k])), repr(float(trace.sigma_h[k])),
                      repr(float(trace.alpha[k])), repr(float(trace.kappa[k])),
                      repr(float(trace.slack[k])), str(int(trace.iterations[k])),
                      str(int(trace.violation[k]))])
            w.writerow(row)


def write_report(doc: dict, path: Path, fmt: str = "json") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    elif fmt == "csv":
        rows = doc.get("cells") or [doc.get("metrics", doc)]
        keys = sorted({k for r in rows for k in r if not isinstance(r[k], (dict, list))})
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(keys)
            for r in rows:
                w.writerow([r.get(k, "") for k in keys])
    else:
        raise ValueError(f"unknown report format {fmt!r}")
