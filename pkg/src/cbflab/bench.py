"""Solver timing: warm-started median/p95 solve time and iteration counts.

Generates a smooth trajectory of filter QPs at the real-time reference
size (n_u = 12, M = 8 rows by default): the row geometry rotates slowly and
the offsets breathe sinusoidally so a realistic, slowly-changing active set
emerges. Warm solves chain the previous solution; cold solves start fresh
on the identical instances.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .plants import make_plant, make_rng, eval_dynamics
from .qp import build_qp, solve_qp


@dataclass
class BenchResult:
    n_u: int
    n_rows: int
    solves: int
    median_ms: float
    p95_ms: float
    mean_iters_warm: float
    mean_iters_cold: float
    cold_median_ms: float

    def to_dict(self) -> dict:
        return {
            "n_u": self.n_u, "n_rows": self.n_rows, "solves": self.solves,
            "median_ms": self.median_ms, "p95_ms": self.p95_ms,
            "mean_iters_warm": self.mean_iters_warm, "mean_iters_cold": self.mean_iters_cold,
            "cold_median_ms": self.cold_median_ms,
        }


def make_instances(n_u: int, n_rows: int, steps: int, seed: int = 0):
    """Smooth sequence of (u_ref, rows) for a fixed H from the 12-input plant."""
    rng = make_rng(seed, stream=77)
    plant = make_plant("synthetic12")
    xi = rng.standard_normal(plant.n) * 0.3
    _, g = eval_dynamics(plant, xi, 0.0)
    g = g[:, :n_u]
    base_a = rng.standard_normal((n_rows, n_u))
    base_a /= np.linalg.norm(base_a, axis=1, keepdims=True)
    rot = rng.standard_normal((n_rows, n_u)) * 0.02
    u_ref0 = rng.standard_normal(n_u) * 0.5
    drift = rng.standard_normal(n_u) * 0.01
    out = []
    for k in range(steps):
        phase = 2.0 * np.pi * k / max(steps, 1)
        a = base_a + rot * np.sin(phase)
        # offsets chosen so a couple of rows are active most of the time
        b = -0.2 + 0.6 * np.sin(phase + np.arange(n_rows))
        u_ref = u_ref0 + drift * np.sin(phase) * 10.0
        out.append((u_ref, a, b))
    return g, out


def run_bench(n_u: int = 12, n_rows: int = 8, solves: int = 100_000, seed: int = 0,
              traj_steps: int = 1000) -> BenchResult:
    g, inst = make_instances(n_u, n_rows, traj_steps, seed)
    r_diag = np.ones(n_u)
    q_diag = 0.1 * np.ones(g.shape[0])
    bounds = ([-10.0] * n_u, [10.0] * n_u)

    def build(k):
        u_ref, a, b = inst[k % len(inst)]
        return build_qp(u_ref, g, r_diag, q_diag, list(zip(a, b)), bounds)

    # cold pass over the trajectory for the iteration comparison
    iters_cold = []
    cold_times = []
    for k in range(len(inst)):
        qp = build(k)
        t0 = time.perf_counter()
        sol = solve_qp(qp, warm=None)
        cold_times.append(time.perf_counter() - t0)
        iters_cold.append(sol.iterations)

    # warm-started chain, cycled until `solves` measurements accumulate
    times = np.empty(solves)
    iters_warm_traj = []
    warm = None
    for i in range(solves):
        qp = build(i)
        t0 = time.perf_counter()
        sol = solve_qp(qp, warm=warm)
        times[i] = time.perf_counter() - t0
        warm = sol
        if i < len(inst):
            iters_warm_traj.append(sol.iterations)

    return BenchResult(
        n_u=n_u, n_rows=n_rows, solves=solves,
        median_ms=float(np.median(times) * 1e3),
        p95_ms=float(np.percentile(times, 95) * 1e3),
        mean_iters_warm=float(np.mean(iters_warm_traj)),
        mean_iters_cold=float(np.mean(iters_cold)),
        cold_median_ms=float(np.median(cold_times) * 1e3),
    )
