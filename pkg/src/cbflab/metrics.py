"""Episode metrics: violation rates with Wilson intervals, tracking error,
energy, jerk, and adaptation/recovery times."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def wilson_interval(k: int, n: int, z: float = 1.96) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion, clamped to [0, 1]."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0 <= k <= n:
        raise ValueError("k must lie in [0, n]")
    phat = k / n
    z2 = z * z
    denom = 1.0 + z2 / n
    center = phat + z2 / (2.0 * n)
    spread = z * np.sqrt(phat * (1.0 - phat) / n + z2 / (4.0 * n * n))
    lo = (center - spread) / denom
    hi = (center + spread) / denom
    return max(0.0, float(lo)), min(1.0, float(hi))


@dataclass
class Metrics:
    """Aggregates of one episode (or a pool of episodes).

    svr counts violating steps; violated flags whether the episode had any
    violation at all (the per-episode probability used by the invariance
    target). quarter_counts holds (violations, steps) per horizon quarter so
    pooled aggregation stays exact.
    """

    svr: float
    svr_ci: tuple[float, float]
    rmse: float
    energy: float
    jerk: float
    t_adapt: float
    t_recover: float
    quarter_rates: tuple
    violated: bool
    steps: int
    violations: int
    episodes: int = 1
    episodes_violated: int = 0
    quarter_counts: tuple = ()
    semantic_compliance: float = 1.0
    mean_iterations: float = 0.0
    solver_status_counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "svr": self.svr, "svr_ci_lo": self.svr_ci[0], "svr_ci_hi": self.svr_ci[1],
            "rmse": self.rmse, "energy": self.energy, "jerk": self.jerk,
            "t_adapt": self.t_adapt, "t_recover": self.t_recover,
            "quarter_rates": list(self.quarter_rates), "violated": bool(self.violated),
            "steps": self.steps, "violations": self.violations,
            "episodes": self.episodes, "episodes_violated": self.episodes_violated,
            "semantic_compliance": self.semantic_compliance,
            "mean_iterations": self.mean_iterations,
            "solver_status_counts": dict(self.solver_status_counts),
        }


def _window_ok(err_ok: np.ndarray, viol: np.ndarray, start: int, w: int):
    """First index >= start where both stay good for w consecutive steps."""
    good = err_ok & ~viol
    n = good.shape[0]
    run = 0
    for i in range(start, n):
        run = run + 1 if good[i] else 0
        if run >= w:
            return i - w + 1
    return None


def compute_metrics(trace, scenario, z: float = 1.96, window: int = 50) -> Metrics:
    """All metric fields from a completed trace.

    T_a is measured from each scheduled transition (noise-schedule boundary
    or context switch) to the first time the violation flag stays false and
    the tracking error stays under 2x the nominal steady-state RMSE for a
    full window; T_rec does the same from each disturbance event.
    """
    viol = trace.violation.astype(bool)
    n = viol.shape[0]
    k = int(viol.sum())
    err = trace.tracking_error
    u = trace.u_star
    energy = float(np.mean(np.sum(u * u, axis=1)))
    du = np.diff(u, axis=0)
    jerk = float(np.mean(np.sum(du * du, axis=1))) if du.shape[0] else 0.0
    rmse = float(np.sqrt(np.mean(err ** 2)))

    # steady-state threshold: 2x the RMSE over the calmest half of the episode
    half = max(1, n // 2)
    steady = float(np.sqrt(np.mean(np.sort(err ** 2)[:half])))
    thresh = 2.0 * max(steady, 1e-9)
    err_ok = err <= thresh

    dt = scenario.dt
    transitions = [seg.get("t0", 0.0) for seg in scenario.noise_schedule if seg.get("t0", 0.0) > 0]
    transitions += [sw.get("t", 0.0) for sw in scenario.context.get("schedule", [])
                    if sw.get("t", 0.0) > 0]
    t_a = []
    for t0 in transitions:
        idx = min(n - 1, int(np.ceil(t0 / dt)))
        hit = _window_ok(err_ok, viol, idx, window)
        if hit is not None:
            t_a.append((hit - idx) * dt)
    events = [ev.get("t", ev.get("t0", 0.0)) for ev in scenario.disturbances]
    t_rec = []
    for t0 in events:
        idx = min(n - 1, int(np.ceil(t0 / dt)))
        hit = _window_ok(err_ok, viol, idx, window)
        if hit is not None:
            t_rec.append((hit - idx) * dt)

    bounds = np.linspace(0, n, 5).astype(int)
    q_counts = tuple((int(viol[bounds[i]:bounds[i + 1]].sum()), int(bounds[i + 1] - bounds[i]))
                     for i in range(4))
    q_rates = tuple(c / max(1, m) for c, m in q_counts)

    status_counts: dict = {}
    for s in trace.status:
        status_counts[s] = status_counts.get(s, 0) + 1

    sem = trace.semantic_violation.astype(bool)
    return Metrics(
        svr=k / n,
        svr_ci=wilson_interval(k, n, z),
        rmse=rmse,
        energy=energy,
        jerk=jerk,
        t_adapt=float(np.mean(t_a)) if t_a else float("nan"),
        t_recover=float(np.mean(t_rec)) if t_rec else float("nan"),
        quarter_rates=q_rates,
        violated=bool(k > 0),
        steps=n,
        violations=k,
        episodes=1,
        episodes_violated=int(k > 0),
        quarter_counts=q_counts,
        semantic_compliance=1.0 - float(sem.mean()),
        mean_iterations=float(np.mean(trace.iterations)),
        solver_status_counts=status_counts,
    )


def aggregate_metrics(items: list[Metrics], z: float = 1.96) -> Metrics:
    """Pool per-episode metrics: step counts add, continuous metrics average."""
    if not items:
        raise ValueError("nothing to aggregate")
    steps = sum(m.steps for m in items)
    viol = sum(m.violations for m in items)
    episodes = sum(m.episodes for m in items)
    ep_viol = sum(m.episodes_violated for m in items)
    qc = [(0, 0)] * 4
    for m in items:
        counts = m.quarter_counts if m.quarter_counts else tuple((0, 0) for _ in range(4))
        qc = [(qc[i][0] + counts[i][0], qc[i][1] + counts[i][1]) for i in range(4)]
    q_rates = tuple(c / max(1, n) for c, n in qc)

    def _nanmean(vals):
        ok = [v for v in vals if not np.isnan(v)]
        return float(np.mean(ok)) if ok else float("nan")

    t_a = _nanmean([m.t_adapt for m in items])
    t_rec = _nanmean([m.t_recover for m in items])
    status: dict = {}
    for m in items:
        for key, cnt in m.solver_status_counts.items():
            status[key] = status.get(key, 0) + cnt
    return Metrics(
        svr=viol / steps,
        svr_ci=wilson_interval(viol, steps, z),
        rmse=float(np.mean([m.rmse for m in items])),
        energy=float(np.mean([m.energy for m in items])),
        jerk=float(np.mean([m.jerk for m in items])),
        t_adapt=t_a,
        t_recover=t_rec,
        quarter_rates=q_rates,
        violated=bool(ep_viol > 0),
        steps=steps,
        violations=viol,
        episodes=episodes,
        episodes_violated=ep_viol,
        quarter_counts=tuple(qc),
        semantic_compliance=float(np.mean([m.semantic_compliance for m in items])),
        mean_iterations=float(np.mean([m.mean_iterations for m in items])),
        solver_status_counts=status,
    )


def episode_violation_interval(metrics: Metrics, z: float = 1.96) -> tuple[float, float]:
    """Wilson interval of the per-episode violation probability."""
    return wilson_interval(metrics.episodes_violated, metrics.episodes, z)
