"""Multi-agent extension: pairwise barriers, team LSE, decentralized QPs.

Pairwise separation barriers h_ij = ||p_i - p_j||^2 - d_min^2 aggregate via
the same log-sum-exp operator into a team barrier; each agent solves a
local QP over its own control channels with constraint

    L_F h_team + L_G,i h_team u_i >= -rho_i

where rho_i absorbs distributed estimation error. Neighbor states are
exchanged synchronously once per control step, optionally with injected
Gaussian estimation noise; rho_i defaults to a multiple of that noise
level. A config flag re-enables the stochastic row terms (Ito + kappa
sigma_h) from the single-agent filter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .barriers import compose_lse
from .plants import make_plant, eval_dynamics, make_rng, sqrt_psd, em_increment
from .qp import build_qp, solve_qp, QPSolution


@dataclass(frozen=True)
class TeamScenario:
    n_agents: int = 2
    plant: str = "scalar_integrator"
    d_min: float = 0.5
    margin: float = 0.0                # enforcement buffer on top of d_min
    beta: float = 10.0
    rho: float = 0.0                   # estimation-error slack, >= 0
    est_noise_std: float = 0.0         # neighbor estimate noise
    rho_noise_mult: float = 3.0        # rho = mult * est_noise_std when rho unset
    sigma: float = 0.0                 # per-agent process noise variance
    dt: float = 0.02
    horizon: int = 200
    x0: tuple = (-2.0, 2.0)
    targets: tuple = (2.0, -2.0)
    gain: float = 1.0
    u_max: float = 10.0
    alpha: float = 1.0
    kappa: float = 0.0
    stochastic_terms: bool = False

    def __post_init__(self):
        if self.n_agents < 2:
            raise ValueError("team scenarios need at least two agents")
        if self.rho < 0:
            raise ValueError("rho must be nonnegative")

    @property
    def rho_effective(self) -> float:
        if self.rho > 0:
            return self.rho
        return self.rho_noise_mult * self.est_noise_std

    @property
    def d_enforce(self) -> float:
        return self.d_min + self.margin


def pair_barrier_value(p_i: np.ndarray, p_j: np.ndarray, d_min: float) -> float:
    d = np.asarray(p_i, dtype=float) - np.asarray(p_j, dtype=float)
    return float(d @ d) - d_min * d_min


def team_barrier(positions, pairs, beta: float, d_min: float) -> tuple[float, np.ndarray]:
    """LSE of the pairwise barriers over the given (i, j) pairs."""
    if not pairs:
        raise ValueError("at least one pair is required")
    vals = [pair_barrier_value(positions[i], positions[j], d_min) for i, j in pairs]
    return compose_lse(vals, beta)


def _team_row(agent: int, states, plants, pairs, scn: TeamScenario, t: float):
    """Constraint data for agent's local QP: drift L_F h_team over all agents
    (using the estimates it holds) and input row restricted to its own G."""
    positions = [np.asarray(s, dtype=float)[list(plants[k].pos_idx)] for k, s in enumerate(states)]
    h_team, rho_w = team_barrier(positions, pairs, scn.beta, scn.d_enforce)
    # gradient of the team barrier w.r.t. each agent's position block
    grads = [np.zeros(plants[k].n) for k in range(len(states))]
    for w, (i, j) in zip(rho_w, pairs):
        d = positions[i] - positions[j]
        gi = 2.0 * w * d
        grads[i][list(plants[i].pos_idx)] += gi
        grads[j][list(plants[j].pos_idx)] -= gi
    drift = 0.0
    for k, s in enumerate(states):
        f_k, _ = eval_dynamics(plants[k], np.asarray(s, dtype=float), t)
        drift += float(grads[k] @ f_k)
    _, g_own = eval_dynamics(plants[agent], np.asarray(states[agent], dtype=float), t)
    a_row = grads[agent] @ g_own
    return h_team, drift, a_row, grads


def decentralized_step(agent: int, states, u_ref_i, scn: TeamScenario, plants=None,
                       t: float = 0.0, warm: QPSolution | None = None,
                       sigma_own: np.ndarray | None = None) -> QPSolution:
    """Agent-local filter step from its view of all states (estimates for
    neighbors). Constraint: drift + A u_i >= -rho_i, i.e. A u_i >= b with
    b = -rho_i - drift (stochastic terms added when the flag is set)."""
    if plants is None:
        plants = [make_plant(scn.plant) for _ in range(len(states))]
    h_team, drift, a_row, grads = _team_row(agent, states, plants, _all_pairs(len(states)), scn, t)
    b = -scn.rho_effective - drift
    if scn.stochastic_terms and sigma_own is not None:
        g_i = grads[agent]
        var = float(g_i @ (np.asarray(sigma_own) @ g_i))
        b += scn.kappa * np.sqrt(max(var, 0.0)) + scn.alpha * (-h_team)
    n_u = plants[agent].n_u
    qp = build_qp(u_ref_i, None, np.ones(n_u), None,
                  [(np.atleast_1d(a_row), b)], bounds=([-scn.u_max] * n_u, [scn.u_max] * n_u),
                  row_weights=[np.inf], reg_eps=0.0)
    return solve_qp(qp, warm=warm)


def centralized_step(states, u_refs, scn: TeamScenario, plants=None, t: float = 0.0):
    """Oracle: one QP over the stacked controls with the full team row."""
    if plants is None:
        plants = [make_plant(scn.plant) for _ in range(len(states))]
    pairs = _all_pairs(len(states))
    positions = [np.asarray(s, dtype=float)[list(plants[k].pos_idx)] for k, s in enumerate(states)]
    h_team, rho_w = team_barrier(positions, pairs, scn.beta, scn.d_enforce)
    row_parts = []
    drift = 0.0
    for k, s in enumerate(states):
        grads = np.zeros(plants[k].n)
        for w, (i, j) in zip(rho_w, pairs):
            d = positions[i] - positions[j]
            if k == i:
                grads[list(plants[k].pos_idx)] += 2.0 * w * d
            elif k == j:
                grads[list(plants[k].pos_idx)] -= 2.0 * w * d
        f_k, g_k = eval_dynamics(plants[k], np.asarray(s, dtype=float), t)
        drift += float(grads @ f_k)
        row_parts.append(grads @ g_k)
    a_row = np.concatenate(row_parts)
    b = -scn.rho_effective - drift
    u_ref = np.concatenate([np.atleast_1d(u) for u in u_refs])
    n_tot = u_ref.shape[0]
    qp = build_qp(u_ref, None, np.ones(n_tot), None, [(a_row, b)],
                  bounds=([-scn.u_max] * n_tot, [scn.u_max] * n_tot),
                  row_weights=[np.inf], reg_eps=0.0)
    return solve_qp(qp), a_row, drift


def _all_pairs(n: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(n) for j in range(i + 1, n)]


@dataclass
class TeamTrace:
    t: np.ndarray
    states: np.ndarray        # H x N x n
    controls: np.ndarray      # H x N x n_u
    h_team: np.ndarray
    min_dist: np.ndarray

    @property
    def min_distance(self) -> float:
        return float(self.min_dist.min())


def run_team_episode(scn: TeamScenario, seed: int) -> TeamTrace:
    """Synchronous decentralized episode: exchange estimates, solve local QPs,
    step every agent with its own noise stream."""
    n_agents = scn.n_agents
    plants = [make_plant(scn.plant) for _ in range(n_agents)]
    n = plants[0].n
    n_u = plants[0].n_u
    rngs = [make_rng(seed, stream=10 + k) for k in range(n_agents)]
    est_rng = make_rng(seed, stream=5)
    states = [np.full(n, float(scn.x0[k])) if n == 1 else np.asarray(scn.x0[k], dtype=float)
              for k in range(n_agents)]
    targets = [np.atleast_1d(np.asarray(scn.targets[k], dtype=float)) for k in range(n_agents)]
    pairs = _all_pairs(n_agents)
    hh = scn.horizon
    trace = TeamTrace(np.arange(hh) * scn.dt, np.zeros((hh, n_agents, n)),
                      np.zeros((hh, n_agents, n_u)), np.zeros(hh), np.zeros(hh))
    sigma = scn.sigma * np.eye(n)
    ell = sqrt_psd(sigma)
    warms: list[QPSolution | None] = [None] * n_agents
    noise = [rngs[k].standard_normal((hh, n)) for k in range(n_agents)]
    for step in range(hh):
        t = step * scn.dt
        # synchronous estimate exchange with optional noise
        def view_for(agent):
            out = []
            for k, s in enumerate(states):
                if k == agent or scn.est_noise_std == 0.0:
                    out.append(s)
                else:
                    out.append(s + scn.est_noise_std * est_rng.standard_normal(n))
            return out

        views = [view_for(k) for k in range(n_agents)]
        controls = []
        for k in range(n_agents):
            u_ref = np.clip(scn.gain * (targets[k] - states[k][list(plants[k].pos_idx)][:n_u]),
                            -scn.u_max, scn.u_max)
            sol = decentralized_step(k, views[k], u_ref, scn, plants, t, warms[k],
                                     sigma_own=sigma if scn.stochastic_terms else None)
            warms[k] = sol
            controls.append(sol.u_star)
        positions = [states[k][list(plants[k].pos_idx)] for k in range(n_agents)]
        h_team, _ = team_barrier(positions, pairs, scn.beta, scn.d_min)
        dists = [float(np.linalg.norm(positions[i] - positions[j])) for i, j in pairs]
        trace.h_team[step] = h_team
        trace.min_dist[step] = min(dists)
        for k in range(n_agents):
            trace.states[step, k] = states[k]
            trace.controls[step, k] = controls[k]
            f_k, g_k = eval_dynamics(plants[k], states[k], t)
            states[k] = states[k] + em_increment(f_k, g_k, controls[k], ell, scn.dt, noise[k][step])
    return trace
