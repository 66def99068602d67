"""Strictly convex safety-filter QP: construction and dense active-set solve.

The filter solves

    min_u 0.5 (u - u_ref)^T H (u - u_ref) + sum_i w_i s_i
    s.t.  A_i u + s_i >= b_i,  s_i >= 0,  lb <= u <= ub

with H = R + G^T Q G (+ reg_eps I during inversion), per-row slack weights
w_i (np.inf marks a slack-exempt row; bounds are never slackened). The
solver is a dual active-set method in the Goldfarb-Idnani style: it starts
from the unconstrained optimum, adds violated constraints one at a time
while keeping the multipliers nonnegative, and reuses the Cholesky factor
of H across iterations. Feasible problems are solved exactly with zero
slack; only on hard infeasibility does a second phase introduce slack
variables on the eligible rows.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .barriers import CompositeBarrier, composite_stats, single_stats, constraint_row
from .plants import eval_dynamics

_FEAS_TOL = 1e-11
_SLACK_TOL = 1e-10
MAX_ITER = 20  # solver iteration cap


class QPBuildError(ValueError):
    """H not positive definite after regularization, or inconsistent shapes."""


_PD_CACHE: dict = {}
_HINV_CACHE: dict = {}


class InfeasibleQPError(RuntimeError):
    """The slack-exempt constraint system is itself infeasible."""


@dataclass(frozen=True)
class SafetyQP:
    """Immutable QP data. H is the raw R + G^T Q G; solving adds reg_eps I."""

    H: np.ndarray
    u_ref: np.ndarray
    rows_a: np.ndarray      # M x n_u
    rows_b: np.ndarray      # M
    lb: np.ndarray
    ub: np.ndarray
    slack_weight: float = 1e4
    reg_eps: float = 1e-4
    row_weights: np.ndarray = None  # per-row slack weight, np.inf = exempt

    @property
    def n_u(self) -> int:
        return self.u_ref.shape[0]

    @property
    def n_rows(self) -> int:
        return self.rows_a.shape[0]

    @property
    def H_eff(self) -> np.ndarray:
        return self.H + self.reg_eps * np.eye(self.n_u)

    def h_inv(self) -> np.ndarray:
        """Inverse of H_eff, cached across instances sharing the same H."""
        key = (self.H.tobytes(), self.reg_eps)
        cached = _HINV_CACHE.get(key)
        if cached is None:
            cached = np.linalg.inv(self.H_eff)
            if len(_HINV_CACHE) > 64:
                _HINV_CACHE.clear()
            _HINV_CACHE[key] = cached
        return cached

    def combined(self) -> tuple[np.ndarray, np.ndarray]:
        """All inequality rows C u >= d: user rows, then lb rows, then ub rows."""
        cached = self.__dict__.get("_combined")
        if cached is not None:
            return cached
        n = self.n_u
        parts_c = [self.rows_a] if self.n_rows else []
        parts_d = [self.rows_b] if self.n_rows else []
        eye = np.eye(n)
        fin = np.isfinite(self.lb)
        if fin.any():
            parts_c.append(eye[fin])
            parts_d.append(self.lb[fin])
        fin2 = np.isfinite(self.ub)
        if fin2.any():
            parts_c.append(-eye[fin2])
            parts_d.append(-self.ub[fin2])
        if not parts_c:
            out = (np.zeros((0, n)), np.zeros(0))
        else:
            out = (np.vstack(parts_c), np.concatenate(parts_d))
        object.__setattr__(self, "_combined", out)
        return out

    def combined_meta(self) -> list[tuple[str, int]]:
        """Kind tag per combined row: ('row', i), ('lb', j) or ('ub', j)."""
        cached = self.__dict__.get("_meta")
        if cached is not None:
            return cached
        meta: list[tuple[str, int]] = [("row", i) for i in range(self.n_rows)]
        meta += [("lb", int(j)) for j in np.flatnonzero(np.isfinite(self.lb))]
        meta += [("ub", int(j)) for j in np.flatnonzero(np.isfinite(self.ub))]
        object.__setattr__(self, "_meta", meta)
        return meta


@dataclass(frozen=True)
class QPSolution:
    """Primal/dual solution with the active set retained for warm starts."""

    u_star: np.ndarray
    lam: np.ndarray          # multipliers of the user rows
    slack: np.ndarray        # per user row, all zero unless hard-infeasible
    iterations: int
    status: str              # optimal | slack_active | max_iter
    active_set: tuple        # indices into combined() rows
    infeasible_hard: bool = False


def build_qp(u_ref, g, r_diag, q_diag, rows, bounds=None, slack_weight: float = 1e4,
             reg_eps: float = 1e-4, row_weights=None) -> SafetyQP:
    """Assemble the filter QP with H = R + G^T Q G.

    rows is a list of (A_i, b_i); bounds is (lb, ub) arrays or None for an
    unbounded input. row_weights gives per-row slack weights (np.inf =
    slack-exempt); default: every row eligible at slack_weight.
    """
    u_ref = np.atleast_1d(np.asarray(u_ref, dtype=float))
    n = u_ref.shape[0]
    r = np.atleast_1d(np.asarray(r_diag, dtype=float))
    if (r <= 0).any():
        raise QPBuildError("R diagonal must be strictly positive")
    h = np.diag(r).astype(float)
    if q_diag is not None:
        q = np.atleast_1d(np.asarray(q_diag, dtype=float))
        if (q < 0).any():
            raise QPBuildError("Q diagonal must be nonnegative")
        if q.any():
            gm = np.atleast_2d(np.asarray(g, dtype=float))
            h = h + gm.T @ (q[:, None] * gm)
    h = 0.5 * (h + h.T)
    key = (h.tobytes(), reg_eps)
    if key not in _PD_CACHE:
        try:
            np.linalg.cholesky(h + reg_eps * np.eye(n))
        except np.linalg.LinAlgError:
            raise QPBuildError("H + reg_eps I is not positive definite") from None
        if len(_PD_CACHE) > 64:
            _PD_CACHE.clear()
        _PD_CACHE[key] = True
    if rows:
        rows_a = np.vstack([np.atleast_1d(np.asarray(a, dtype=float)) for a, _ in rows])
        rows_b = np.array([float(b) for _, b in rows])
    else:
        rows_a = np.zeros((0, n))
        rows_b = np.zeros(0)
    if bounds is None:
        lb = np.full(n, -np.inf)
        ub = np.full(n, np.inf)
    else:
        lb = np.asarray(bounds[0], dtype=float) * np.ones(n)
        ub = np.asarray(bounds[1], dtype=float) * np.ones(n)
        if (lb > ub).any():
            raise QPBuildError("lower bound exceeds upper bound")
    if row_weights is None:
        w = np.full(rows_a.shape[0], float(slack_weight))
    else:
        w = np.asarray(row_weights, dtype=float) * np.ones(rows_a.shape[0])
        if (w <= 0).any():
            raise QPBuildError("row slack weights must be positive (np.inf = exempt)")
    if slack_weight <= 0:
        raise QPBuildError("slack_weight must be positive")
    return SafetyQP(h, u_ref, rows_a, rows_b, lb, ub, float(slack_weight), float(reg_eps), w)


# ---------------------------------------------------------------------------
# dual active-set core
# ---------------------------------------------------------------------------

def _equality_solution(x_uc, hinv, cmat, dvec, w_idx):
    """Optimum subject to the rows in w_idx as equalities; returns (x, lam)."""
    if not w_idx:
        return x_uc.copy(), np.zeros(0)
    nmat = cmat[w_idx].T                      # n x k
    bmat = hinv @ nmat                        # n x k
    mmat = nmat.T @ bmat                      # k x k
    resid = dvec[list(w_idx)] - cmat[w_idx] @ x_uc
    lam = np.linalg.solve(mmat, resid)
    return x_uc + bmat @ lam, lam


def _dual_active_set(hinv, x_uc, cmat, dvec, warm=None, max_iter=MAX_ITER):
    """Goldfarb-Idnani dual active-set loop.

    Returns (x, lam_full, active_list, iterations, status, exact) where
    status is 'optimal', 'infeasible', or 'max_iter'; lam_full holds
    multipliers per combined row; exact marks solutions that came straight
    from an equality solve (no stepping drift, polish unnecessary).
    """
    mc = cmat.shape[0]
    x = x_uc.copy()
    active: list[int] = []
    lam = np.zeros(mc)
    iters = 0
    exact = True  # x still comes straight from an equality solve

    # warm start: restore the previous active set as a valid dual-feasible
    # state (drop rows whose multipliers come out negative)
    if warm:
        cand = [i for i in warm if 0 <= i < mc]
        while cand:
            try:
                x_try, lam_try = _equality_solution(x_uc, hinv, cmat, dvec, cand)
            except np.linalg.LinAlgError:
                cand = []
                break
            if (lam_try >= -_FEAS_TOL).all():
                x = x_try
                active = list(cand)
                lam[:] = 0.0
                lam[cand] = np.maximum(lam_try, 0.0)
                break
            cand.pop(int(np.argmin(lam_try)))
            iters += 1
            if iters >= max_iter:
                break
        warm_set = set(warm)
    else:
        warm_set = set()

    while True:
        s = cmat @ x - dvec
        s[active] = 0.0
        viol = s < -_FEAS_TOL * (1.0 + np.abs(dvec))
        if not viol.any():
            return x, lam, active, iters, "optimal", exact
        if iters >= max_iter:
            return x, lam, active, iters, "max_iter", exact
        exact = False
        cand_idx = np.flatnonzero(viol)
        preferred = [i for i in cand_idx if i in warm_set and i not in active]
        if preferred:
            p = preferred[0]
        else:
            p = int(cand_idx[np.argmin(s[cand_idx])])
        n_p = cmat[p]
        lam_p = 0.0

        while True:
            # step directions for constraint p given the current active set
            hc = hinv @ n_p
            if active:
                nmat = cmat[active].T
                bmat = hinv @ nmat
                mmat = nmat.T @ bmat
                try:
                    r = np.linalg.solve(mmat, nmat.T @ hc)
                except np.linalg.LinAlgError:
                    return x, lam, active, iters, "max_iter", False
                z = hc - bmat @ r
            else:
                r = np.zeros(0)
                z = hc

            # partial (dual blocking) step
            t1 = np.inf
            k_block = -1
            if active:
                pos = r > _FEAS_TOL
                if pos.any():
                    ratios = np.where(pos, lam[active] / np.where(pos, r, 1.0), np.inf)
                    j = int(np.argmin(ratios))
                    t1 = float(ratios[j])
                    k_block = j
            # full step
            znp = float(z @ n_p)
            sp = float(n_p @ x - dvec[p])
            t2 = -sp / znp if znp > _FEAS_TOL else np.inf

            if not np.isfinite(t1) and not np.isfinite(t2):
                return x, lam, active, iters, "infeasible", False
            t = min(t1, t2)
            if np.isfinite(t2):
                x = x + t * z
            if active:
                lam[active] -= t * r
            lam_p += t
            iters += 1
            if t2 <= t1 and np.isfinite(t2):
                active.append(p)
                lam[p] = lam_p
                break
            # drop the blocking constraint and continue working on p
            dropped = active.pop(k_block)
            lam[dropped] = 0.0
            if iters >= max_iter:
                return x, lam, active, iters, "max_iter", False


def _polish(x_uc, hinv, cmat, dvec, active):
    """Exact KKT re-solve for the final active set (removes stepping drift)."""
    if not active:
        return x_uc.copy(), np.zeros(0)
    try:
        return _equality_solution(x_uc, hinv, cmat, dvec, list(active))
    except np.linalg.LinAlgError:
        return None, None


def _solve_hard(qp: SafetyQP, warm_active, max_iter):
    hinv = qp.h_inv()
    cmat, dvec = qp.combined()
    x, lam_full, active, iters, status, exact = _dual_active_set(
        hinv, qp.u_ref.copy(), cmat, dvec, warm=warm_active, max_iter=max_iter)
    if status == "optimal" and not exact:
        xp, lamp = _polish(qp.u_ref, hinv, cmat, dvec, active)
        if xp is not None and (lamp >= -1e-9).all():
            x = xp
            lam_full = np.zeros(cmat.shape[0])
            lam_full[active] = np.maximum(lamp, 0.0)
    return x, lam_full, active, iters, status, cmat


def _solve_with_slack(qp: SafetyQP, eligible, budget):
    """Phase 2: slack variables on the eligible rows, tiny curvature, exact polish."""
    n, m = qp.n_u, qp.n_rows
    el = np.asarray(sorted(eligible), dtype=int)
    k = el.size
    slot = {int(row): j for j, row in enumerate(el)}
    w_el = np.where(np.isfinite(qp.row_weights[el]), qp.row_weights[el], qp.slack_weight)
    delta = 1e-6 * float(np.max(w_el)) if k else 1.0

    hinv_u = qp.h_inv()
    hinv = np.zeros((n + k, n + k))
    hinv[:n, :n] = hinv_u
    hinv[n:, n:] = np.eye(k) / delta

    cmat_u, dvec_u = qp.combined()
    mc = cmat_u.shape[0]
    cmat = np.zeros((mc + k, n + k))
    cmat[:mc, :n] = cmat_u
    for row, j in slot.items():
        cmat[row, n + j] = 1.0          # A_i u + s_i >= b_i
        cmat[mc + j, n + j] = 1.0       # s_i >= 0
    dvec = np.concatenate([dvec_u, np.zeros(k)])

    # unconstrained optimum of the augmented objective
    z_uc = np.concatenate([qp.u_ref, -w_el / delta])
    z, lam_full, active, iters, status, _exact = _dual_active_set(
        hinv, z_uc, cmat, dvec, warm=None, max_iter=budget)
    if status == "infeasible":
        raise InfeasibleQPError("slack-exempt rows are mutually infeasible")

    u = z[:n]
    s_all = np.zeros(m)
    if k:
        s_all[el] = np.maximum(z[n:], 0.0)

    # exact polish of the declared l1-penalty objective: slacked rows exert
    # force w_i A_i^T; tight rows stay as equalities
    slacked = [int(i) for i in el if s_all[i] > _SLACK_TOL]
    eq_rows = [i for i in active if i < mc and not (i in slacked)]
    force = np.zeros(n)
    for i in slacked:
        wi = qp.row_weights[i] if np.isfinite(qp.row_weights[i]) else qp.slack_weight
        force += wi * cmat_u[i]
    x_uc = qp.u_ref + hinv_u @ force
    xp, lamp = _polish(x_uc, hinv_u, cmat_u, dvec_u, eq_rows) if eq_rows else (x_uc.copy(), np.zeros(0))
    if xp is not None:
        ok = True
        lam_u = np.zeros(mc)
        for j, i in enumerate(eq_rows):
            wi = qp.row_weights[i] if (i < m and np.isfinite(qp.row_weights[i])) else np.inf
            if lamp[j] < -1e-9 or lamp[j] > wi + 1e-6 * max(1.0, wi if np.isfinite(wi) else 1.0):
                ok = False
                break
            lam_u[i] = max(lamp[j], 0.0)
        if ok:
            feas = cmat_u @ xp - dvec_u
            s_new = np.zeros(m)
            for i in slacked:
                s_new[i] = max(0.0, -feas[i])
                lam_u[i] = qp.row_weights[i] if np.isfinite(qp.row_weights[i]) else qp.slack_weight
            exempt_bad = [i for i in range(mc) if i not in slacked and feas[i] < -1e-8]
            if not exempt_bad:
                u = xp
                s_all = s_new
                lam_full = np.zeros(mc + k)
                lam_full[:mc] = lam_u
                active = eq_rows + slacked
    active = [i for i in active if i < mc]
    return u, s_all, lam_full[:m].copy(), active, iters, status


def solve_qp(qp: SafetyQP, warm: QPSolution | None = None, max_iter: int = MAX_ITER) -> QPSolution:
    """Solve the filter QP; slack enters only if the hard problem is infeasible.

    Returns status 'optimal' (all slack <= 1e-10), 'slack_active', or
    'max_iter' (iteration cap hit; best iterate returned). If even the
    slack-exempt rows conflict, all non-bound rows are slackened as a last
    resort and the solution is flagged infeasible_hard.
    """
    warm_active = list(warm.active_set) if warm is not None else None
    x, lam_full, active, iters, status, cmat = _solve_hard(qp, warm_active, max_iter)
    m = qp.n_rows
    if status != "infeasible":
        lam_rows = lam_full[:m].copy() if m else np.zeros(0)
        return QPSolution(x, lam_rows, np.zeros(m), iters,
                          "optimal" if status == "optimal" else "max_iter",
                          tuple(active))

    eligible = [i for i in range(m) if np.isfinite(qp.row_weights[i])]
    infeasible_hard = False
    try:
        u, s_all, lam_rows, active2, it2, st2 = _solve_with_slack(qp, eligible, max_iter)
    except InfeasibleQPError:
        if len(eligible) == m:
            raise
        infeasible_hard = True
        u, s_all, lam_rows, active2, it2, st2 = _solve_with_slack(qp, list(range(m)), max_iter)
    iters += it2
    if st2 == "max_iter":
        status_out = "max_iter"
    else:
        status_out = "slack_active" if (s_all > _SLACK_TOL).any() else "optimal"
    return QPSolution(u, lam_rows, s_all, iters, status_out, tuple(active2), infeasible_hard)


def solve_filter_step(xi, plant, composite: CompositeBarrier, alpha: float, kappa: float,
                      u_ref, sigma, *, mode: str = "composite", r_diag=None, q_diag=None,
                      bounds=None, slack_weight: float = 1e4, reg_eps: float = 1e-4,
                      row_weights=None, extra_margin: float = 0.0, use_ito: bool = True,
                      use_sigma: bool = True, t: float = 0.0, warm: QPSolution | None = None):
    """One end-to-end filter evaluation: stats -> rows -> QP -> solution.

    mode 'composite' builds one row from the LSE composite; 'per_constraint'
    builds one row per member barrier. Returns (solution, stats_list, qp).
    """
    f, g = eval_dynamics(plant, xi, t)
    if mode == "composite":
        stats_list = [composite_stats(composite, xi, f, g, sigma)]
        weights = None if row_weights is None else np.asarray(row_weights, dtype=float)[:1]
    elif mode == "per_constraint":
        stats_list = [single_stats(b, xi, f, g, sigma) for b in composite.members]
        weights = row_weights
    else:
        raise ValueError("mode must be 'composite' or 'per_constraint'")
    if not use_ito or not use_sigma:
        stats_list = [replace(s, ito=s.ito if use_ito else 0.0,
                              sigma_h=s.sigma_h if use_sigma else 0.0) for s in stats_list]
    rows = []
    for s in stats_list:
        a_row, b_val = constraint_row(s, alpha, kappa)
        rows.append((a_row, b_val + extra_margin))
    if r_diag is None:
        r_diag = np.ones(plant.n_u)
    qp = build_qp(u_ref, g, r_diag, q_diag, rows, bounds, slack_weight, reg_eps, weights)
    sol = solve_qp(qp, warm=warm)
    return sol, stats_list, qp
