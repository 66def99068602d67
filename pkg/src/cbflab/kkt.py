"""Implicit differentiation of the filter QP through its KKT system.

At a strictly complementary optimum with active rows A_act,

    H (u* - u_ref) - A_act^T lam = 0,      A_act u* = b_act,

so differentiating w.r.t. a parameter theta gives the bordered system

    [ H   -A_act^T ] [ du* ]   [ H du_ref + dA_act^T lam ]
    [ A_act   0    ] [ dlam] = [ db_act - dA_act u*      ].

Inactive rows contribute zero sensitivity. H is regularized by reg_eps I
for the solve, matching the forward pass. A central finite-difference
oracle is provided for validation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .qp import SafetyQP, QPSolution


class DegenerateActiveSetError(RuntimeError):
    """Active rows are linearly dependent or weakly active; sensitivity undefined."""


@dataclass(frozen=True)
class KKTSensitivity:
    """Jacobians of (u*, lam) w.r.t. a named parameter list.

    theta_spec items: ("u_ref", j) | ("b", i) | ("A", i, j) | ("alpha",) |
    ("kappa",). The alpha/kappa columns chain through the row offsets via
    db_dalpha / db_dkappa supplied by the caller (db_i/dalpha = -h_i,
    db_i/dkappa = sigma_h,i from the risk-aware row construction).
    """

    du_dtheta: np.ndarray       # n_u x n_theta
    dlam_dtheta: np.ndarray     # n_rows x n_theta (user rows only)
    theta_spec: tuple


def _active_blocks(qp: SafetyQP, sol: QPSolution, weak_tol: float):
    cmat, dvec = qp.combined()
    meta = qp.combined_meta()
    lam_full = np.zeros(cmat.shape[0])
    for idx in sol.active_set:
        kind, i = meta[idx]
        if kind == "row":
            lam_full[idx] = sol.lam[i]
    # bound-row multipliers recovered from stationarity: H(u-u_ref) = C_act^T lam_act
    act = list(sol.active_set)
    if act:
        heff = qp.H_eff
        rhs = heff @ (sol.u_star - qp.u_ref)
        n_act = cmat[act]
        lam_act, *_ = np.linalg.lstsq(n_act.T, rhs, rcond=None)
        lam_full[act] = lam_act
    # strictly complementary convention: weakly active rows are dropped
    strong = [i for i in act if lam_full[i] > weak_tol]
    return cmat, meta, strong, lam_full


def kkt_differentiate(qp: SafetyQP, sol: QPSolution, theta_spec: Sequence[tuple],
                      db_dalpha: np.ndarray | None = None,
                      db_dkappa: np.ndarray | None = None,
                      weak_tol: float = 1e-9) -> KKTSensitivity:
    """Differentiate the QP optimum w.r.t. the parameters in theta_spec.

    Requires sol.status == 'optimal' and linearly independent active rows;
    weakly active rows (lam <= weak_tol) are treated as inactive, the
    standard almost-everywhere convention. Raises DegenerateActiveSetError
    on rank-deficient active blocks.
    """
    if sol.status != "optimal":
        raise DegenerateActiveSetError(f"sensitivity undefined for status {sol.status!r}")
    if (sol.slack > 1e-10).any():
        raise DegenerateActiveSetError("sensitivity undefined with active slack")
    n = qp.n_u
    m = qp.n_rows
    heff = qp.H_eff
    cmat, meta, strong, lam_full = _active_blocks(qp, sol, weak_tol)
    k = len(strong)
    if k:
        a_act = cmat[strong]
        if np.linalg.matrix_rank(a_act, tol=1e-10) < k:
            raise DegenerateActiveSetError("active rows are linearly dependent")
    else:
        a_act = np.zeros((0, n))

    # bordered KKT matrix, factorized once and reused for all right-hand sides
    kkt = np.zeros((n + k, n + k))
    kkt[:n, :n] = heff
    kkt[:n, n:] = -a_act.T
    kkt[n:, :n] = a_act
    lu_piv = np.linalg.inv(kkt)  # small dense system; one inversion serves all columns

    row_pos = {}
    for j, idx in enumerate(strong):
        kind, i = meta[idx]
        if kind == "row":
            row_pos[i] = j

    n_theta = len(theta_spec)
    rhs = np.zeros((n + k, n_theta))
    for col, spec in enumerate(theta_spec):
        kind = spec[0]
        if kind == "u_ref":
            j = spec[1]
            rhs[:n, col] = heff[:, j]
        elif kind == "b":
            i = spec[1]
            if i in row_pos:
                rhs[n + row_pos[i], col] = 1.0
        elif kind == "A":
            i, j = spec[1], spec[2]
            if i in row_pos:
                # dA^T lam lands in the stationarity block, dA u* in the row block
                lam_i = lam_full[strong[row_pos[i]]]
                rhs[j, col] += lam_i
                rhs[n + row_pos[i], col] -= sol.u_star[j]
        elif kind == "alpha":
            if db_dalpha is None:
                raise ValueError("alpha sensitivity needs db_dalpha per row")
            for i in range(m):
                if i in row_pos:
                    rhs[n + row_pos[i], col] += db_dalpha[i]
        elif kind == "kappa":
            if db_dkappa is None:
                raise ValueError("kappa sensitivity needs db_dkappa per row")
            for i in range(m):
                if i in row_pos:
                    rhs[n + row_pos[i], col] += db_dkappa[i]
        else:
            raise ValueError(f"unknown theta spec {spec!r}")

    sens = lu_piv @ rhs
    du = sens[:n]
    dlam_strong = sens[n:]
    dlam = np.zeros((m, n_theta))
    for i, j in row_pos.items():
        dlam[i] = dlam_strong[j]
    if not (np.isfinite(du).all() and np.isfinite(dlam).all()):
        raise DegenerateActiveSetError("non-finite sensitivity")
    return KKTSensitivity(du, dlam, tuple(theta_spec))


def rows_sensitivity(qp: SafetyQP, sol: QPSolution) -> np.ndarray | None:
    """du*/db as an n_u x M matrix (zero columns for inactive rows).

    Lean path for the per-step meta gradient: with active constraint normals
    N (user rows + bounds), du*/db_i = Hinv N^T (N Hinv N^T)^{-1} e_pos(i).
    Returns None when the solution is slack-active, capped, or degenerate;
    alpha/kappa sensitivities chain through db_i/dtheta.
    """
    if sol.status != "optimal" or (sol.slack > 1e-10).any():
        return None
    m = qp.n_rows
    act = list(sol.active_set)
    out = np.zeros((qp.n_u, m))
    if not act:
        return out
    meta = qp.combined_meta()
    positions = [(j, meta[idx][1]) for j, idx in enumerate(act) if meta[idx][0] == "row"]
    if not positions:
        return out
    cmat, _ = qp.combined()
    nmat = cmat[act]
    b_all = qp.h_inv() @ nmat.T
    if len(act) == 1:
        denom = float(nmat[0] @ b_all[:, 0])
        if abs(denom) < 1e-14:
            return None
        out[:, positions[0][1]] = b_all[:, 0] / denom
        return out
    mmat = nmat @ b_all
    try:
        minv = np.linalg.inv(mmat)
    except np.linalg.LinAlgError:
        return None
    cols = b_all @ minv
    for j, i in positions:
        out[:, i] = cols[:, j]
    return out


def finite_diff(fn: Callable[[np.ndarray], np.ndarray], theta: np.ndarray,
                h: float = 1e-6) -> np.ndarray:
    """Central differences of a vector-valued fn, one column per coordinate."""
    if h <= 0:
        raise ValueError("h must be positive")
    theta = np.asarray(theta, dtype=float)
    f0 = np.atleast_1d(np.asarray(fn(theta), dtype=float))
    out = np.zeros((f0.shape[0], theta.shape[0]))
    for j in range(theta.shape[0]):
        tp = theta.copy()
        tm = theta.copy()
        tp[j] += h
        tm[j] -= h
        fp = np.atleast_1d(np.asarray(fn(tp), dtype=float))
        fm = np.atleast_1d(np.asarray(fn(tm), dtype=float))
        out[:, j] = (fp - fm) / (2.0 * h)
    return out
