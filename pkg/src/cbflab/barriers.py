"""Barrier functions, the log-sum-exp composite, and stochastic barrier stats.

Each atomic barrier supplies exact value/gradient/Hessian so the diffusion
correction 0.5 Tr(H_h Sigma) and the barrier deviation sigma_h =
sqrt(grad^T Sigma grad) can be evaluated analytically. The composite is the
smooth under-approximation of the minimum,

    h_c = -(1/beta) log sum_i exp(-beta h_i),

with softmax selection weights rho_i = exp(-beta h_i) / sum_j exp(-beta h_j).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

HARD = "hard_physical"
SOFT = "soft_semantic"


@dataclass(frozen=True)
class Barrier:
    """One safety constraint h(xi) >= 0 with exact derivatives.

    eval(xi) returns (h, grad, hess) over the full state dimension; grad and
    hess must be the analytic derivatives of h (checked against finite
    differences in the test suite).
    """

    id: str
    role: str
    eval: Callable[[np.ndarray], tuple[float, np.ndarray, np.ndarray]]
    confidence: float = 1.0

    def __post_init__(self):
        if self.role not in (HARD, SOFT):
            raise ValueError(f"role must be {HARD!r} or {SOFT!r}, got {self.role!r}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")


def _augment_quadratic(base_id: str, role: str, confidence: float, n: int,
                       idx: np.ndarray, h0, grad0, hess0: np.ndarray,
                       vel_idx, velocity_gain: float) -> Barrier:
    """Velocity-aware lift of a constant-Hessian position barrier.

    For position barriers on double-integrator-style plants the input row
    L_G h vanishes (relative degree two); the augmented form

        h~(xi) = h(p) + kv * grad_p h(p)^T v

    restores control authority and keeps exact derivatives because hess_p h
    is constant: grad = [grad0 + kv H0 v, kv grad0], hess blocks
    [[H0, kv H0], [kv H0, 0]].
    """
    kv = float(velocity_gain)
    if kv == 0.0 or vel_idx is None:
        def ev(xi):
            p = xi[idx]
            grad = np.zeros(n)
            grad[idx] = grad0(p)
            hess = np.zeros((n, n))
            hess[np.ix_(idx, idx)] = hess0
            return h0(p), grad, hess

        return Barrier(base_id, role, ev, confidence)

    vdx = np.asarray(vel_idx, dtype=int)[: idx.size]
    hess_t = np.zeros((n, n))
    hess_t[np.ix_(idx, idx)] = hess0
    hess_t[np.ix_(idx, vdx)] += kv * hess0
    hess_t[np.ix_(vdx, idx)] += kv * hess0

    def ev(xi):
        p = xi[idx]
        v = xi[vdx]
        g0 = grad0(p)
        grad = np.zeros(n)
        grad[idx] = g0 + kv * (hess0 @ v)
        grad[vdx] += kv * g0
        return h0(p) + kv * float(g0 @ v), grad, hess_t

    return Barrier(base_id, role, ev, confidence)


def halfspace(index: int, offset: float, n: int, *, id: str = "", role: str = HARD,
              sign: float = 1.0, vel_idx=None, velocity_gain: float = 0.0) -> Barrier:
    """h = sign (xi[index] - offset), optionally approach-speed aware."""
    idx = np.array([index])
    return _augment_quadratic(
        id or f"halfspace_{index}", role, 1.0, n, idx,
        lambda p: sign * (float(p[0]) - offset),
        lambda p: np.array([sign]),
        np.zeros((1, 1)), vel_idx, velocity_gain)


def circle_clearance(center: Sequence[float], radius: float, pos_idx: Sequence[int], n: int,
                     *, id: str = "", role: str = HARD, confidence: float = 1.0,
                     vel_idx=None, velocity_gain: float = 0.0) -> Barrier:
    """Quadratic clearance h = ||p - o||^2 - r^2 on the position projection."""
    o = np.asarray(center, dtype=float)
    idx = np.asarray(pos_idx, dtype=int)
    return _augment_quadratic(
        id or "circle_clearance", role, confidence, n, idx,
        lambda p: float((p - o) @ (p - o)) - radius * radius,
        lambda p: 2.0 * (p - o),
        2.0 * np.eye(idx.size), vel_idx, velocity_gain)


def ellipse_clearance(center: Sequence[float], semi_axes: Sequence[float], pos_idx: Sequence[int],
                      n: int, *, id: str = "", role: str = HARD,
                      vel_idx=None, velocity_gain: float = 0.0) -> Barrier:
    """h = (p-o)^T diag(1/a_i^2) (p-o) - 1."""
    o = np.asarray(center, dtype=float)
    w = 1.0 / np.asarray(semi_axes, dtype=float) ** 2
    idx = np.asarray(pos_idx, dtype=int)
    return _augment_quadratic(
        id or "ellipse_clearance", role, 1.0, n, idx,
        lambda p: float((p - o) @ (w * (p - o))) - 1.0,
        lambda p: 2.0 * w * (p - o),
        2.0 * np.diag(w), vel_idx, velocity_gain)


def box_limit(index: int, bound: float, n: int, *, id: str = "", role: str = HARD,
              vel_idx=None, velocity_gain: float = 0.0) -> Barrier:
    """Symmetric limit h = b^2 - xi[index]^2 (concave: Hessian -2 on the axis)."""
    idx = np.array([index])
    return _augment_quadratic(
        id or f"box_limit_{index}", role, 1.0, n, idx,
        lambda p: bound * bound - float(p[0]) ** 2,
        lambda p: np.array([-2.0 * float(p[0])]),
        np.array([[-2.0]]), vel_idx, velocity_gain)


@dataclass(frozen=True)
class CompositeBarrier:
    """Ordered barrier collection aggregated by log-sum-exp with sharpness beta."""

    members: tuple[Barrier, ...]
    beta: float = 10.0

    def __post_init__(self):
        if not self.members:
            raise ValueError("composite needs at least one member")
        if self.beta <= 0:
            raise ValueError("beta must be positive")

    @property
    def hard_members(self) -> tuple[Barrier, ...]:
        return tuple(b for b in self.members if b.role == HARD)


@dataclass(frozen=True)
class BarrierStats:
    """Composite value, derivatives, and stochastic terms feeding one QP row."""

    h_c: float
    grad: np.ndarray
    rho: np.ndarray
    drift: float       # L_F h_c
    input_row: np.ndarray  # L_G h_c
    ito: float         # 0.5 Tr(hess_c Sigma)
    sigma_h: float     # sqrt(grad^T Sigma grad)


def compose_lse(values: Sequence[float], beta: float) -> tuple[float, np.ndarray]:
    """Soft minimum and selection weights, stabilized by shifting by min(h).

    Satisfies min(h) - ln(M)/beta <= phi <= min(h) and sum(rho) = 1.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    h = np.asarray(values, dtype=float)
    if h.size == 0:
        raise ValueError("values must be non-empty")
    m = float(h.min())
    e = np.exp(-beta * (h - m))
    s = float(e.sum())
    phi = m - np.log(s) / beta
    return phi, e / s


def eval_barrier(b: Barrier, xi: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Evaluate (h, grad, hess); raises if any component is non-finite."""
    h, grad, hess = b.eval(np.asarray(xi, dtype=float))
    if not (np.isfinite(h) and np.isfinite(grad).all() and np.isfinite(hess).all()):
        raise ValueError(f"barrier {b.id} produced non-finite values at xi={xi}")
    return float(h), grad, hess


def composite_stats(cb: CompositeBarrier, xi: np.ndarray, f: np.ndarray, g: np.ndarray,
                    sigma: np.ndarray) -> BarrierStats:
    """Evaluate the composite barrier and its stochastic terms at xi.

    grad_c = sum rho_i grad_i; the composite Hessian is the exact second
    derivative of the LSE,

        hess_c = sum rho_i hess_i - beta (sum rho_i grad_i grad_i^T - grad_c grad_c^T),

    and ito = 0.5 Tr(hess_c Sigma), sigma_h = sqrt(grad_c^T Sigma grad_c).
    """
    members = cb.members
    hs = np.empty(len(members))
    grads = []
    hesses = []
    for i, b in enumerate(members):
        h, gr, he = b.eval(xi)
        hs[i] = h
        grads.append(gr)
        hesses.append(he)
    phi, rho = compose_lse(hs, cb.beta)
    gmat = np.asarray(grads)                      # M x n
    grad_c = rho @ gmat
    if len(members) == 1:
        hess_c = hesses[0]
    else:
        hess_c = np.einsum("i,ijk->jk", rho, np.asarray(hesses))
        weighted_outer = gmat.T @ (rho[:, None] * gmat)
        hess_c = hess_c - cb.beta * (weighted_outer - np.outer(grad_c, grad_c))
    sig = np.asarray(sigma, dtype=float)
    var = float(grad_c @ (sig @ grad_c))
    return BarrierStats(
        h_c=float(phi),
        grad=grad_c,
        rho=rho,
        drift=float(grad_c @ f),
        input_row=grad_c @ g,
        ito=0.5 * float(np.vdot(hess_c, sig)),
        sigma_h=float(np.sqrt(max(var, 0.0))),
    )


def single_stats(b: Barrier, xi: np.ndarray, f: np.ndarray, g: np.ndarray,
                 sigma: np.ndarray) -> BarrierStats:
    """Stats for one barrier alone (per-constraint QP rows)."""
    h, grad, hess = b.eval(xi)
    sig = np.asarray(sigma, dtype=float)
    var = float(grad @ (sig @ grad))
    return BarrierStats(
        h_c=float(h),
        grad=grad,
        rho=np.ones(1),
        drift=float(grad @ f),
        input_row=grad @ g,
        ito=0.5 * float(np.vdot(hess, sig)),
        sigma_h=float(np.sqrt(max(var, 0.0))),
    )


def constraint_row(stats: BarrierStats, alpha: float, kappa: float) -> tuple[np.ndarray, float]:
    """Affine QP row A u >= b for the risk-aware barrier condition.

    A = L_G h_c and b = -L_F h_c - ito - alpha h_c + kappa sigma_h, so
    A u >= b is equivalent to
    L_F h_c + L_G h_c u + ito + alpha h_c - kappa sigma_h >= 0.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if kappa < 0:
        raise ValueError("kappa must be nonnegative")
    b = -stats.drift - stats.ito - alpha * stats.h_c + kappa * stats.sigma_h
    return np.atleast_1d(stats.input_row).astype(float, copy=True), float(b)
