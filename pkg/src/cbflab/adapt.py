"""Online calibration of the risk parameters (alpha, kappa).

The meta objective combines tracking deviation, a logarithmic barrier
penalty, and a hinge on the realized risk-aware margin:

    L = mean[ ||u* - u_ref||^2 + lambda_h * Psi(h_c) + lambda_s * max(0, -margin) ]

with Psi(h) = -log(max(h, psi_floor)). Every K control steps the raw
parameters take one clipped, projected gradient step; an exponential
smoother (optionally asymmetric: fast rise, slow decay) filters the raw
values before they reach the QP. Applied values therefore never leave
their bounds and never move faster than the smoothing rate allows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def safe_hinge(margin: float) -> float:
    """max(0, -margin): zero iff the risk-aware barrier condition held."""
    return max(0.0, -float(margin))


def barrier_penalty(h_c: float, floor: float = 1e-3) -> float:
    """Psi(h) = -log(max(h, floor)); finite for all h."""
    return -float(np.log(max(float(h_c), floor)))


@dataclass
class MetaConfig:
    lambda_h: float = 0.1
    lambda_s: float = 10.0
    lr: float = 0.05          # meta step size
    clip_norm: float = 1.0    # gradient norm cap
    period: int = 10          # update every K control steps
    psi_floor: float = 1e-3

    def __post_init__(self):
        if self.period < 1:
            raise ValueError("update period must be >= 1")
        if self.lambda_h < 0 or self.lambda_s < 0 or self.lr <= 0 or self.clip_norm <= 0:
            raise ValueError("meta coefficients out of range")
        if self.psi_floor <= 0:
            raise ValueError("psi_floor must be positive")


@dataclass
class RiskParams:
    """Raw and applied (alpha, kappa) with bounds and smoothing state."""

    alpha: float = 1.0
    kappa: float = 1.0
    alpha_bounds: tuple[float, float] = (0.1, 10.0)
    kappa_bounds: tuple[float, float] = (0.0, 5.0)
    gamma_rise: float = 0.5
    gamma_fall: float = 0.05
    applied_alpha: float = field(default=None)
    applied_kappa: float = field(default=None)

    def __post_init__(self):
        for g in (self.gamma_rise, self.gamma_fall):
            if not 0.0 < g <= 1.0:
                raise ValueError("smoothing gamma must lie in (0, 1]")
        self.alpha = float(np.clip(self.alpha, *self.alpha_bounds))
        self.kappa = float(np.clip(self.kappa, *self.kappa_bounds))
        if self.applied_alpha is None:
            self.applied_alpha = self.alpha
        if self.applied_kappa is None:
            self.applied_kappa = self.kappa

    @classmethod
    def symmetric(cls, alpha: float, kappa: float, gamma: float = 0.2, **kw) -> "RiskParams":
        return cls(alpha, kappa, gamma_rise=gamma, gamma_fall=gamma, **kw)


def meta_update(params: RiskParams, grad: np.ndarray, cfg: MetaConfig) -> tuple[float, float]:
    """One projected, norm-clipped step on the raw (alpha, kappa).

    Returns the new raw values; does not mutate params.
    """
    g = np.asarray(grad, dtype=float)
    if not np.isfinite(g).all():
        raise ValueError("meta gradient must be finite")
    norm = float(np.linalg.norm(g))
    if norm > cfg.clip_norm:
        g = g * (cfg.clip_norm / norm)
    alpha = float(np.clip(params.alpha - cfg.lr * g[0], *params.alpha_bounds))
    kappa = float(np.clip(params.kappa - cfg.lr * g[1], *params.kappa_bounds))
    return alpha, kappa


def smooth_apply(params: RiskParams) -> tuple[float, float]:
    """Move the applied values toward the raw ones.

    applied <- (1 - gamma) applied + gamma raw, with gamma_rise when the raw
    value is above the applied one and gamma_fall otherwise (hysteresis:
    conservatism ramps up quickly and relaxes slowly). Returns the new
    applied pair; does not mutate params.
    """
    out = []
    for raw, applied, (lo, hi) in (
            (params.alpha, params.applied_alpha, params.alpha_bounds),
            (params.kappa, params.applied_kappa, params.kappa_bounds)):
        g = params.gamma_rise if raw > applied else params.gamma_fall
        v = (1.0 - g) * applied + g * raw
        out.append(min(max(v, lo), hi))
    return out[0], out[1]


def meta_loss(window, cfg: MetaConfig) -> float:
    """Mean meta objective over a window of step records.

    Each record needs fields (u_star, u_ref, h_c, margin).
    """
    if not window:
        raise ValueError("window must be non-empty")
    total = 0.0
    for rec in window:
        du = np.asarray(rec.u_star) - np.asarray(rec.u_ref)
        total += float(du @ du)
        total += cfg.lambda_h * barrier_penalty(rec.h_c, cfg.psi_floor)
        total += cfg.lambda_s * safe_hinge(rec.margin)
    return total / len(window)


@dataclass
class StepRecord:
    """Per-step quantities the meta learner consumes."""

    u_star: np.ndarray
    u_ref: np.ndarray
    h_c: float
    margin: float
    # dL/d(alpha,kappa) contribution of this step (tracking + hinge terms)
    grad: np.ndarray


class MetaAdapter:
    """Sliding-window meta learner driving one controller's RiskParams.

    record() pushes per-step gradients; update is applied every cfg.period
    steps; smooth() advances the applied values every step. enabled=False
    freezes the raw parameters (ablation variants) while keeping the same
    call pattern so traces stay aligned.
    """

    def __init__(self, params: RiskParams, cfg: MetaConfig, enabled: bool = True):
        self.params = params
        self.cfg = cfg
        self.enabled = enabled
        self._window: list[np.ndarray] = []
        self._steps = 0

    def record(self, grad: np.ndarray) -> None:
        self._window.append(np.asarray(grad, dtype=float))
        if len(self._window) > self.cfg.period:
            self._window.pop(0)
        self._steps += 1

    def maybe_update(self) -> bool:
        """Apply one meta step when the schedule says so; no drift otherwise."""
        if not self.enabled or self._steps == 0 or self._steps % self.cfg.period != 0:
            return False
        if not self._window:
            return False
        grad = np.mean(self._window, axis=0)
        self.params.alpha, self.params.kappa = meta_update(self.params, grad, self.cfg)
        return True

    def smooth(self) -> tuple[float, float]:
        a, k = smooth_apply(self.params)
        self.params.applied_alpha = a
        self.params.applied_kappa = k
        return a, k

    def applied(self) -> tuple[float, float]:
        return self.params.applied_alpha, self.params.applied_kappa


def step_meta_gradient(u_star, u_ref, du_dalpha, du_dkappa, violating, h_c, sigma_h,
                       cfg: MetaConfig) -> np.ndarray:
    """dL/d(alpha, kappa) for one control step.

    The tracking term chains through the QP optimum, 2 (u*-u_ref)^T
    du*/dtheta, on differentiable steps (du_* = None on slack-active or
    degenerate steps, which contribute no tracking gradient). The hinge term
    uses the row-tightening subgradient whenever the step is violating:
    d/dkappa = -sigma_h (ascent in kappa) and d/dalpha = +h_c, the direction
    that raises the row offset b and tightens the constraint.
    """
    g_alpha = 0.0
    g_kappa = 0.0
    if du_dalpha is not None:
        du = np.asarray(u_star) - np.asarray(u_ref)
        g_alpha = 2.0 * float(du @ du_dalpha)
        g_kappa = 2.0 * float(du @ du_dkappa)
    if violating:
        g_alpha += cfg.lambda_s * h_c
        g_kappa += cfg.lambda_s * (-sigma_h)
    return np.array([g_alpha, g_kappa])
