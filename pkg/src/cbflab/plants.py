"""Desk-scale plant models, covariance fusion, and Euler-Maruyama stepping.

Plants are control-affine with additive state-dependent Gaussian diffusion:

    dxi = (F(xi) + G(xi) u) dt + Sigma^{1/2} dW_t

Three plants are provided: a 1-D single integrator, a planar double
integrator, and a 12-input synthetic linear plant used for solver
benchmarks. All stepping is pure given an RNG stream, so episodes with
distinct stream ids can run in parallel without shared state.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class PlantDomainError(ValueError):
    """Dynamics evaluated to a non-finite value."""


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Independent, reproducible generator for (seed, stream).

    Identical (seed, stream) pairs reproduce identical draw sequences.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(stream)]))


@dataclass(frozen=True)
class PlantModel:
    """Control-affine plant: drift F(xi, t), input matrix G(xi, t)."""

    name: str
    n: int
    n_u: int
    drift: Callable[[np.ndarray, float], np.ndarray]
    input_matrix: Callable[[np.ndarray, float], np.ndarray]
    # indices of position-like states (region barriers project onto these)
    pos_idx: tuple = ()
    # indices of velocity-like states (impulse disturbances act on these)
    vel_idx: tuple = ()


def _scalar_integrator() -> PlantModel:
    def drift(xi, t):
        return np.zeros(1)

    g = np.ones((1, 1))

    def input_matrix(xi, t):
        return g

    return PlantModel("scalar_integrator", 1, 1, drift, input_matrix, pos_idx=(0,), vel_idx=(0,))


def _planar_double_integrator() -> PlantModel:
    # xi = (x, y, vx, vy); u = (ax, ay)
    g = np.zeros((4, 2))
    g[2, 0] = 1.0
    g[3, 1] = 1.0

    def drift(xi, t):
        out = np.zeros(4)
        out[0] = xi[2]
        out[1] = xi[3]
        return out

    def input_matrix(xi, t):
        return g

    return PlantModel("planar_double_integrator", 4, 2, drift, input_matrix, pos_idx=(0, 1), vel_idx=(2, 3))


def synthetic12_matrices() -> tuple[np.ndarray, np.ndarray]:
    """Stored (A, G) of the synthetic 12-input plant.

    A is stable (skew perturbation of -0.6 I keeps eigenvalue real parts at
    -0.6); G is a well-conditioned perturbation of the identity. Both come
    from a pinned stream so every process sees identical matrices.
    """
    rng = make_rng(1206, stream=1983)
    m = rng.standard_normal((12, 12)) * 0.15
    a = -0.6 * np.eye(12) + 0.5 * (m - m.T)
    g = np.eye(12) + 0.1 * rng.standard_normal((12, 12))
    return a, g


def _synthetic12() -> PlantModel:
    a, g = synthetic12_matrices()

    def drift(xi, t):
        return a @ xi

    def input_matrix(xi, t):
        return g

    return PlantModel("synthetic12", 12, 12, drift, input_matrix,
                      pos_idx=tuple(range(6)), vel_idx=tuple(range(6, 12)))


_FACTORIES = {
    "scalar_integrator": _scalar_integrator,
    "planar_double_integrator": _planar_double_integrator,
    "synthetic12": _synthetic12,
}


def make_plant(name: str) -> PlantModel:
    if name not in _FACTORIES:
        raise ValueError(f"unknown plant {name!r}; choices: {sorted(_FACTORIES)}")
    return _FACTORIES[name]()


def eval_dynamics(model: PlantModel, xi: np.ndarray, t: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate (F, G) at xi, checking finiteness and shapes."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (model.n,):
        raise ValueError(f"state dim {xi.shape} does not match plant {model.name} (n={model.n})")
    f = np.asarray(model.drift(xi, t), dtype=float)
    g = np.asarray(model.input_matrix(xi, t), dtype=float)
    if not (np.isfinite(f).all() and np.isfinite(g).all()):
        raise PlantDomainError(f"non-finite dynamics for plant {model.name} at xi={xi}")
    if g.shape != (model.n, model.n_u):
        raise PlantDomainError(f"G shape {g.shape} != ({model.n}, {model.n_u})")
    return f, g


def fuse_covariance(sigma_epi: np.ndarray, sigma_ale: np.ndarray,
                    floor: float = 0.0, ceiling: float = 1e3) -> np.ndarray:
    """Sum the epistemic and aleatoric covariances and clip to PSD.

    Eigenvalues of the symmetrized sum are clamped to [floor, ceiling],
    which enforces positive semidefiniteness and bounds the condition
    number before the matrix enters the safety layer.
    """
    se = np.asarray(sigma_epi, dtype=float)
    sa = np.asarray(sigma_ale, dtype=float)
    if se.shape != sa.shape or se.ndim != 2 or se.shape[0] != se.shape[1]:
        raise ValueError(f"covariance shape mismatch: {se.shape} vs {sa.shape}")
    s = se + sa
    s = 0.5 * (s + s.T)
    # diagonal fast path (the common case for the shipped plants)
    if not np.any(s - np.diag(np.diagonal(s))):
        return np.diag(np.clip(np.diagonal(s), floor, ceiling))
    w, v = np.linalg.eigh(s)
    w = np.clip(w, floor, ceiling)
    out = (v * w) @ v.T
    return 0.5 * (out + out.T)


def sqrt_psd(sigma: np.ndarray, jitter: float = 1e-12) -> np.ndarray:
    """Lower-triangular L with L L^T = sigma (Cholesky, jittered when near-singular)."""
    sigma = np.asarray(sigma, dtype=float)
    if not np.any(sigma):
        return np.zeros_like(sigma)
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        bump = max(jitter, 1e-12 * float(np.max(np.abs(sigma))))
        return np.linalg.cholesky(sigma + bump * np.eye(sigma.shape[0]))


def em_increment(f: np.ndarray, g: np.ndarray, u: np.ndarray,
                 sqrt_sigma: np.ndarray, dt: float, z: np.ndarray) -> np.ndarray:
    """One Euler-Maruyama increment: dt (F + G u) + sqrt(dt) L z."""
    return dt * (f + g @ u) + np.sqrt(dt) * (sqrt_sigma @ z)


def step_em(model: PlantModel, xi: np.ndarray, u: np.ndarray, sigma: np.ndarray,
            dt: float, rng: np.random.Generator, t: float = 0.0) -> np.ndarray:
    """Advance xi by one Euler-Maruyama step with diffusion covariance sigma.

    With sigma = 0 this reduces bitwise to one explicit Euler step.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    f, g = eval_dynamics(model, xi, t)
    u = np.asarray(u, dtype=float)
    ell = sqrt_psd(np.asarray(sigma, dtype=float))
    z = rng.standard_normal(model.n)
    return xi + em_increment(f, g, u, ell, dt, z)
