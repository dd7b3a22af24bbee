"""Euler-Maruyama simulation of an Ornstein-Uhlenbeck latent SDE.

The process dZ = (mu - Z) dt + sigma dW runs from t=0 to a fixed horizon on
a uniform grid.  Sampling is reparameterized: the Wiener increments are
drawn once as constants and the recursion is built from differentiable ops,
so gradients reach mu and sigma through the whole path.  The Girsanov
log Radon-Nikodym weight of the drifted measure against the driftless one
is accumulated at left endpoints; it is reported detached because weights
enter the loss only as importance factors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import DomainError, Tensor


@dataclass
class OuParams:
    """Mean-reversion target mu, diffusion scale sigma, grid settings."""

    mu: Tensor
    sigma: Tensor
    horizon: float = 1.0
    n_steps: int = 8

    def __post_init__(self):
        if not isinstance(self.mu, Tensor):
            self.mu = Tensor(self.mu)
        if not isinstance(self.sigma, Tensor):
            self.sigma = Tensor(self.sigma)
        if np.any(self.sigma.data < 0.0):
            raise DomainError("sigma must be nonnegative")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.horizon <= 0.0:
            raise ValueError("horizon must be positive")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps


@dataclass
class DiffusionPath:
    """Recorded trajectory: states Z_0..Z_N and the Wiener increments."""

    states: list[Tensor]
    increments: list[np.ndarray]
    dt: float
    drifted: bool = True
    log_rn_weight: float = 0.0

    @property
    def terminal(self) -> Tensor:
        return self.states[-1]


def euler_maruyama(params: OuParams, z0, rng: np.random.Generator,
                   drifted: bool = True) -> DiffusionPath:
    """Integrate the OU recursion Z' = Z + (mu - Z) dt + sigma * eps.

    eps ~ N(0, dt) elementwise.  With drifted=False the drift term is
    dropped, which simulates the reference (driftless) measure on the same
    grid; the Girsanov weight of a drifted law can then be evaluated on it.
    """
    z = z0 if isinstance(z0, Tensor) else Tensor(z0)
    dt = params.dt
    sqrt_dt = np.sqrt(dt)
    states = [z]
    increments: list[np.ndarray] = []
    for _ in range(params.n_steps):
        eps = rng.standard_normal(z.shape) * sqrt_dt
        increments.append(eps)
        step = params.sigma * Tensor(eps)
        if drifted:
            step = (params.mu - z) * dt + step
        z = z + step
        states.append(z)
    return DiffusionPath(states=states, increments=increments, dt=dt, drifted=drifted)


def girsanov_log_weight_field(path: DiffusionPath, params: OuParams) -> np.ndarray:
    """Per-element log RN weight, summed over steps (detached values)."""
    if np.any(params.sigma.data == 0.0):
        raise DomainError("girsanov weight undefined for sigma = 0")
    mu = params.mu.data
    sigma = params.sigma.data
    total = np.zeros(np.broadcast_shapes(path.states[0].shape, mu.shape, sigma.shape))
    for z_t, eps in zip(path.states[:-1], path.increments):
        lam = (mu - z_t.data) / sigma
        total = total + (-0.5 * lam * lam * path.dt + lam * eps)
    return total


def girsanov_log_weight(path: DiffusionPath, params: OuParams) -> float:
    """Total log RN weight of the drifted law relative to the driftless one."""
    return float(girsanov_log_weight_field(path, params).sum())


def sde_girsanov_sample(params: OuParams, rng: np.random.Generator) -> tuple[Tensor, float]:
    """Draw Z_T starting from z0 ~ N(0, I); returns (Z_T, total log weight)."""
    z0 = Tensor(rng.standard_normal(params.mu.shape))
    path = euler_maruyama(params, z0, rng)
    path.log_rn_weight = girsanov_log_weight(path, params)
    return path.terminal, path.log_rn_weight


def sde_girsanov_sample_field(params: OuParams, rng: np.random.Generator
                              ) -> tuple[Tensor, np.ndarray]:
    """Like sde_girsanov_sample but keeps the per-element weight field."""
    z0 = Tensor(rng.standard_normal(params.mu.shape))
    path = euler_maruyama(params, z0, rng)
    return path.terminal, girsanov_log_weight_field(path, params)


def replay(path: DiffusionPath, params: OuParams) -> np.ndarray:
    """Recompute the terminal state from the recorded increments."""
    z = path.states[0].data
    for eps in path.increments:
        step = params.sigma.data * eps
        if path.drifted:
            step = (params.mu.data - z) * path.dt + step
        z = z + step
    return z


def ou_analytic_moments(params: OuParams, z0, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact continuous-time mean and variance of the OU process at time t."""
    z0a = z0.data if isinstance(z0, Tensor) else np.asarray(z0, dtype=float)
    mu = params.mu.data
    sigma = params.sigma.data
    mean = mu + (z0a - mu) * np.exp(-t)
    var = sigma * sigma * (1.0 - np.exp(-2.0 * t)) / 2.0
    mean_b, var_b = np.broadcast_arrays(mean, var)
    return mean_b.copy(), var_b.copy()
