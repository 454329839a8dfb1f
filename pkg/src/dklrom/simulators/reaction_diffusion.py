"""Lambda-omega reaction-diffusion system on a periodic square grid.

Two coupled fields (u, v) with cubic local dynamics and isotropic diffusion:

    u_t = (1 - A^2) u + beta A^2 v + d lap(u)
    v_t = -beta A^2 u + (1 - A^2) v + d lap(v)        A^2 = u^2 + v^2

The default v-equation carries -beta, which makes (u, v) a rotating pair and
produces the spiral-wave attractor; `sign_as_written=True` flips it to +beta
for comparison runs. The Laplacian is the 5-point stencil with periodic
wrap-around, so single-grid-cell shifts commute with the step exactly.

A spatially uniform state has lap = 0 and its amplitude follows the logistic
law A(t)^2 = 1 / (1 + (1/A0^2 - 1) exp(-2t)), which the tests use as a
closed-form integration oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError, IntegrationError, ValidationError


def stability_limit(grid_n: int, domain_half: float, d: float) -> float:
    """Largest admissible RK4 step: 0.9 h^2 / (8 d), h the grid spacing."""
    h = 2.0 * domain_half / grid_n
    return 0.9 * h * h / (8.0 * d)


@dataclass(frozen=True)
class RDParams:
    """Reaction strength beta, diffusion d, grid resolution and half-width of
    the periodic domain [-domain_half, domain_half), and RK4 step dt."""

    beta: float = 1.0
    d: float = 0.1
    grid_n: int = 128
    domain_half: float = 10.0
    dt: float = 0.02
    sign_as_written: bool = False
    literal_cos_ic: bool = False

    def __post_init__(self):
        if self.grid_n < 8:
            raise ConfigurationError("grid_n must be at least 8")
        if self.d <= 0 or self.domain_half <= 0 or self.dt <= 0:
            raise ConfigurationError("d, domain_half, and dt must be positive")
        limit = stability_limit(self.grid_n, self.domain_half, self.d)
        if self.dt > limit:
            raise ConfigurationError(
                f"dt={self.dt:g} exceeds the diffusion stability limit {limit:g} "
                f"for grid_n={self.grid_n}, d={self.d:g}"
            )

    @property
    def h(self) -> float:
        return 2.0 * self.domain_half / self.grid_n


@dataclass(frozen=True)
class RDState:
    """Field pair on the grid, each (grid_n, grid_n) float64, index [row=y, col=x]."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ValidationError("u and v must be 2-d arrays of equal shape")


def _laplacian(f: np.ndarray, h: float) -> np.ndarray:
    return (
        np.roll(f, 1, axis=0)
        + np.roll(f, -1, axis=0)
        + np.roll(f, 1, axis=1)
        + np.roll(f, -1, axis=1)
        - 4.0 * f
    ) / (h * h)


def rd_rhs(state: RDState, params: RDParams) -> tuple[np.ndarray, np.ndarray]:
    """(du/dt, dv/dt) at the given state."""
    u, v = state.u, state.v
    a2 = u * u + v * v
    h = params.h
    beta = params.beta if params.sign_as_written else -params.beta
    du = (1.0 - a2) * u + params.beta * a2 * v + params.d * _laplacian(u, h)
    dv = beta * a2 * u + (1.0 - a2) * v + params.d * _laplacian(v, h)
    return du, dv


def rd_step(state: RDState, params: RDParams) -> RDState:
    """One RK4 step of size params.dt."""
    dt = params.dt

    def rhs(u, v):
        return rd_rhs(RDState(u, v), params)

    u, v = state.u, state.v
    k1u, k1v = rhs(u, v)
    k2u, k2v = rhs(u + 0.5 * dt * k1u, v + 0.5 * dt * k1v)
    k3u, k3v = rhs(u + 0.5 * dt * k2u, v + 0.5 * dt * k2v)
    k4u, k4v = rhs(u + dt * k3u, v + dt * k3v)
    nu = u + (dt / 6.0) * (k1u + 2.0 * k2u + 2.0 * k3u + k4u)
    nv = v + (dt / 6.0) * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
    if not (np.isfinite(nu).all() and np.isfinite(nv).all()):
        raise IntegrationError("non-finite field after step")
    return RDState(nu, nv)


def grid_coordinates(params: RDParams) -> tuple[np.ndarray, np.ndarray]:
    """Meshgrid (X, Y) of cell coordinates, [row=y, col=x], periodic (no
    duplicated endpoint)."""
    xs = -params.domain_half + params.h * np.arange(params.grid_n)
    return np.meshgrid(xs, xs, indexing="xy")


def rd_initial_condition(params: RDParams) -> RDState:
    """Single-armed spiral seed.

    u0 = tanh(r) cos(theta - r),  v0 = tanh(r) sin(theta - r)

    with (r, theta) the polar coordinates of each cell. `literal_cos_ic=True`
    uses cos for both fields (a degenerate rank-one seed kept for
    comparison), which still relaxes onto the attractor but more slowly.
    """
    X, Y = grid_coordinates(params)
    r = np.hypot(X, Y)
    theta = np.arctan2(Y, X)
    phase = theta - r
    u = np.tanh(r) * np.cos(phase)
    second = np.cos(phase) if params.literal_cos_ic else np.sin(phase)
    v = np.tanh(r) * second
    return RDState(u, v)


def uniform_amplitude(a0: float, t: float) -> float:
    """Closed-form |A|(t) for a spatially uniform state with |A|(0) = a0."""
    if not 0 < a0:
        raise ValidationError("a0 must be positive")
    return 1.0 / math.sqrt(1.0 + (1.0 / (a0 * a0) - 1.0) * math.exp(-2.0 * t))
