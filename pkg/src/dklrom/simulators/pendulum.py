"""Actuated planar double pendulum.

Angles are measured from the downward vertical. The actuation u1 is an
angular-acceleration offset added directly to the first joint's omega-dot
equation (it is not divided by the configuration-dependent inertia term, so
it is an acceleration input rather than a physical torque). With u1 = 0 the
dynamics are conservative and `energy` is an integration diagnostic.

States move through `pendulum_step` (one classical RK4 step of size
`params.dt` with u1 held constant); frame spacing in generated datasets is a
multiple of dt.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError, IntegrationError, ValidationError


@dataclass(frozen=True)
class PendulumParams:
    """Masses (kg), link lengths (m), gravity (m/s^2), RK4 step dt (s), and
    the actuation amplitude bound used by data generation."""

    m1: float = 1.0
    m2: float = 1.0
    l1: float = 1.0
    l2: float = 1.0
    g: float = 9.81
    dt: float = 1e-3
    torque_max: float = 2.0

    def __post_init__(self):
        for name in ("m1", "m2", "l1", "l2", "g", "dt"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.torque_max < 0:
            raise ConfigurationError("torque_max must be non-negative")


@dataclass(frozen=True)
class PendulumState:
    theta1: float
    theta2: float
    omega1: float
    omega2: float

    def as_array(self) -> np.ndarray:
        return np.array([self.theta1, self.theta2, self.omega1, self.omega2], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "PendulumState":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != (4,):
            raise ValidationError(f"state array must have shape (4,), got {arr.shape}")
        return cls(float(arr[0]), float(arr[1]), float(arr[2]), float(arr[3]))


def _deriv_array(s: np.ndarray, u1, p: PendulumParams) -> np.ndarray:
    """Time derivative for state arrays (..., 4); u1 broadcasts over the batch."""
    th1, th2, w1, w2 = s[..., 0], s[..., 1], s[..., 2], s[..., 3]
    m1, m2, l1, l2, g = p.m1, p.m2, p.l1, p.l2, p.g
    delta = th1 - th2
    sin_d, cos_d = np.sin(delta), np.cos(delta)
    den = 2.0 * m1 + m2 - m2 * np.cos(2.0 * th1 - 2.0 * th2)

    w1dot = (
        -g * (2.0 * m1 + m2) * np.sin(th1)
        - m2 * g * np.sin(th1 - 2.0 * th2)
        - 2.0 * sin_d * m2 * (w2 * w2 * l2 + w1 * w1 * l1 * cos_d)
    ) / (l1 * den) + u1

    w2dot = (
        2.0
        * sin_d
        * (w1 * w1 * l1 * (m1 + m2) + g * (m1 + m2) * np.cos(th1) + w2 * w2 * l2 * m2 * cos_d)
    ) / (l2 * den)

    return np.stack([w1, w2, w1dot, w2dot], axis=-1)


def pendulum_deriv(state: PendulumState, u1: float, params: PendulumParams) -> np.ndarray:
    """(theta1-dot, theta2-dot, omega1-dot, omega2-dot) as a (4,) array."""
    return _deriv_array(state.as_array(), float(u1), params)


def _rk4_array(s: np.ndarray, u1, p: PendulumParams) -> np.ndarray:
    dt = p.dt
    k1 = _deriv_array(s, u1, p)
    k2 = _deriv_array(s + 0.5 * dt * k1, u1, p)
    k3 = _deriv_array(s + 0.5 * dt * k2, u1, p)
    k4 = _deriv_array(s + dt * k3, u1, p)
    return s + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def pendulum_step(state: PendulumState, u1: float, params: PendulumParams) -> PendulumState:
    """One RK4 step of size params.dt with u1 held constant over the step."""
    out = _rk4_array(state.as_array(), float(u1), params)
    if not np.isfinite(out).all():
        raise IntegrationError(f"non-finite state after step from {state}")
    return PendulumState.from_array(out)


def energy(state: PendulumState, params: PendulumParams) -> float:
    """Total mechanical energy (kinetic + potential), zero level at the pivot."""
    th1, th2, w1, w2 = state.theta1, state.theta2, state.omega1, state.omega2
    m1, m2, l1, l2, g = params.m1, params.m2, params.l1, params.l2, params.g
    ke = 0.5 * m1 * l1**2 * w1**2 + 0.5 * m2 * (
        l1**2 * w1**2 + l2**2 * w2**2 + 2.0 * l1 * l2 * w1 * w2 * math.cos(th1 - th2)
    )
    pe = -(m1 + m2) * g * l1 * math.cos(th1) - m2 * g * l2 * math.cos(th2)
    return ke + pe


_LINK1_COLOR = (0.95, 0.0, 0.0)
_LINK2_COLOR = (0.0, 0.85, 0.95)
_BACKGROUND = 0.05


def _segment_coverage(px: np.ndarray, py: np.ndarray, a, b, half_width: float) -> np.ndarray:
    """Anti-aliased coverage of the segment a-b at each pixel center: 1 inside
    the stroke, linear falloff over one pixel."""
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    seg2 = dx * dx + dy * dy
    if seg2 < 1e-12:
        dist = np.hypot(px - ax, py - ay)
    else:
        t = np.clip(((px - ax) * dx + (py - ay) * dy) / seg2, 0.0, 1.0)
        dist = np.hypot(px - (ax + t * dx), py - (ay + t * dy))
    return np.clip(half_width + 0.5 - dist, 0.0, 1.0)


def render_pendulum(state: PendulumState, params: PendulumParams, size: int = 84) -> np.ndarray:
    """Render the arm to a (size, size, 3) float32 image in [0, 1].

    Deterministic in (state, params, size). The two links are drawn
    additively into disjoint color channels (link 1 red, link 2 cyan), so the
    per-channel ink does not depend on whether the links overlap and the mean
    image intensity stays nearly constant across poses.
    """
    if size < 16:
        raise ValidationError("render size must be at least 16")
    scale = 0.8 * (size / 2.0) / (params.l1 + params.l2)
    cx = cy = (size - 1) / 2.0
    x1 = cx + scale * params.l1 * math.sin(state.theta1)
    y1 = cy + scale * params.l1 * math.cos(state.theta1)
    x2 = x1 + scale * params.l2 * math.sin(state.theta2)
    y2 = y1 + scale * params.l2 * math.cos(state.theta2)

    ii = np.arange(size, dtype=np.float64)
    px, py = np.meshgrid(ii, ii, indexing="xy")
    half_width = max(1.0, size / 56.0)
    cov1 = _segment_coverage(px, py, (cx, cy), (x1, y1), half_width)
    cov2 = _segment_coverage(px, py, (x1, y1), (x2, y2), half_width)

    img = np.full((size, size, 3), _BACKGROUND, dtype=np.float64)
    for c in range(3):
        img[..., c] += _LINK1_COLOR[c] * cov1 + _LINK2_COLOR[c] * cov2
    return np.clip(img, 0.0, 1.0).astype(np.float32)
