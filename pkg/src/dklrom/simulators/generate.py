"""Dataset generation for the two built-in systems.

Trajectories are generated sequentially with independent per-trajectory rng
streams spawned from one seed, so regeneration with the same config is
bit-identical and the work could be sharded without changing results.
Measurements are stored clean; noise is applied at sampling/evaluation time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..data import TrajectoryDataset
from ..errors import ConfigurationError
from .pendulum import PendulumParams, PendulumState, _rk4_array, render_pendulum
from .reaction_diffusion import RDParams, RDState, rd_initial_condition, rd_step

SYSTEMS = ("pendulum", "reaction_diffusion")

# Field values of the reaction-diffusion system stay inside this band on the
# attractor; measurements are the affine map of [-RD_AMPLITUDE, RD_AMPLITUDE]
# onto [0, 1].
RD_AMPLITUDE = 1.25


@dataclass(frozen=True)
class GenerateConfig:
    """How many trajectories/frames to generate and with what physics.

    steps_per_frame: pendulum RK4 substeps per saved frame.
    save_every: reaction-diffusion RK4 steps per saved frame.
    beta_range: per-trajectory reaction-strength draw (reaction-diffusion).
    """

    system: str = "pendulum"
    n_traj: int = 100
    n_frames: int = 120
    seed: int = 0
    render_size: int = 84
    steps_per_frame: int = 20
    save_every: int = 10
    beta_range: tuple[float, float] = (0.5, 1.5)
    pendulum: PendulumParams = field(default_factory=PendulumParams)
    rd: RDParams = field(default_factory=RDParams)

    def __post_init__(self):
        if self.system not in SYSTEMS:
            raise ConfigurationError(f"unknown system {self.system!r}, expected one of {SYSTEMS}")
        if self.n_traj < 1 or self.n_frames < 2:
            raise ConfigurationError("need n_traj >= 1 and n_frames >= 2")
        if self.steps_per_frame < 1 or self.save_every < 1:
            raise ConfigurationError("steps_per_frame and save_every must be positive")
        lo, hi = self.beta_range
        if not (0 < lo <= hi):
            raise ConfigurationError("beta_range must satisfy 0 < lo <= hi")


def generate_dataset(config: GenerateConfig) -> TrajectoryDataset:
    if config.system == "pendulum":
        return _generate_pendulum(config)
    return _generate_rd(config)


def _generate_pendulum(config: GenerateConfig) -> TrajectoryDataset:
    m, n, size = config.n_traj, config.n_frames, config.render_size
    pp = config.pendulum
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(m)]

    measurements = np.empty((m, n, size, size, 3), dtype=np.float32)
    controls = np.empty((m, n - 1, 1), dtype=np.float32)
    states = np.empty((m, n, 4), dtype=np.float32)

    for i, rng in enumerate(streams):
        th = rng.uniform(-math.pi, math.pi, size=2)
        state = np.array([th[0], th[1], 0.0, 0.0])
        u_seq = rng.uniform(-pp.torque_max, pp.torque_max, size=n - 1)
        states[i, 0] = state
        measurements[i, 0] = render_pendulum(PendulumState.from_array(state), pp, size)
        for k in range(n - 1):
            for _ in range(config.steps_per_frame):
                state = _rk4_array(state, u_seq[k], pp)
            states[i, k + 1] = state
            measurements[i, k + 1] = render_pendulum(PendulumState.from_array(state), pp, size)
        controls[i, :, 0] = u_seq

    meta = {
        "system": "pendulum",
        "n_traj": m,
        "n_frames": n,
        "seed": config.seed,
        "frame_dt": config.steps_per_frame * pp.dt,
        "render_size": size,
        "physics": {
            "m1": pp.m1, "m2": pp.m2, "l1": pp.l1, "l2": pp.l2,
            "g": pp.g, "dt": pp.dt, "torque_max": pp.torque_max,
        },
        "state_layout": ["theta1", "theta2", "omega1", "omega2"],
    }
    return TrajectoryDataset(
        measurements=measurements,
        controls=controls,
        params=np.zeros((m, 0), dtype=np.float32),
        meta=meta,
        states=states,
    )


def field_to_measurement(f: np.ndarray) -> np.ndarray:
    """Affine map of field values in [-RD_AMPLITUDE, RD_AMPLITUDE] onto [0, 1]."""
    return np.clip((f + RD_AMPLITUDE) / (2.0 * RD_AMPLITUDE), 0.0, 1.0)


def measurement_to_field(x: np.ndarray) -> np.ndarray:
    return x * (2.0 * RD_AMPLITUDE) - RD_AMPLITUDE


def _generate_rd(config: GenerateConfig) -> TrajectoryDataset:
    m, n = config.n_traj, config.n_frames
    base = config.rd
    g = base.grid_n
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(m)]

    measurements = np.empty((m, n, g, g, 2), dtype=np.float32)
    params = np.empty((m, 1), dtype=np.float32)

    for i, rng in enumerate(streams):
        beta = float(rng.uniform(*config.beta_range))
        rdp = replace(base, beta=beta)
        state = rd_initial_condition(rdp)
        # random torus shift: physics is shift-equivariant, so this samples
        # the same orbit at different positions without changing the dynamics
        shift = rng.integers(0, g, size=2)
        state = RDState(
            np.roll(state.u, tuple(shift), axis=(0, 1)),
            np.roll(state.v, tuple(shift), axis=(0, 1)),
        )
        for k in range(n):
            if k > 0:
                for _ in range(config.save_every):
                    state = rd_step(state, rdp)
            measurements[i, k, :, :, 0] = field_to_measurement(state.u)
            measurements[i, k, :, :, 1] = field_to_measurement(state.v)
        params[i, 0] = beta

    meta = {
        "system": "reaction_diffusion",
        "n_traj": m,
        "n_frames": n,
        "seed": config.seed,
        "frame_dt": config.save_every * base.dt,
        "grid_n": g,
        "field_amplitude": RD_AMPLITUDE,
        "physics": {
            "d": base.d, "dt": base.dt, "domain_half": base.domain_half,
            "beta_range": list(config.beta_range),
            "sign_as_written": base.sign_as_written,
            "literal_cos_ic": base.literal_cos_ic,
        },
        "param_layout": ["beta"],
    }
    return TrajectoryDataset(
        measurements=measurements,
        controls=np.zeros((m, n - 1, 0), dtype=np.float32),
        params=params,
        meta=meta,
        states=None,
    )
