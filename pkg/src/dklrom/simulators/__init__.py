from .pendulum import PendulumParams, PendulumState, energy, pendulum_deriv, pendulum_step, render_pendulum
from .reaction_diffusion import RDParams, RDState, rd_initial_condition, rd_rhs, rd_step, stability_limit
from .noise import add_noise
from .generate import SYSTEMS, GenerateConfig, generate_dataset

__all__ = [
    "PendulumParams",
    "PendulumState",
    "energy",
    "pendulum_deriv",
    "pendulum_step",
    "render_pendulum",
    "RDParams",
    "RDState",
    "rd_initial_condition",
    "rd_rhs",
    "rd_step",
    "stability_limit",
    "add_noise",
    "SYSTEMS",
    "GenerateConfig",
    "generate_dataset",
]
