"""Reduced-order modeling of controlled dynamical systems with variational
deep kernel learning: encoder/decoder/dynamics models, chaotic-system data
generators, joint multi-step training, and an evaluation suite."""

__version__ = "0.1.0"
