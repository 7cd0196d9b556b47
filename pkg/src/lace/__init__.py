"""Latent-space energy-guided sampling toolkit.

Train small attribute classifiers in the latent space of a fixed
generator, compose their energies (AND / OR / NOT), and sample from the
resulting conditionals with Langevin dynamics, a probability-flow ODE,
or a predictor-corrector scheme. Brute-force oracles (rejection
sampling, grid quadrature, finite differences) validate every piece.
"""

__version__ = "0.1.0"
