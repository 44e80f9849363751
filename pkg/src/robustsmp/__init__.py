"""Robust stochastic control with entropic ambiguity: model, duality kernels,
Monte Carlo engine, forward-backward solver and mean-field layer."""

__version__ = "0.1.0"
