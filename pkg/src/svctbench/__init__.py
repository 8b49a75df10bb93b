"""Posterior-sampling benchmark for plug-and-play diffusion in sparse-view CT."""

__version__ = "0.1.0"
