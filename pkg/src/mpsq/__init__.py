"""Multiclass processor-sharing queue with feedback: simulator, fluid and
diffusion limits, and an empirical heavy-traffic harness."""

__version__ = "0.1.0"
