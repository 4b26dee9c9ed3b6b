"""Distributed deep Koopman learning from partial trajectories, with MPC."""

__version__ = "0.1.0"
