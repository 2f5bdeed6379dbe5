"""Robust and soft-robust entropy-regularized reinforcement learning."""

__version__ = "0.1.0"
