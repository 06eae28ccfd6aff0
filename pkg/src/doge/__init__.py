"""Decoupled Thinker/Solver GRPO training on synthetic verifiable sequence tasks."""

__version__ = "0.1.0"
