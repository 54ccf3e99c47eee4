"""Differentiable MPM coupled with rigid bodies and ropes in 2D."""

__version__ = "0.1.0"
