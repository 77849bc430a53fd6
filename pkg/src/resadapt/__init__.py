"""Residual-dynamics learning with online Bayesian decoder adaptation for an aerial manipulator."""

__version__ = "0.1.0"
