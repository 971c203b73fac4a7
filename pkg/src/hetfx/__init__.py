"""Conditional average treatment effects by propensity score regression."""

__version__ = "0.1.0"
