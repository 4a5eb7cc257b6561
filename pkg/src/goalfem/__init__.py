"""Adaptive FEM for a nonlinear flow-temperature model with multigoal
dual-weighted-residual error control."""

__version__ = "0.1.0"
