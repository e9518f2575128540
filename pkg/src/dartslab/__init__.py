"""Desk-scale laboratory for differentiable architecture search dynamics."""

__version__ = "0.1.0"
