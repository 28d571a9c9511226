"""Desk-scale laboratory for label-free network pruning and distillation."""

__version__ = "0.1.0"
