"""Iterative self-distillation toolkit for self-supervised speech encoders."""

__version__ = "0.1.0"
