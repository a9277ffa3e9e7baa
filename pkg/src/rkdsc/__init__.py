"""Lightweight semantic-communication encoders via architecture search and robust distillation."""

__version__ = "0.1.0"
