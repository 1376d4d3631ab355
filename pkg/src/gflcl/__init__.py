"""Continual learning with a gated fusion of frozen encoder layers, on synthetic tasks."""

__version__ = "0.1.0"
