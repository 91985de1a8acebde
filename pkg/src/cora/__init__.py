"""Correspondence-aware few-step diffusion editing at toy scale."""

__version__ = "0.1.0"
