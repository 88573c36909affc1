"""Variational distribution learning for text-free text-to-image training, at desk scale."""

__version__ = "0.1.0"
