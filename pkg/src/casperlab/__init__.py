"""Spectral eigengap regularization for rehearsal-based continual learning."""

__version__ = "0.1.0"
