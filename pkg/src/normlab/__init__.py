"""Normalization laboratory: normalizers, diagnostics and training at desk scale."""

__version__ = "0.1.0"
