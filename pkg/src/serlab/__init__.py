"""Soft equivariance regularization for split Vision Transformers, at desk scale."""

__version__ = "0.1.0"
