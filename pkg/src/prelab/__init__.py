"""Soft-prompt learning with a residual reparameterization encoder on a frozen toy dual encoder."""

__version__ = "0.1.0"
