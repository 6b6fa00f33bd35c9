"""Variational temporal deconfounder: per-step treatment effects under hidden confounding."""

__version__ = "0.1.0"
