"""Variational and conditional variational autoencoders on a small
reverse-mode autodiff core, with a 1-D posterior-convergence oracle."""
from .estimators import ConditionalVAE, RegressorBaseline, VariationalAutoencoder

__all__ = ["VariationalAutoencoder", "ConditionalVAE", "RegressorBaseline"]
__version__ = "0.1.0"
