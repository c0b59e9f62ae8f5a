"""Bayesian and variational learning coefficients of Poisson-gamma NMF."""

__version__ = "0.1.0"

from .model import (CountDataset, DomainError, FactorPair, Hyperparameters, ModelDims,
                    NumericalError, generate_dataset)

__all__ = ["CountDataset", "DomainError", "FactorPair", "Hyperparameters", "ModelDims",
           "NumericalError", "generate_dataset", "__version__"]
