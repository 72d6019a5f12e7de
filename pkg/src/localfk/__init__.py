"""Localized Feynman-Kac lower bounds for Schroedinger-type equations on grids."""

from .elliptic import CoefficientField, DiscreteOperator, ScalarField, assemble_operator
from .geometry import BallSpec, DomainError, DomainMask, build_domain
from .spectral import calibrate_potential, eigen_with_potential, principal_eigenpair

__version__ = "0.1.0"

__all__ = [
    "BallSpec",
    "CoefficientField",
    "DiscreteOperator",
    "DomainError",
    "DomainMask",
    "ScalarField",
    "assemble_operator",
    "build_domain",
    "calibrate_potential",
    "eigen_with_potential",
    "principal_eigenpair",
]
