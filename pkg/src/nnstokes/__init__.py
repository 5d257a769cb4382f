"""Weighted estimates and solvers for non-Newtonian Stokes flow with rough forcing."""

from .constitutive import SHIPPED_MODELS, StressModel, algebra_certificate
from .grid import MacGrid, StaggeredTensor, StaggeredVelocity, manufactured_solution
from .weights import GridField, Weight, ap_constant, maximal_function, weight_from_forcing

__version__ = "0.1.0"

__all__ = [
    "SHIPPED_MODELS", "StressModel", "algebra_certificate", "MacGrid", "StaggeredTensor",
    "StaggeredVelocity", "manufactured_solution", "GridField", "Weight", "ap_constant",
    "maximal_function", "weight_from_forcing",
]
