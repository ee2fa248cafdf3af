"""Tractor-semitrailer simulation, sensitivity, estimation and uncertainty toolkit."""
from .params import ParameterSet

__all__ = ["ParameterSet"]
__version__ = "0.1.0"
