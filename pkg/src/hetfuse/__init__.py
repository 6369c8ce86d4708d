"""Channel-filter data fusion over heterogeneous state sets in tree networks."""

from .kernels import BACKEND
from .errors import (ConfigError, DimensionMismatch, HetfuseError, NegativeInformation,
                     NotPositiveDefinite, NumericalError, SingularBlock, SingularMatrix,
                     UnknownEdge, UnknownVariable)
from .varset import TreeTopology, Variable, VariableSet, bias, target, validate_topology
from .ginfo import InfoGaussian, condition_on, embed, marginalize, recombine
from .cf2 import FusionMethod

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "ConfigError", "DimensionMismatch", "FusionMethod", "HetfuseError", "InfoGaussian",
    "NegativeInformation", "NotPositiveDefinite", "NumericalError", "SingularBlock",
    "SingularMatrix", "TreeTopology", "UnknownEdge", "UnknownVariable", "Variable", "VariableSet",
    "bias", "condition_on", "embed", "marginalize", "recombine", "target", "validate_topology",
]
