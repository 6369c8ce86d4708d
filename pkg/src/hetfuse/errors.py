"""Exception hierarchy shared by all hetfuse modules."""


class HetfuseError(Exception):
    """Base class for every error raised by this package."""


class NumericalError(HetfuseError, ArithmeticError):
    """A numerical precondition failed (singular, indefinite, ...)."""


class SingularBlock(NumericalError):
    """Information block to be eliminated is numerically singular."""


class SingularMatrix(NumericalError):
    """A matrix that must be inverted is numerically singular."""


class NotPositiveDefinite(NumericalError):
    """A matrix required to be positive definite is not."""


class NegativeInformation(NumericalError):
    """Fused information matrix lost positive semi-definiteness."""


class UnknownVariable(HetfuseError, KeyError):
    """A variable is not part of the labeled space it was looked up in."""

    def __str__(self):
        return Exception.__str__(self)


class DimensionMismatch(HetfuseError, ValueError):
    """Operand layouts or sizes are inconsistent."""


class UnknownEdge(HetfuseError, KeyError):
    """The requested edge is not part of the tree topology."""

    def __str__(self):
        return Exception.__str__(self)


class ConfigError(HetfuseError, ValueError):
    """Invalid scenario configuration."""
