"""Exception hierarchy shared by all modules."""


class EITError(Exception):
    """Base class for every error raised by this package."""


class ParameterError(EITError, ValueError):
    """A numeric parameter lies outside its admissible domain."""


class DomainError(ParameterError):
    """An angle or coordinate lies outside the parametrized surface patch."""


class MeshParseError(EITError):
    """Malformed mesh file. ``line`` is the 1-based offending line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MeshValidationError(EITError):
    """A mesh violates one of its structural invariants."""

    def __init__(self, invariant, detail=""):
        self.invariant = invariant
        msg = f"mesh invariant '{invariant}' violated"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class LayoutError(ParameterError):
    """Electrode layout is infeasible (bad angles or overlapping electrodes)."""


class ConductivityError(ParameterError):
    """Nonpositive conductivity value."""


class NumericalError(EITError, ArithmeticError):
    """Factorization failure, loss of definiteness or an unmet residual bound."""


class DivergenceError(NumericalError):
    """An iterative reconstruction left the admissible conductivity range."""


class BasisError(NumericalError):
    """Current basis does not span the mean-free subspace."""


class ConfigError(EITError):
    """Invalid experiment configuration; ``path`` names the offending field."""

    def __init__(self, message, path=None):
        self.path = path
        if path:
            message = f"{path}: {message}"
        super().__init__(message)


class FormatError(EITError, OSError):
    """A binary or CSV artifact does not follow its declared layout."""
