"""Exception hierarchy shared across the package."""


class EitError(Exception):
    """Base class for all package errors."""


class ValidationError(EitError):
    """Invalid inputs, configuration, or file contents."""


class MeshError(ValidationError):
    """Mesh construction or mesh invariant failure."""


class NumericalError(EitError):
    """A numerical procedure failed (factorization, root-find, non-convergence)."""
