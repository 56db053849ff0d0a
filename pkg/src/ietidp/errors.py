"""Exception hierarchy shared by all modules."""


class IetiError(Exception):
    """Base class for every error raised by this package."""


class KnotVectorError(IetiError, ValueError):
    pass


class SingularGeometryError(IetiError):
    """Jacobian determinant vanishes (or changes sign) at a quadrature point."""


class TopologyError(IetiError):
    """Patch sides cannot be matched consistently (ambiguity, T-junction, ...)."""


class UnsupportedConfigurationError(IetiError):
    pass


class ConfigurationError(IetiError, ValueError):
    pass


class SingularMatrixError(IetiError):
    def __init__(self, message, pivot=None):
        super().__init__(message if pivot is None else f"{message} (pivot {pivot})")
        self.pivot = pivot


class NonConvergenceError(IetiError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class RepresentationError(IetiError):
    """Distributed-vector operation called with the wrong representation tag."""


class CommunicationError(IetiError):
    pass


class ConsistencyError(IetiError):
    """Replicated data diverged between workers."""
