"""Exception types raised across the package."""


class RotSdpError(Exception):
    """Base class for all package errors."""


class InvalidQuaternion(RotSdpError, ValueError):
    pass


class DegenerateInput(RotSdpError, ValueError):
    pass


class SingularPoint(RotSdpError):
    pass


class DomainMismatch(RotSdpError, ValueError):
    pass


class TranslationUnobservable(RotSdpError):
    pass


class CertificateInvalid(RotSdpError):
    pass


class NotPSD(RotSdpError):
    pass


class RoundingDegenerate(RotSdpError):
    pass


class OracleUnavailable(RotSdpError):
    pass


class InsufficientRealIntersections(RotSdpError):
    pass


class SamplingFailed(RotSdpError):
    pass


class DegenerateSelection(RotSdpError):
    pass


class NoStructuredM0(RotSdpError):
    pass


class AssemblyFailed(RotSdpError):
    pass


class FitFailed(RotSdpError):
    pass


class ConfigError(RotSdpError, ValueError):
    pass


class SolverFailure(RotSdpError):
    """The relaxation did not reach the requested accuracy."""

    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution
