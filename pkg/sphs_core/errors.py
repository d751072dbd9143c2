"""
Exception hierarchy for the stochastic port-Hamiltonian toolkit.

Every failure the command line maps to an exit code derives from SphsError:
configuration problems exit with 3, failed model or condition checks with 1 and
numerical breakdowns with 2.
"""


class SphsError(Exception):
    """Base exception for toolkit errors"""

    exit_code = 1


class ConfigurationError(SphsError):
    """Malformed or inconsistent input: dimensions, config values, grids"""

    exit_code = 3


class ValidationFailure(SphsError):
    """A model or theorem hypothesis check failed"""

    exit_code = 1


class NumericalError(SphsError):
    """Non-convergence, non-PSD covariance or solver breakdown"""

    exit_code = 2
