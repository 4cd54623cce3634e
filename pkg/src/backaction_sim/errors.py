"""Exception hierarchy shared by all modules.

ValidationError covers bad inputs and violated invariants (CLI exit code 1);
NumericError covers solver and quadrature failures (CLI exit code 2).
"""


class BackactionError(Exception):
    """Base class for all package errors."""


class ValidationError(BackactionError):
    """Input or invariant violation."""


class ConfigError(ValidationError):
    """Malformed configuration document; message names the offending key."""


class NumericError(BackactionError):
    """A numerical procedure failed to converge; message reports the residual."""
