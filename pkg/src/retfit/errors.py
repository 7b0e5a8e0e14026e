"""Exception hierarchy shared by every pipeline stage.

The CLI maps these onto process exit codes: usage/config problems exit 1,
data problems (missing ids, malformed files, contract violations) exit 2,
numeric failures (non-finite losses, degenerate norms) exit 3.
"""

from __future__ import annotations


class RetfitError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(RetfitError):
    """Invalid configuration or command usage."""

    exit_code = 1


class DataError(RetfitError):
    """Malformed or inconsistent input data; the message names the offender."""

    exit_code = 2


class NumericError(RetfitError):
    """Numeric failure: non-finite loss, zero-norm embedding, degenerate scale."""

    exit_code = 3
