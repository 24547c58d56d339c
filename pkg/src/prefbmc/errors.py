"""Exception hierarchy shared across the package.

Each class maps to a CLI exit code so subcommands can fail with a
consistent contract: 1 usage/config, 2 data, 3 numeric, 4 external service.
"""


class PrefBmcError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class UsageError(PrefBmcError):
    """Bad arguments, bad config, or misuse of an API contract."""

    exit_code = 1


class DataError(PrefBmcError):
    """Malformed or incomplete input data (missing masks, bad JSONL, ...)."""

    exit_code = 2


class NumericError(PrefBmcError):
    """Numeric failure: NaN/Inf, domain violation, or oracle mismatch."""

    exit_code = 3


class ExternalServiceError(PrefBmcError):
    """A remote editor endpoint failed beyond the retry budget."""

    exit_code = 4
