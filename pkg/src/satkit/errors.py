"""Exception hierarchy shared by all satkit modules.

The CLI maps these onto process exit codes, so library code raises the most
specific class that applies.
"""


class SatkitError(Exception):
    exit_code = 1


class ConfigError(SatkitError, ValueError):
    exit_code = 1


class MissingArtifactError(SatkitError, LookupError):
    """A checkpoint, store entry, or other on-disk artifact is absent."""

    exit_code = 2


class ChecksumError(SatkitError):
    exit_code = 2


class NumericalError(SatkitError, ArithmeticError):
    """Non-finite loss, logits, or gradients."""

    exit_code = 3
