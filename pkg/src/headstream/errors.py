"""Exception hierarchy and the process exit codes the CLI maps it to."""

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_INVARIANT = 3


class HeadstreamError(Exception):
    """Base class for every error raised by this package."""

    exit_code = EXIT_INVARIANT


class ConfigError(HeadstreamError):
    """Invalid configuration value or incompatible dimensions."""

    exit_code = EXIT_CONFIG


class DataError(HeadstreamError):
    """Input data violates its contract (NaN, bad norm, bad label...)."""

    exit_code = EXIT_DATA


class FormatError(HeadstreamError):
    """Corrupt, truncated, or unsupported binary file."""

    exit_code = EXIT_DATA


class StateError(HeadstreamError):
    """Operation invoked in a state that cannot serve it."""

    exit_code = EXIT_INVARIANT


class InvariantError(HeadstreamError):
    """A runtime invariant check failed; indicates an internal bug."""

    exit_code = EXIT_INVARIANT
