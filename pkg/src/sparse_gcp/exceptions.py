"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`GCPError`
and carries an ``exit_code`` that the command line maps to the process
status.
"""


class GCPError(Exception):
    exit_code = 1


class ConfigError(GCPError, ValueError):
    """Inconsistent or out-of-range configuration, detected before a run."""

    exit_code = 2


class TensorFormatError(GCPError, ValueError):
    """Malformed tensor or model file, or invalid tensor contents."""

    exit_code = 3


class SamplingError(GCPError, RuntimeError):
    exit_code = 4


class SimulationError(GCPError, RuntimeError):
    """Violation of a distributed-simulation invariant (e.g. a dropped worker)."""

    exit_code = 5


class OracleGuardError(GCPError, ValueError):
    """A dense test oracle was asked to enumerate too many entries."""

    exit_code = 6
