"""Exception types shared across the pipeline stages."""


class CmmError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(CmmError):
    """Operand shapes are incompatible with the requested operation."""


class ProgramError(CmmError):
    """Malformed program file or unknown statement."""


class FitError(CmmError):
    """Time-model regression could not be performed."""


class PredictionError(CmmError):
    """Time model has no entry for the requested node/link/op."""


class ConfigurationError(CmmError):
    """Cluster description is invalid or cannot be auto-configured."""


class SchedulingError(CmmError):
    """Schedule construction failed (model gaps, infeasible cache, ...)."""


class IntegrityError(CmmError):
    """Schedule or tiled DAG violates a structural invariant."""


class SimulationError(CmmError):
    """Schedule replay diverged from the plan (unknown entries, cache miss)."""


class ExecutionError(CmmError):
    """Emulated execution failed (non-finite values, deadlock, mismatch)."""
