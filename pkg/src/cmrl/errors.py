"""Shared exception types."""


class SpecError(ValueError):
    """A network spec violates a structural invariant."""


class DimensionMismatch(ValueError):
    """Vector length does not match what the spec or store requires."""


class NumericOverflow(ArithmeticError):
    """A forward pass produced a non-finite activation."""

    def __init__(self, unit_id: int):
        super().__init__(f"non-finite activation at unit {unit_id}")
        self.unit_id = unit_id


class SequencingError(ValueError):
    """A history append arrived with the wrong time index."""


class ContractViolation(ValueError):
    """Caller broke an operation precondition (e.g. mismatched report spans)."""


class CheckpointError(RuntimeError):
    """A checkpoint directory is missing, corrupt, or incompatible."""
