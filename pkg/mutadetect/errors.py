"""Exception hierarchy for mutadetect.

Every error carries a human-readable message, an optional hint, and the
process exit code the CLI uses when the error escapes a command:

    0 success, 1 unexpected, 2 config error, 3 data error, 4 numerical failure.
"""

from typing import Any, Dict, Optional


class MutaDetectError(Exception):
    """Base exception with helpful context for the CLI."""

    exit_code: int = 1

    def __init__(self, message: str, hint: str = ""):
        """Initialize the error with a message and an optional hint."""
        self.message = message
        self.hint = hint
        super().__init__(self.message)

    def to_dict(self) -> Dict[str, Any]:
        """Convert error to dictionary for command results."""
        return {
            "status": "error",
            "error": self.message,
            "error_type": type(self).__name__,
            "hint": self.hint,
            "exit_code": self.exit_code,
        }


class ConfigError(MutaDetectError):
    """Invalid or inconsistent run configuration."""

    exit_code = 2


class DataError(MutaDetectError):
    """Input files or derived datasets are unusable."""

    exit_code = 3


class ParseError(DataError):
    """A corpus record could not be parsed."""

    def __init__(self, message: str, line: Optional[int] = None, hint: str = ""):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message, hint)


class LengthMismatchError(DataError):
    """Records in one corpus do not share a length."""

    def __init__(self, expected: int, offenders: Dict[str, int]):
        self.expected = expected
        self.offenders = dict(offenders)
        listed = ", ".join(f"{rid} ({n})" for rid, n in sorted(self.offenders.items()))
        super().__init__(
            f"{len(self.offenders)} record(s) differ from length {expected}: {listed}",
            hint="Inputs must be pre-aligned to one length",
        )


class InvalidSymbolError(DataError):
    """A residue symbol is neither canonical nor a known ambiguity code."""


class GapError(DataError):
    """Consecutive time steps are missing from a window."""

    def __init__(self, missing: int):
        self.missing = missing
        super().__init__(
            f"time step {missing} is missing from the window",
            hint="Every window needs T+1 consecutive cohorts",
        )


class BoundaryError(DataError):
    """A position lacks the trigram context its embedding needs."""


class SamplingError(DataError):
    """A cluster chain cannot be sampled."""


class SplitError(DataError):
    """A cohort cannot be split."""


class EmbeddingFormatError(DataError):
    """The trigram table file is malformed."""


class CheckpointError(DataError):
    """A checkpoint does not match the expected format or model shape."""


class NumericalError(MutaDetectError):
    """Tensor arithmetic or training produced an invalid state."""

    exit_code = 4


class DimensionError(NumericalError):
    """Operand shapes are incompatible."""


class DomainError(NumericalError):
    """An argument lies outside a function's domain."""


class ContractError(NumericalError):
    """A caller broke an API precondition."""


class NonFiniteLossError(NumericalError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, epoch: int, batch: int, max_abs_grad: float):
        self.epoch = epoch
        self.batch = batch
        self.max_abs_grad = max_abs_grad
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch} "
            f"(max |grad| of previous step {max_abs_grad:.3g})",
            hint="Lower the learning rate or check inputs for extreme values",
        )


class GradCheckFailure(NumericalError):
    """Analytic and finite-difference gradients disagree."""


class TrialError(MutaDetectError):
    """A trial failed; wraps the cause and keeps its exit code."""

    def __init__(self, trial: int, cause: Exception):
        self.trial = trial
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
        super().__init__(
            f"trial {trial} failed: {cause}", hint=getattr(cause, "hint", "")
        )
