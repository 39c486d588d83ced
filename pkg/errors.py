"""Exception hierarchy shared by every slip-disk module."""

from __future__ import annotations

from typing import List, Optional, Sequence


class SlipDiskError(Exception):
    """Base class for all simulator errors.

    ``step`` is filled in by the simulation loop when the error escapes a
    time step, so callers can tell where a long run failed.
    """

    step: Optional[int] = None

    def __str__(self) -> str:
        message = super().__str__()
        if self.step is not None:
            return f"{message} (step {self.step})"
        return message


class ParameterError(SlipDiskError, ValueError):
    """An argument or configuration field is outside its valid range."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class MeshIndexError(SlipDiskError, IndexError):
    """An edge index does not refer to a boundary edge."""


class TransformDegeneracyError(SlipDiskError):
    """The flow map stopped being volume preserving or invertible."""

    def __init__(self, message: str, node: int, det: float):
        super().__init__(f"{message} at node {node} (det J_X = {det:.12g})")
        self.node = node
        self.det = det


class SolverError(SlipDiskError):
    """The saddle-point factorization or solve failed."""

    def __init__(self, message: str, residuals: Sequence[float] = ()):
        super().__init__(message)
        self.residuals: List[float] = list(residuals)


class PicardNonConvergenceError(SlipDiskError):
    """The per-step fixed point did not reach its tolerance."""

    def __init__(self, residuals: Sequence[float], dt: float):
        self.residuals: List[float] = list(residuals)
        self.dt = dt
        last = self.residuals[-1] if self.residuals else float("nan")
        super().__init__(
            f"Picard iteration did not converge after {len(self.residuals)} "
            f"iterations (last residual {last:.3e}); reduce dt below {dt:.3e}"
        )


class ConfigError(SlipDiskError, ValueError):
    """A configuration file failed validation; ``errors`` lists every problem."""

    def __init__(self, errors: Sequence[str]):
        self.errors: List[str] = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


class OutputError(SlipDiskError, OSError):
    """A result file could not be written or read back."""

    def __init__(self, path, cause: OSError):
        super().__init__(f"{path}: {cause.strerror or cause}")
        self.path = path
        self.cause = cause
