"""
Exception hierarchy for the consolidation lab.

Every error also derives from the builtin a caller would naturally catch,
so ``except ValueError`` keeps working around shape and config problems.
"""

from __future__ import annotations


class LabError(Exception):
    """Root of all lab errors."""


class DimensionError(LabError, ValueError):
    """Shapes, ranks or channel counts do not line up."""


class ContractError(LabError, ValueError):
    """A documented precondition was violated by the caller."""


class NonDifferentiableError(ContractError):
    """A smoothness check hit a kink (ReLU or clamp boundary)."""


class ConfigError(LabError, ValueError):
    """Invalid configuration, plan or input file."""


class NonFiniteError(LabError, FloatingPointError):
    """NaN or Inf produced while debug checks are enabled."""


class StageAborted(LabError, RuntimeError):
    """Training of a stage stopped on a non-finite loss."""

    def __init__(self, stage: int, epoch: int, iteration: int, detail: str):
        self.stage = stage
        self.epoch = epoch
        self.iteration = iteration
        self.detail = detail
        super().__init__(f"stage {stage} aborted at epoch {epoch}, iter {iteration}: {detail}")
