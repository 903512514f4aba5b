"""Continual-learning metrics over a lower-triangular accuracy matrix."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .errors import ContractError


@dataclass
class AccuracyMatrix:
    """rows[t][i]: accuracy (%) on task i after stage t (i <= t); seen[t]: on all seen classes."""
    rows: List[List[float]] = field(default_factory=list)
    seen: List[float] = field(default_factory=list)

    def add_stage(self, task_accuracies: Sequence[float], seen_accuracy: float) -> None:
        t = len(self.rows)
        if len(task_accuracies) != t + 1:
            raise ContractError(f"stage {t} needs {t + 1} task accuracies, got {len(task_accuracies)}")
        values = [float(a) for a in task_accuracies] + [float(seen_accuracy)]
        if any(not 0.0 <= a <= 100.0 for a in values):
            raise ContractError(f"accuracies must lie in [0, 100], got {values}")
        self.rows.append(values[:-1])
        self.seen.append(values[-1])

    @property
    def num_stages(self) -> int:
        return len(self.rows)


def avg_incremental_accuracy(seen: Sequence[float]) -> float:
    if len(seen) == 0:
        raise ContractError("average incremental accuracy of an empty sequence")
    return float(np.mean(np.asarray(seen, dtype=np.float64)))


def backward_transfer(a: AccuracyMatrix) -> float:
    """(1/(T-1)) sum_{i<T-1} (a[T-1][i] - a[i][i])."""
    t = a.num_stages
    if t < 2:
        raise ContractError(f"backward transfer needs >= 2 stages, got {t}")
    final = a.rows[-1]
    return float(np.mean([final[i] - a.rows[i][i] for i in range(t - 1)]))


def average_accuracy(a: AccuracyMatrix) -> float:
    if a.num_stages == 0:
        raise ContractError("average accuracy of an empty matrix")
    return float(np.mean(a.rows[-1]))


def accuracy(pred: np.ndarray, target: np.ndarray) -> float:
    """Percentage of matches; 0 for an empty slice."""
    pred, target = np.asarray(pred), np.asarray(target)
    if target.size == 0:
        return 0.0
    return float(100.0 * np.mean(pred == target))
