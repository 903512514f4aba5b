"""
Central finite-difference checks against the tape's analytic gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward

DEFAULT_EPS = 1e-5
DEFAULT_TOLERANCE = 1e-4
# Below this magnitude, gradients are compared absolutely.
ERROR_FLOOR = 1e-4


@dataclass
class GradCheckReport:
    checked: int = 0
    max_rel_error: float = 0.0
    worst: Optional[str] = None
    errors: List[float] = field(default_factory=list, repr=False)

    def passed(self, tolerance: float = DEFAULT_TOLERANCE) -> bool:
        return self.max_rel_error < tolerance


def relative_error(analytic: float, numeric: float, floor: float = ERROR_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def numeric_partial(build_loss: Callable[[], Tensor], target: Tensor, index: tuple,
                    eps: float = DEFAULT_EPS) -> float:
    """(L(x + eps e_i) - L(x - eps e_i)) / 2 eps, restoring the entry afterwards."""
    original = target.data[index]
    try:
        target.data[index] = original + eps
        up = build_loss().item()
        target.data[index] = original - eps
        down = build_loss().item()
    finally:
        target.data[index] = original
    return (up - down) / (2.0 * eps)


def check_gradients(build_loss: Callable[[], Tensor],
                    params: Sequence[Tensor],
                    rng: Optional[np.random.Generator] = None,
                    max_coords: int = 20,
                    eps: float = DEFAULT_EPS) -> GradCheckReport:
    """
    Compare analytic gradients of ``build_loss()`` with central differences.

    ``build_loss`` must rebuild the graph from the current parameter values on
    every call. Up to ``max_coords`` coordinates per parameter are sampled.
    """
    rng = rng or np.random.default_rng(0)
    with Tape():
        loss = build_loss()
        analytic = backward(loss, params)

    report = GradCheckReport()
    for p_idx, p in enumerate(params):
        if p.size == 0:
            continue
        flat = np.arange(p.size)
        picks = flat if p.size <= max_coords else rng.choice(flat, size=max_coords, replace=False)
        for k in np.sort(picks):
            index = np.unravel_index(int(k), p.shape)
            num = numeric_partial(build_loss, p, index, eps)
            ana = float(analytic[p][index])
            err = relative_error(ana, num)
            report.checked += 1
            report.errors.append(err)
            if report.worst is None or err > report.max_rel_error:
                report.max_rel_error = err
                report.worst = f"param[{p_idx}]{tuple(int(i) for i in index)}: analytic={ana:.6g} numeric={num:.6g}"
    return report
