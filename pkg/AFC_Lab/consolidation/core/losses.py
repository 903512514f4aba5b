"""
Training objective: margin classification loss on LSC scores, importance
weighted feature-map discrepancy, and their stage-weighted sum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .network import FeatureTap
from .tensor import Tensor

MAP_NORM_EPS = 1e-8

Scalar = Union[Tensor, float]


@dataclass
class LossConfig:
    lambda_disc: float = 4.0
    batch_size: int = 32
    map_norm_eps: float = MAP_NORM_EPS
    include_true_class: bool = False

    def __post_init__(self):
        if self.lambda_disc < 0:
            raise ContractError(f"lambda_disc must be >= 0, got {self.lambda_disc}")
        if self.map_norm_eps <= 0:
            raise ContractError(f"map_norm_eps must be > 0, got {self.map_norm_eps}")


@dataclass
class LossReport:
    cls: float
    disc: float
    total: float
    lambda_t: float
    graph: Optional[Tensor] = field(default=None, repr=False, compare=False)


def lambda_t(n_t: int, n_prev: int) -> float:
    """sqrt(n_t / (n_t - n_prev)); grows as the old share of classes grows."""
    if n_prev < 0 or n_t <= n_prev:
        raise ContractError(f"lambda_t needs n_t > n_prev >= 0, got n_t={n_t}, n_prev={n_prev}")
    return math.sqrt(n_t / (n_t - n_prev))


# -----------------------------------------------------------------------------
# Classification
# -----------------------------------------------------------------------------
def margin_values(scores: Tensor, labels: Sequence[int], eta: Scalar, delta: float,
                  include_true_class: bool = False) -> Tensor:
    """
    Pre-clamp margin per row: -log( exp(eta (y_g - delta)) / sum_{i != g} exp(eta y_i) ).

    With `include_true_class` the denominator runs over all classes.
    """
    scores = T.as_tensor(scores)
    if scores.ndim != 2:
        raise DimensionError(f"scores must be [B, K], got {scores.shape}")
    b, k = scores.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if b == 0:
        raise ContractError("classification loss on an empty batch")
    if labels.shape[0] != b:
        raise DimensionError(f"{labels.shape[0]} labels for {b} score rows")
    if labels.min() < 0 or labels.max() >= k:
        raise ContractError(f"labels must lie in [0, {k})")
    if k < 2 and not include_true_class:
        raise ContractError("margin loss needs at least two classes when the true class is excluded")

    onehot = np.zeros((b, k))
    onehot[np.arange(b), labels] = 1.0
    mask = np.ones((b, k)) if include_true_class else 1.0 - onehot

    z = T.as_tensor(eta) * scores
    # constant shift over the denominator entries only
    shift = np.max(np.where(mask > 0, z.data, -np.inf), axis=1, keepdims=True)
    e = T.exp((z - shift) * mask) * mask
    log_denom = T.log(T.tsum(e, axis=1)) + shift.reshape(b)
    true_term = T.tsum(z * onehot, axis=1) - T.as_tensor(eta) * delta
    return log_denom - true_term


def classification_loss_per_example(scores: Tensor, labels: Sequence[int], eta: Scalar, delta: float,
                                    include_true_class: bool = False) -> Tensor:
    """Margin clamped at zero, one value per row."""
    return T.relu(margin_values(scores, labels, eta, delta, include_true_class))


def classification_loss(scores: Tensor, labels: Sequence[int], eta: Scalar, delta: float,
                        include_true_class: bool = False) -> Tensor:
    """Batch mean of the clamped margin loss."""
    return T.mean(classification_loss_per_example(scores, labels, eta, delta, include_true_class))


# -----------------------------------------------------------------------------
# Discrepancy
# -----------------------------------------------------------------------------
def normalize_map(z, eps: float = MAP_NORM_EPS, axis=None) -> Tensor:
    """z / (||z||_F + eps); the norm runs over `axis` (whole tensor by default)."""
    z = T.as_tensor(z)
    keep = axis is not None
    return z / (T.frobenius_norm(z, axis=axis, keepdims=keep) + eps)


def discrepancy_loss(student_taps: Sequence[FeatureTap], teacher_taps: Sequence[FeatureTap],
                     importance: Sequence[np.ndarray], eps: float = MAP_NORM_EPS) -> Tensor:
    """
    (1/B) sum_b sum_l sum_c I[l,c] || n(Z'_lc) - n(Z_lc) ||_F^2

    Each map is Frobenius-normalised on its own before differencing. Teacher
    taps are treated as constants.
    """
    if len(student_taps) != len(teacher_taps) or len(student_taps) != len(importance):
        raise DimensionError(f"{len(student_taps)} student taps, {len(teacher_taps)} teacher taps, "
                             f"{len(importance)} importance layers")
    if not student_taps:
        raise DimensionError("discrepancy loss needs at least one tap")
    total: Optional[Tensor] = None
    batch = student_taps[0].maps.shape[0]
    for s_tap, t_tap, weight in zip(student_taps, teacher_taps, importance):
        if s_tap.maps.shape != t_tap.maps.shape:
            raise DimensionError(f"layer {s_tap.layer}: student {s_tap.maps.shape} vs teacher {t_tap.maps.shape}")
        weight = np.asarray(weight, dtype=np.float64)
        if weight.shape != (s_tap.maps.shape[1],):
            raise DimensionError(f"layer {s_tap.layer}: importance covers {weight.shape} channels, "
                                 f"maps have {s_tap.maps.shape[1]}")
        if np.any(weight < 0):
            raise ContractError(f"layer {s_tap.layer}: importance has negative entries")
        s_norm = normalize_map(s_tap.maps, eps, axis=(2, 3))
        t_norm = normalize_map(t_tap.maps.detach(), eps, axis=(2, 3))
        diff = s_norm - t_norm
        per_channel = T.tsum(diff * diff, axis=(2, 3))
        term = T.tsum(per_channel * weight)
        total = term if total is None else total + term
    return T.scale(total, 1.0 / batch)


# -----------------------------------------------------------------------------
# Combination
# -----------------------------------------------------------------------------
def _value(x: Scalar) -> float:
    return x.item() if isinstance(x, Tensor) else float(x)


def total_loss(cls: Scalar, disc: Optional[Scalar], lambda_disc: float, lambda_t_value: float) -> LossReport:
    """cls + lambda_disc * lambda_t * disc; the disc term is skipped when absent or weighted by 0."""
    coef = float(lambda_disc) * float(lambda_t_value)
    cls_t = T.as_tensor(cls)
    if disc is None or coef == 0.0:
        graph = cls_t
        disc_value = 0.0 if disc is None else _value(disc)
    else:
        graph = cls_t + T.scale(disc, coef)
        disc_value = _value(disc)
    return LossReport(cls=_value(cls), disc=disc_value, total=graph.item(),
                      lambda_t=float(lambda_t_value), graph=graph)
