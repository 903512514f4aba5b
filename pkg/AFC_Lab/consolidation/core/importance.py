"""
Channel importance of tapped feature maps.

raw[l][c]        = sum over examples of ||dL_cls/dZ_lc||_F^2
normalized[l][c] = raw[l][c] / mean_c(raw[l])

Gradients come from one backward pass per batch. Batch norm runs in eval
mode, so examples do not interact and slicing the batch gradient along the
batch axis yields per-example gradients.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError
from .losses import classification_loss_per_example
from .network import IncrementalNet

logger = logging.getLogger(__name__)


@dataclass
class ImportanceTable:
    stage: int
    layers: List[int]
    raw: List[np.ndarray]
    normalized: Optional[List[np.ndarray]] = None
    sample_count: int = 0

    @property
    def finalized(self) -> bool:
        return self.normalized is not None

    def rows(self):
        """(stage, layer, channel, raw, normalized) tuples."""
        for li, layer in enumerate(self.layers):
            for c, value in enumerate(self.raw[li]):
                norm = float(self.normalized[li][c]) if self.normalized is not None else float("nan")
                yield self.stage, layer, c, float(value), norm


@dataclass
class VariabilityRow:
    sample_size: int
    layer: int
    mean_std: float
    max_std: float
    per_channel_std: np.ndarray = field(repr=False)


# -----------------------------------------------------------------------------
# Per-example gradients at the taps
# -----------------------------------------------------------------------------
def tap_gradients(model: IncrementalNet, images: np.ndarray, targets: np.ndarray,
                  batch_size: int = 64, include_true_class: bool = False,
                  bn_eval: bool = True) -> List[np.ndarray]:
    """Per-example dL_cls/dZ for every tap: one [N, C, H, W] array per tapped layer."""
    if not model.tap_indices:
        raise ContractError("model has no feature taps")
    if len(images) == 0:
        raise ContractError("importance estimation needs at least one example")
    was_training = model.training
    if bn_eval:
        model.eval()
    chunks: List[List[np.ndarray]] = [[] for _ in model.tap_indices]
    try:
        for start in range(0, len(images), batch_size):
            # tracking the input forces recording even for frozen parameters
            x = T.Tensor(images[start:start + batch_size], requires_grad=True)
            with T.Tape():
                out = model.forward(x, update_stats=False)
                per_example = classification_loss_per_example(
                    out.scores, targets[start:start + batch_size], model.head.eta.data,
                    model.head.delta, include_true_class)
                grads = T.backward(T.tsum(per_example), [tap.maps for tap in out.taps])
            for li, tap in enumerate(out.taps):
                chunks[li].append(grads[tap.maps])
    finally:
        model.train(was_training)
    return [np.concatenate(c, axis=0) for c in chunks]


def per_example_importance(model: IncrementalNet, images: np.ndarray, targets: np.ndarray,
                           batch_size: int = 64, include_true_class: bool = False,
                           bn_eval: bool = True) -> List[np.ndarray]:
    """Squared Frobenius norm of each example's tap gradient: one [N, C] array per layer."""
    grads = tap_gradients(model, images, targets, batch_size, include_true_class, bn_eval)
    return [np.sum(g * g, axis=(2, 3)) for g in grads]


def _accumulate(per_example: np.ndarray) -> np.ndarray:
    # fsum: exact-sum semantics, independent of order
    return np.array([math.fsum(per_example[:, c]) for c in range(per_example.shape[1])])


# -----------------------------------------------------------------------------
# Estimation
# -----------------------------------------------------------------------------
def estimate(model: IncrementalNet, images: np.ndarray, targets: np.ndarray, stage: int = 0,
             sample_limit: Optional[int] = None, seed: int = 0, batch_size: int = 64,
             include_true_class: bool = False, bn_eval: bool = True) -> ImportanceTable:
    """Raw table accumulated over all examples, or over a seeded subset of `sample_limit`."""
    if sample_limit is not None and sample_limit <= 0:
        raise ContractError(f"sample_limit must be > 0, got {sample_limit}")
    n = len(images)
    if n == 0:
        raise ContractError("importance estimation needs a non-empty dataset")
    if sample_limit is not None and sample_limit < n:
        pick = np.sort(np.random.default_rng(seed).choice(n, size=sample_limit, replace=False))
        images, targets = images[pick], targets[pick]
    per_example = per_example_importance(model, images, targets, batch_size, include_true_class, bn_eval)
    table = ImportanceTable(stage=stage, layers=list(model.tap_indices),
                            raw=[_accumulate(p) for p in per_example], sample_count=len(images))
    logger.info("Importance estimated on %d examples over %d layers", table.sample_count, len(table.layers))
    return table


def normalize_layer(raw: np.ndarray, layer: int = 0) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if np.any(raw < 0):
        raise ContractError(f"layer {layer}: raw importance has negative entries")
    layer_mean = math.fsum(raw) / raw.size
    if layer_mean <= 0:
        logger.warning("Layer %d has all-zero importance; falling back to uniform weights", layer)
        return np.ones_like(raw)
    return raw / layer_mean


def finalize(table: ImportanceTable) -> ImportanceTable:
    """Divide every layer by its channel mean, so each layer averages to 1."""
    table.normalized = [normalize_layer(r, layer) for r, layer in zip(table.raw, table.layers)]
    return table


def uniform_table(stage: int, layers: Sequence[int], channels: Sequence[int]) -> ImportanceTable:
    """Every weight exactly 1 (the uniform-importance baseline)."""
    ones = [np.ones(c) for c in channels]
    return ImportanceTable(stage=stage, layers=list(layers), raw=[o.copy() for o in ones],
                           normalized=ones, sample_count=0)


# -----------------------------------------------------------------------------
# Sample-size study
# -----------------------------------------------------------------------------
def importance_variability(model: IncrementalNet, images: np.ndarray, targets: np.ndarray,
                           sample_sizes: Sequence[int], repeats: int, seed: int = 0,
                           batch_size: int = 64) -> List[VariabilityRow]:
    """
    Std of the normalised importance across `repeats` random subsets, per sample size.
    Per-example contributions are computed once and re-summed for every subset.
    """
    n = len(images)
    if any(s < 1 or s > n for s in sample_sizes):
        raise ContractError(f"sample sizes must lie in [1, {n}], got {list(sample_sizes)}")
    if repeats < 1:
        raise ContractError(f"repeats must be >= 1, got {repeats}")
    if repeats == 1:
        logger.warning("importance_variability with repeats=1 reports zero spread")
    per_example = per_example_importance(model, images, targets, batch_size)
    rng = np.random.default_rng(seed)
    rows: List[VariabilityRow] = []
    for size in sample_sizes:
        draws = [np.sort(rng.choice(n, size=size, replace=False)) for _ in range(repeats)]
        for li, layer in enumerate(model.tap_indices):
            normalized = np.stack([normalize_layer(_accumulate(per_example[li][d]), layer) for d in draws])
            std = normalized.std(axis=0)
            std[np.all(normalized == normalized[0], axis=0)] = 0.0
            rows.append(VariabilityRow(sample_size=int(size), layer=layer, mean_std=float(std.mean()),
                                       max_std=float(std.max()), per_channel_std=std))
    return rows
