"""
Exemplar memory: herding selection, budget bookkeeping and the two
inference rules (nearest mean of exemplars, classifier argmax).

Class keys inside the store are head columns; callers map them back to
original class ids through the stage plan.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from scipy.spatial.distance import cdist

from .errors import ConfigError, ContractError, DimensionError

logger = logging.getLogger(__name__)


class BudgetMode(Enum):
    PER_CLASS = "per_class"     # R_per exemplars for every class
    TOTAL = "total"             # R_total shared, floor(R_total / n_t) per class


class SelectionRule(Enum):
    HERDING = "herding"
    RANDOM = "random"


# -----------------------------------------------------------------------------
# Selection rules
# -----------------------------------------------------------------------------
def herd_select(embeddings: np.ndarray, m: int, mean: Optional[np.ndarray] = None) -> List[int]:
    """
    Greedy herding: step s adds the unused x minimising
    ||mu - (sum of chosen + x) / s||. Ties go to the lowest index.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim == 1:
        emb = emb[:, None]
    n = emb.shape[0]
    if n == 0:
        raise ContractError("herding needs a non-empty population")
    if m < 1:
        raise ContractError(f"herding budget must be >= 1, got {m}")
    if m > n:
        logger.warning("Herding budget %d exceeds population %d; keeping all", m, n)
        m = n
    mu = emb.mean(axis=0) if mean is None else np.asarray(mean, dtype=np.float64).reshape(emb.shape[1])
    chosen: List[int] = []
    running = np.zeros(emb.shape[1])
    available = np.ones(n, dtype=bool)
    for step in range(1, m + 1):
        candidate_means = (running[None, :] + emb) / step
        dist = np.linalg.norm(mu[None, :] - candidate_means, axis=1)
        dist[~available] = np.inf
        pick = int(np.argmin(dist))
        chosen.append(pick)
        available[pick] = False
        running += emb[pick]
    return chosen


def random_select(n: int, m: int, rng: np.random.Generator) -> List[int]:
    if m < 1:
        raise ContractError(f"selection budget must be >= 1, got {m}")
    return [int(i) for i in rng.permutation(n)[:min(m, n)]]


# -----------------------------------------------------------------------------
# Store
# -----------------------------------------------------------------------------
@dataclass
class ExemplarStore:
    budget_mode: BudgetMode = BudgetMode.PER_CLASS
    budget: int = 20
    selection: SelectionRule = SelectionRule.HERDING
    per_class: Dict[int, List[int]] = field(default_factory=dict)
    class_means: Dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def class_budget(self, n_seen: int) -> int:
        if self.budget_mode is BudgetMode.PER_CLASS:
            m = int(self.budget)
        else:
            m = int(self.budget) // max(int(n_seen), 1)
        if m < 1:
            raise ConfigError(f"exemplar budget {self.budget} ({self.budget_mode.value}) "
                              f"leaves 0 slots per class for {n_seen} classes")
        return m

    def indices(self) -> np.ndarray:
        """All stored dataset positions, class by class in selection order."""
        flat = [i for k in sorted(self.per_class) for i in self.per_class[k]]
        return np.asarray(flat, dtype=np.int64)

    def __len__(self) -> int:
        return sum(len(v) for v in self.per_class.values())

    def rows(self, stage: int, class_ids: Optional[Sequence[int]] = None):
        """(stage, class, rank, dataset_index); `class_ids` maps columns to original ids."""
        for col in sorted(self.per_class):
            cid = int(class_ids[col]) if class_ids is not None else col
            for rank, idx in enumerate(self.per_class[col]):
                yield stage, cid, rank, int(idx)


def _unit_mean(emb: np.ndarray) -> np.ndarray:
    mu = emb.mean(axis=0)
    norm = np.linalg.norm(mu)
    return mu / norm if norm > 0 else mu


def rebuild(store: ExemplarStore, embeddings: np.ndarray, targets: np.ndarray, new_columns: Sequence[int],
            n_seen: int, rng: Optional[np.random.Generator] = None) -> ExemplarStore:
    """
    Next stage's store.

    `embeddings`/`targets` cover the whole training set (row i = dataset
    position i); only rows of new classes and of stored exemplars are read.
    New classes are selected over all their examples; old classes keep the
    prefix of their previous selection. Means are recomputed from the
    current embeddings of the stored exemplars.
    """
    m = store.class_budget(n_seen)
    rng = rng or np.random.default_rng(0)
    per_class: Dict[int, List[int]] = {k: list(v[:m]) for k, v in store.per_class.items()}
    for col in new_columns:
        pool = np.flatnonzero(targets == col)
        if pool.size == 0:
            raise ContractError(f"class column {col} has no training examples")
        if store.selection is SelectionRule.HERDING:
            order = herd_select(embeddings[pool], m)
        else:
            order = random_select(pool.size, m, rng)
        per_class[int(col)] = [int(pool[i]) for i in order]
    means = {k: _unit_mean(embeddings[np.asarray(v)]) for k, v in per_class.items()}
    new_store = ExemplarStore(budget_mode=store.budget_mode, budget=store.budget, selection=store.selection,
                              per_class=per_class, class_means=means)
    logger.info("Exemplar memory: %d classes, %d per class, %d stored", len(per_class), m, len(new_store))
    return new_store


def rebuild_for_stage(store: ExemplarStore, model, dataset, plan, stage: int,
                      rng: Optional[np.random.Generator] = None) -> ExemplarStore:
    """rebuild() with embeddings taken from `model` for the rows it needs."""
    targets = plan.to_columns(dataset.labels)
    needed = np.union1d(dataset.indices_of(plan.new_classes(stage)), store.indices())
    embeddings = np.zeros((len(dataset), model.embedding_dim))
    embeddings[needed] = model.embed(dataset.images[needed])
    return rebuild(store, embeddings, targets, list(plan.task_columns(stage)), plan.n_t[stage], rng)


# -----------------------------------------------------------------------------
# Inference rules
# -----------------------------------------------------------------------------
def classify_nme(h: np.ndarray, store: ExemplarStore) -> Union[int, np.ndarray]:
    """argmin_k ||h - mu_k||; ties to the lowest class column."""
    if not store.class_means:
        raise ContractError("nearest-mean classification on an empty store")
    keys = np.asarray(sorted(store.class_means), dtype=np.int64)
    means = np.stack([store.class_means[k] for k in keys])
    single = np.ndim(h) == 1
    hh = np.atleast_2d(np.asarray(h, dtype=np.float64))
    if hh.shape[1] != means.shape[1]:
        raise DimensionError(f"embedding width {hh.shape[1]} != class mean width {means.shape[1]}")
    pred = keys[np.argmin(cdist(hh, means), axis=1)]
    return int(pred[0]) if single else pred


def classify_cnn(scores: np.ndarray) -> Union[int, np.ndarray]:
    """argmax_k y_k; ties to the lowest class column."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim == 1:
        return int(np.argmax(s))
    return np.argmax(s, axis=1)
