"""
Class-stream data operations

- Dataset container (images in [0,1], integer labels)
- Synthetic Gaussian-blob generator (desk-scale stand-in for a natural-image corpus)
- IDX ingestion
- StagePlan: seeded class order split into incremental stages
- stage_loader: seeded mini-batches over the current stage plus the exemplar memory
- MixtureWeights: old/new proportions realised by a stage's training stream
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from consolidation.core.errors import ConfigError, ContractError, DimensionError
from formats.idx_codec import MAGIC_IMAGES, MAGIC_LABELS, IdxFormatError, read_idx

logger = logging.getLogger(__name__)

DEFAULT_NOISE = 0.25
BLOBS_PER_PROTOTYPE = 4


# -----------------------------------------------------------------------------
# Containers
# -----------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray          # [N, C, H, W], float64 in [0, 1]
    labels: np.ndarray          # [N], int64 in [0, K)
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DimensionError(f"images must be [N,C,H,W], got {self.images.shape}")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.images.shape[0]:
            raise DimensionError(f"labels {self.labels.shape} do not match images {self.images.shape}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)

    def indices_of(self, classes: Sequence[int]) -> np.ndarray:
        """Dataset positions whose label is in `classes`, ascending."""
        return np.flatnonzero(np.isin(self.labels, np.asarray(list(classes), dtype=np.int64)))

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class MixtureWeights:
    phi_old: float
    phi_new: float = field(init=False)

    def __post_init__(self):
        # closed interval: the boundaries are valid degenerate mixtures
        if not 0.0 <= self.phi_old <= 1.0:
            raise ContractError(f"phi_old must lie in [0,1], got {self.phi_old}")
        object.__setattr__(self, "phi_new", 1.0 - float(self.phi_old))

    @classmethod
    def from_counts(cls, n_old: int, n_new: int) -> "MixtureWeights":
        total = n_old + n_new
        if total <= 0:
            raise ContractError("mixture needs at least one example")
        return cls(phi_old=n_old / total)


# -----------------------------------------------------------------------------
# Synthetic data
# -----------------------------------------------------------------------------
def synthetic_prototypes(num_classes: int, image_size: int, seed: int, channels: int = 3) -> np.ndarray:
    """One fixed random image per class: a sum of Gaussian blobs, scaled into [0,1]."""
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    rng = np.random.default_rng(seed)
    grid = np.arange(image_size, dtype=float)
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    protos = np.zeros((num_classes, channels, image_size, image_size))
    for k in range(num_classes):
        for c in range(channels):
            img = np.zeros((image_size, image_size))
            for _ in range(BLOBS_PER_PROTOTYPE):
                cy, cx = rng.uniform(0, image_size - 1, size=2)
                width = rng.uniform(0.08, 0.25) * image_size
                amp = rng.uniform(0.4, 1.0)
                img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * width ** 2))
            protos[k, c] = img / max(float(img.max()), 1e-12)
    return protos


def make_synthetic(num_classes: int, per_class: int, image_size: int, seed: int,
                   noise: float = DEFAULT_NOISE, channels: int = 3) -> Dataset:
    """prototype + i.i.d. Gaussian noise, clipped to [0,1]; class-major order."""
    if per_class < 2:
        raise ConfigError(f"per_class must be >= 2, got {per_class}")
    protos = synthetic_prototypes(num_classes, image_size, seed, channels)
    rng = np.random.default_rng([seed, 1])
    reps = np.repeat(protos, per_class, axis=0)
    images = np.clip(reps + noise * rng.standard_normal(reps.shape), 0.0, 1.0)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    return Dataset(images, labels, num_classes)


def train_test_split(dataset: Dataset, test_per_class: int) -> Tuple[Dataset, Dataset]:
    """Stratified split: the last `test_per_class` examples of every class go to test."""
    train_idx: List[int] = []
    test_idx: List[int] = []
    for k in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == k)
        if len(idx) <= test_per_class or test_per_class < 1:
            raise ConfigError(f"class {k} has {len(idx)} examples; need >= 1 train and >= 1 test")
        train_idx.extend(idx[:-test_per_class].tolist())
        test_idx.extend(idx[-test_per_class:].tolist())
    return dataset.subset(train_idx), dataset.subset(test_idx)


# -----------------------------------------------------------------------------
# IDX ingestion
# -----------------------------------------------------------------------------
def load_idx_dataset(images_path: str, labels_path: str, num_classes: int) -> Dataset:
    raw_images = read_idx(images_path, MAGIC_IMAGES)
    raw_labels = read_idx(labels_path, MAGIC_LABELS)
    if raw_images.shape[0] != raw_labels.shape[0]:
        raise IdxFormatError(f"{raw_images.shape[0]} images but {raw_labels.shape[0]} labels")
    labels = raw_labels.astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        raise IdxFormatError(f"{labels_path}: label {int(labels.max())} out of range [0, {num_classes})")
    images = raw_images.astype(np.float64)[:, None, :, :] / 255.0
    logger.info("Loaded %d IDX images of size %s from %s", len(labels), raw_images.shape[1:], images_path)
    return Dataset(images, labels, num_classes)


# -----------------------------------------------------------------------------
# Stage plan
# -----------------------------------------------------------------------------
@dataclass(frozen=True)
class StagePlan:
    class_order: Tuple[int, ...]
    stages: Tuple[Tuple[int, ...], ...]
    n_t: Tuple[int, ...]

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    @property
    def num_classes(self) -> int:
        return len(self.class_order)

    def n_prev(self, stage: int) -> int:
        return self.n_t[stage - 1] if stage > 0 else 0

    def new_classes(self, stage: int) -> Tuple[int, ...]:
        return self.stages[stage]

    def old_classes(self, stage: int) -> Tuple[int, ...]:
        return self.class_order[: self.n_prev(stage)]

    def seen_classes(self, stage: int) -> Tuple[int, ...]:
        return self.class_order[: self.n_t[stage]]

    def rank(self) -> np.ndarray:
        """Head column of every original class id."""
        out = np.empty(self.num_classes, dtype=np.int64)
        out[np.asarray(self.class_order)] = np.arange(self.num_classes)
        return out

    def to_columns(self, labels: np.ndarray) -> np.ndarray:
        return self.rank()[np.asarray(labels, dtype=np.int64)]

    def task_columns(self, stage: int) -> range:
        return range(self.n_prev(stage), self.n_t[stage])


def build_stage_plan(num_classes: int, num_stages: int, class_order_seed: int,
                     initial_half: bool, initial_classes: Optional[int] = None) -> StagePlan:
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    if num_stages < 1:
        raise ConfigError(f"num_stages must be >= 1, got {num_stages}")

    if initial_classes is not None:
        first = int(initial_classes)
        if not 1 <= first <= num_classes:
            raise ConfigError(f"initial_classes must lie in [1, {num_classes}], got {first}")
    elif initial_half:
        if num_stages == 1:
            raise ConfigError("initial_half needs at least 2 stages")
        first = num_classes // 2
    else:
        if num_classes % num_stages:
            raise ConfigError(f"{num_classes} classes do not split evenly into {num_stages} stages")
        first = num_classes // num_stages

    rest = num_classes - first
    if num_stages == 1:
        if rest:
            raise ConfigError(f"a single stage must hold all {num_classes} classes, got {first}")
        step = 0
    else:
        if rest % (num_stages - 1) or rest == 0:
            raise ConfigError(f"{rest} remaining classes do not split evenly into {num_stages - 1} stages")
        step = rest // (num_stages - 1)

    order = tuple(int(c) for c in np.random.default_rng(class_order_seed).permutation(num_classes))
    sizes = [first] + [step] * (num_stages - 1)
    bounds = np.cumsum(sizes)
    stages = tuple(order[b - s:b] for s, b in zip(sizes, bounds))
    return StagePlan(class_order=order, stages=stages, n_t=tuple(int(b) for b in bounds))


# -----------------------------------------------------------------------------
# Loader
# -----------------------------------------------------------------------------
@dataclass
class Batch:
    indices: np.ndarray         # dataset positions
    images: np.ndarray          # [B, C, H, W] after augmentation
    labels: np.ndarray          # original class ids
    targets: np.ndarray         # head columns
    from_memory: np.ndarray     # bool, True for exemplar rows

    def __len__(self) -> int:
        return int(self.indices.shape[0])


def stage_indices(plan: StagePlan, dataset: Dataset, stage_idx: int,
                  exemplars: Sequence[int] = ()) -> Tuple[np.ndarray, np.ndarray]:
    """Positions of D^t union E^t (ascending) and the exemplar mask."""
    if not 0 <= stage_idx < plan.num_stages:
        raise ContractError(f"stage {stage_idx} outside plan of {plan.num_stages} stages")
    current = dataset.indices_of(plan.new_classes(stage_idx))
    memory = np.unique(np.asarray(list(exemplars), dtype=np.int64))
    union = np.union1d(current, memory)
    return union, np.isin(union, memory)


def _augment(images: np.ndarray, rng: np.random.Generator, flip: bool, pad_crop: int) -> np.ndarray:
    out = images.copy()
    if flip:
        mask = rng.random(len(out)) < 0.5
        out[mask] = out[mask][..., ::-1]
    if pad_crop > 0:
        p = int(pad_crop)
        h, w = out.shape[2], out.shape[3]
        padded = np.pad(out, ((0, 0), (0, 0), (p, p), (p, p)))
        offsets = rng.integers(0, 2 * p + 1, size=(len(out), 2))
        for i, (dy, dx) in enumerate(offsets):
            out[i] = padded[i, :, dy:dy + h, dx:dx + w]
    return out


def stage_loader(plan: StagePlan, dataset: Dataset, stage_idx: int, exemplars: Sequence[int] = (),
                 batch_size: int = 32, seed: int = 0, flip: bool = False,
                 pad_crop: int = 0) -> Iterator[Batch]:
    """
    Shuffled mini-batches over D^t union E^t; every element exactly once,
    last partial batch kept. Same seed, same order.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    union, memory_mask = stage_indices(plan, dataset, stage_idx, exemplars)
    if union.size == 0:
        raise ConfigError(f"stage {stage_idx}: no training data and no exemplars")
    rng = np.random.default_rng(seed)
    order = rng.permutation(union.size)
    rank = plan.rank()
    for start in range(0, union.size, batch_size):
        pick = order[start:start + batch_size]
        idx = union[pick]
        images = dataset.images[idx]
        if flip or pad_crop:
            images = _augment(images, rng, flip, pad_crop)
        labels = dataset.labels[idx]
        yield Batch(indices=idx, images=images, labels=labels,
                    targets=rank[labels], from_memory=memory_mask[pick])
