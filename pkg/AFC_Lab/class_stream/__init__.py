# class_stream/__init__.py
"""
Datasets, stage plans and loaders for class-incremental runs.
"""

from .dataops import (
    Batch,
    Dataset,
    MixtureWeights,
    StagePlan,
    build_stage_plan,
    load_idx_dataset,
    make_synthetic,
    stage_indices,
    stage_loader,
    synthetic_prototypes,
    train_test_split,
)

__all__ = [
    "Batch",
    "Dataset",
    "MixtureWeights",
    "StagePlan",
    "build_stage_plan",
    "load_idx_dataset",
    "make_synthetic",
    "stage_indices",
    "stage_loader",
    "synthetic_prototypes",
    "train_test_split",
]
