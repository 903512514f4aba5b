from .data_models import (BaselineMode, BnMode, DatasetKind, DiscSource, ExperimentConfig, DatasetConfig,
                          PlanConfig, NetworkConfig, TrainConfig, MemoryConfig, ImportanceConfig)
from .trainer import cosine_lr, run_stage, run_experiment, StageResult, ExperimentResult
