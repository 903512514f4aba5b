EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_VERIFY = 3

CONFIG_HASH_DIGITS = 16
CHECKPOINT_PATTERN = "stage_{:02d}.afc"

# ---- Artifact names inside a run directory ----
ARTIFACTS = {
    "summary": "summary.json",
    "metrics": "metrics.csv",
    "accuracy": "accuracy.csv",
    "importance": "importance.csv",
    "exemplars": "exemplars.csv",
    "checkpoints": "checkpoints",
    "sweep": "sweep.csv",
    "variability": "variability.csv",
    "verify": "verify.json",
    "config": "config.json",
}

CSV_COLUMNS = {
    "metrics": ["stage", "epoch", "iter", "cls", "disc", "lambda_t", "total"],
    "accuracy": ["stage", "task", "acc_nme", "acc_cnn"],
    "importance": ["stage", "layer", "channel", "raw", "normalized"],
    "exemplars": ["stage", "class", "rank", "dataset_index"],
    "variability": ["sample_size", "layer", "mean_std", "max_std"],
}

SUMMARY_METRICS = ["avg_inc_acc_nme", "avg_inc_acc_cnn", "avg_acc_nme", "avg_acc_cnn", "bwt_nme", "bwt_cnn"]

# ---- Sweeps the CLI knows how to expand without explicit values ----
SWEEP_PRESETS = {
    "train.lambda_disc": [2.0, 3.0, 4.0, 5.0, 6.0],
    "memory.per_class": [5, 10, 20, 50],
    "sample_size": [8, 16, 32, 64, 128, 256],
}
VARIABILITY_REPEATS = 10

# ---- Verification suite sizes: (full, quick) ----
VERIFY_TRIALS = {
    "gradient_check": (50, 5),
    "cs_chain": (1000, 100),
    "proposition1": (1000, 100),
    "taylor": (200, 20),
    "importance_link": (20, 3),
    "lambda_t": (128, 32),
    "herding": (100, 10),
    "importance_normalization": (10, 3),
}

# ---- Preset experiment catalog (start points; extend at will) ----
PRESET_EXPERIMENTS = [
    {
        "name": "desk-8x3",
        "description": "Synthetic 8 classes, stages [4,2,2]. Forgetting-ordering fixture.",
        "config": {
            "name": "desk-8x3",
            "dataset": {"kind": "synthetic", "num_classes": 8, "per_class": 60, "test_per_class": 20,
                        "image_size": 16, "channels": 3},
            "plan": {"num_stages": 3, "initial_half": True},
            "network": {"channels": [8, 16, 32], "proxies_per_class": 4},
            "train": {"epochs": 12, "batch_size": 32, "lr0": 0.05},
            "memory": {"budget_mode": "per_class", "per_class": 20},
        },
    },
    {
        "name": "ten-by-five",
        "description": "Synthetic 10 classes in 5 equal stages of 2.",
        "config": {
            "name": "ten-by-five",
            "dataset": {"kind": "synthetic", "num_classes": 10, "per_class": 60, "test_per_class": 20},
            "plan": {"num_stages": 5, "initial_half": False},
            "network": {"channels": [8, 16, 32], "proxies_per_class": 4},
            "train": {"epochs": 10},
        },
    },
    {
        "name": "one-per-stage",
        "description": "Two base classes, then one new class per stage (largest lambda_t growth).",
        "config": {
            "name": "one-per-stage",
            "dataset": {"kind": "synthetic", "num_classes": 6, "per_class": 40, "test_per_class": 10},
            "plan": {"num_stages": 5, "initial_classes": 2},
            "network": {"channels": [8, 16], "proxies_per_class": 2},
            "train": {"epochs": 8},
            "memory": {"budget_mode": "total", "total": 60},
        },
    },
    {
        "name": "smoke",
        "description": "Tiny two-stage run; finishes in seconds. Used by tests.",
        "config": {
            "name": "smoke",
            "dataset": {"kind": "synthetic", "num_classes": 4, "per_class": 12, "test_per_class": 4,
                        "image_size": 8, "channels": 1},
            "plan": {"num_stages": 2, "initial_half": True},
            "network": {"channels": [4, 6], "proxies_per_class": 2},
            "train": {"epochs": 2, "batch_size": 8, "progress": False},
            "memory": {"per_class": 3},
        },
    },
]


def preset(name: str) -> dict:
    for entry in PRESET_EXPERIMENTS:
        if entry["name"] == name:
            return entry
    raise KeyError(name)
