"""
Experiment configuration: nested dataclasses parsed strictly from JSON.

Unknown keys at any level are rejected with their dotted path. Enums are
stored by value, so the canonical JSON of a config is stable and hashable.
"""

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Union, get_args, get_origin, get_type_hints

from consolidation.core.errors import ConfigError
from consolidation.core.memory import BudgetMode, SelectionRule

from .constants import CONFIG_HASH_DIGITS


class BaselineMode(Enum):
    AFC = "afc"
    UNIFORM = "uniform"        # importance fixed at 1
    FINETUNE = "finetune"      # no discrepancy term


class DiscSource(Enum):
    ALL = "all"                # distil on every row of the batch
    EXEMPLARS = "exemplars"    # distil on exemplar rows only


class BnMode(Enum):
    EVAL = "eval"
    TRAIN = "train"


class DatasetKind(Enum):
    SYNTHETIC = "synthetic"
    IDX = "idx"


@dataclass
class DatasetConfig:
    kind: DatasetKind = DatasetKind.SYNTHETIC
    num_classes: int = 8
    per_class: int = 60
    test_per_class: int = 20
    image_size: int = 16
    channels: int = 3
    noise: float = 0.25
    seed: int = 0
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None


@dataclass
class PlanConfig:
    num_stages: int = 3
    initial_half: bool = True
    initial_classes: Optional[int] = None
    class_order_seed: int = 1993


@dataclass
class NetworkConfig:
    channels: List[int] = field(default_factory=lambda: [16, 32, 64])
    activation: str = "relu"
    proxies_per_class: int = 10
    delta: float = 0.6
    eta_init: float = 1.0
    tap_indices: Optional[List[int]] = None
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr0: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lambda_disc: float = 4.0
    map_norm_eps: float = 1e-8
    include_true_class: bool = False
    disc_source: DiscSource = DiscSource.ALL
    flip: bool = False
    pad_crop: int = 0
    progress: bool = True


@dataclass
class MemoryConfig:
    budget_mode: BudgetMode = BudgetMode.PER_CLASS
    per_class: int = 20
    total: int = 2000
    selection: SelectionRule = SelectionRule.HERDING

    @property
    def budget(self) -> int:
        return self.per_class if self.budget_mode is BudgetMode.PER_CLASS else self.total


@dataclass
class ImportanceConfig:
    sample_limit: Optional[int] = None
    batch_size: int = 64
    bn_mode: BnMode = BnMode.EVAL


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    mode: BaselineMode = BaselineMode.AFC
    seed: int = 0
    output_dir: str = "runs/experiment"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    plan: PlanConfig = field(default_factory=PlanConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    importance: ImportanceConfig = field(default_factory=ImportanceConfig)

    # ---------- parsing ----------
    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        config = _build(cls, data, "")
        config.validate()
        return config

    @classmethod
    def load(cls, path: str) -> "ExperimentConfig":
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        return cls.from_dict(data)

    def to_dict(self) -> Dict[str, Any]:
        return _plain(self)

    def to_json(self, indent: Optional[int] = 2) -> str:
        separators = None if indent else (",", ":")
        return json.dumps(self.to_dict(), sort_keys=True, indent=indent, separators=separators)

    def config_hash(self) -> str:
        """First digits of sha256 over the canonical (sorted, compact) JSON."""
        canonical = self.to_json(indent=None).encode("utf-8")
        return hashlib.sha256(canonical).hexdigest()[:CONFIG_HASH_DIGITS]

    def with_overrides(self, overrides: Dict[str, Any]) -> "ExperimentConfig":
        """Copy with dotted keys replaced, e.g. {"train.lambda_disc": 3.0}."""
        data = self.to_dict()
        for dotted, value in overrides.items():
            node = data
            *parents, leaf = dotted.split(".")
            for key in parents:
                if not isinstance(node.get(key), dict):
                    raise ConfigError(f"unknown config key: {dotted}")
                node = node[key]
            if leaf not in node:
                raise ConfigError(f"unknown config key: {dotted}")
            node[leaf] = value.value if isinstance(value, Enum) else value
        return ExperimentConfig.from_dict(data)

    # ---------- validation ----------
    def validate(self) -> None:
        d, p, n, t, m, i = self.dataset, self.plan, self.network, self.train, self.memory, self.importance
        checks = [
            (d.num_classes >= 2, "dataset.num_classes must be >= 2"),
            (d.kind is not DatasetKind.SYNTHETIC or d.per_class >= 2, "dataset.per_class must be >= 2"),
            (d.test_per_class >= 1, "dataset.test_per_class must be >= 1"),
            (d.kind is not DatasetKind.SYNTHETIC or d.image_size % 2 ** len(n.channels) == 0,
             "dataset.image_size must be divisible by 2 ** len(network.channels)"),
            (d.channels >= 1, "dataset.channels must be >= 1"),
            (p.num_stages >= 1, "plan.num_stages must be >= 1"),
            (len(n.channels) >= 1 and all(c >= 1 for c in n.channels), "network.channels must be positive"),
            (n.activation in ("relu", "softplus"), "network.activation must be relu or softplus"),
            (n.proxies_per_class >= 1, "network.proxies_per_class must be >= 1"),
            (t.epochs >= 1, "train.epochs must be >= 1"),
            (t.batch_size >= 1, "train.batch_size must be >= 1"),
            (t.lr0 > 0, "train.lr0 must be > 0"),
            (0 <= t.momentum < 1, "train.momentum must lie in [0, 1)"),
            (t.weight_decay >= 0, "train.weight_decay must be >= 0"),
            (t.lambda_disc >= 0, "train.lambda_disc must be >= 0"),
            (t.map_norm_eps > 0, "train.map_norm_eps must be > 0"),
            (t.pad_crop >= 0, "train.pad_crop must be >= 0"),
            (m.per_class >= 1, "memory.per_class must be >= 1"),
            (m.total >= 1, "memory.total must be >= 1"),
            (i.sample_limit is None or i.sample_limit >= 1, "importance.sample_limit must be >= 1"),
            (i.batch_size >= 1, "importance.batch_size must be >= 1"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        if d.kind is DatasetKind.IDX:
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                path = getattr(d, key)
                if not path:
                    raise ConfigError(f"dataset.{key} is required for idx datasets")
                if not os.path.exists(path):
                    raise ConfigError(f"dataset.{key}: file not found: {path}")
        if n.tap_indices is not None and any(not 1 <= k <= len(n.channels) for k in n.tap_indices):
            raise ConfigError(f"network.tap_indices must lie in 1..{len(n.channels)}")


# ---------- generic strict conversion ----------
def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key: {_join(path, unknown[0])}")
    kwargs = {key: _coerce(hints[key], value, _join(path, key)) for key, value in data.items()}
    return cls(**kwargs)


def _coerce(hint, value: Any, path: str):
    origin = get_origin(hint)
    if origin is Union:
        options = [a for a in get_args(hint) if a is not type(None)]
        if value is None:
            return None
        return _coerce(options[0], value, path)
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, path)
    if isinstance(hint, type) and issubclass(hint, Enum):
        try:
            return hint(value)
        except ValueError:
            allowed = ", ".join(m.value for m in hint)
            raise ConfigError(f"{path}: {value!r} is not one of {allowed}") from None
    if origin in (list, List):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        (inner,) = get_args(hint)
        return [_coerce(inner, v, f"{path}[{k}]") for k, v in enumerate(value)]
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _plain(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, list):
        return [_plain(v) for v in obj]
    return obj


def _join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key
