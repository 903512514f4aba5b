import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from consolidation.core.errors import ConfigError, LabError

from ..core.data_models import ExperimentConfig
from ..core.trainer import run_experiment
from .managers import RunDirectoryManager

logger = logging.getLogger(__name__)

LogCallback = Callable[[str], None]
FinishedCallback = Callable[[bool, str], None]


class SweepWorker:
    """One sweep point: a full experiment in its own sub-directory."""

    def __init__(self, config: ExperimentConfig, overrides: Dict[str, Any], manager: RunDirectoryManager,
                 on_log: Optional[LogCallback] = None, on_finished: Optional[FinishedCallback] = None):
        self.config = config
        self.overrides = dict(overrides)
        self.manager = manager
        self.on_log = on_log or (lambda msg: logger.info(msg))
        self.on_finished = on_finished or (lambda ok, msg: None)
        self.summary: Optional[Dict[str, Any]] = None

    @property
    def label(self) -> str:
        return point_label(self.overrides)

    def run(self) -> Tuple[bool, str, Optional[Dict[str, Any]]]:
        try:
            self.on_log(f"Sub-run {self.label} started")
            result = run_experiment(self.config, checkpoint_dir=self.manager.checkpoint_dir)
            self.manager.write_run(result)
            self.summary = result.summary
            message = f"Sub-run {self.label} finished: avg_inc_acc_nme={self.summary['avg_inc_acc_nme']:.2f}"
            ok = True
        except LabError as e:
            message = f"Sub-run {self.label} failed: {e}"
            logger.warning(message)
            ok = False
        except Exception as e:
            message = f"Sub-run {self.label} crashed: {type(e).__name__}: {e}"
            logger.exception(message)
            ok = False
        self.on_log(message)
        self.on_finished(ok, message)
        return ok, message, self.summary


def point_label(overrides: Dict[str, Any]) -> str:
    return ",".join(f"{k}={v}" for k, v in overrides.items())


def sweep_points(assignments: Sequence[Tuple[str, Sequence[Any]]]) -> List[Dict[str, Any]]:
    """
    Pair several KEY=v1,v2,... assignments element-wise into sweep points.

    Every assignment must list the same number of values, so that e.g.
    plan.initial_classes=2,3 with plan.num_stages=3,2 gives two points.
    """
    if not assignments:
        raise ConfigError("a sweep needs at least one KEY=v1,v2,... assignment")
    keys = [key for key, _ in assignments]
    if len(set(keys)) != len(keys):
        raise ConfigError(f"sweep key repeated: {keys}")
    lengths = {len(values) for _, values in assignments}
    if len(lengths) != 1:
        raise ConfigError("paired sweep keys need the same number of values: "
                          + ", ".join(f"{key} has {len(values)}" for key, values in assignments))
    return [dict(zip(keys, combo)) for combo in zip(*(values for _, values in assignments))]


def sweep_configs(base: ExperimentConfig, points: Sequence[Dict[str, Any]]) -> List[ExperimentConfig]:
    """One validated config per point, each named after its overrides."""
    out = []
    for point in points:
        cfg = base.with_overrides(point)
        cfg.name = f"{base.name}[{point_label(point)}]"
        out.append(cfg)
    return out


def run_sweep(base: ExperimentConfig, points: Sequence[Dict[str, Any]], manager: RunDirectoryManager,
              jobs: int = 1, on_log: Optional[LogCallback] = None
              ) -> List[Tuple[Dict[str, Any], bool, str, Optional[dict]]]:
    """Runs every point on a pool of `jobs` threads; results come back in point order."""
    workers = [SweepWorker(cfg, point, manager.sub_run(point_label(point)), on_log=on_log)
               for cfg, point in zip(sweep_configs(base, points), points)]
    with ThreadPoolExecutor(max_workers=max(1, int(jobs))) as pool:
        futures = [pool.submit(w.run) for w in workers]
        outcomes = [f.result() for f in futures]
    return [(w.overrides, ok, msg, summary) for w, (ok, msg, summary) in zip(workers, outcomes)]
