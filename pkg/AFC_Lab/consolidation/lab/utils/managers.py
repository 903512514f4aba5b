import logging
import os
from typing import Iterable, Optional

from consolidation.core.errors import ConfigError
from consolidation.core.storage import write_csv, write_json

from ..core.constants import ARTIFACTS, CSV_COLUMNS

logger = logging.getLogger(__name__)


class RunDirectoryManager:
    """Owns one output directory; every artifact path is resolved inside it."""

    def __init__(self, root: str):
        self.root = os.path.abspath(root)
        os.makedirs(self.root, exist_ok=True)

    def path(self, *parts: str) -> str:
        candidate = os.path.abspath(os.path.join(self.root, *parts))
        if os.path.commonpath([candidate, self.root]) != self.root:
            raise ConfigError(f"refusing to write outside {self.root}: {candidate}")
        return candidate

    def artifact(self, key: str) -> str:
        return self.path(ARTIFACTS[key])

    @property
    def checkpoint_dir(self) -> str:
        d = self.artifact("checkpoints")
        os.makedirs(d, exist_ok=True)
        return d

    def sub_run(self, name: str) -> "RunDirectoryManager":
        return RunDirectoryManager(self.path(name))

    def write_table(self, key: str, rows: Iterable, columns: Optional[list] = None) -> str:
        return write_csv(self.artifact(key), columns or CSV_COLUMNS[key], rows)

    def write_json(self, key: str, payload: dict) -> str:
        return write_json(self.artifact(key), payload)

    # ---------- a finished experiment ----------
    def write_run(self, result) -> str:
        """summary.json plus the per-stage CSV tables of an ExperimentResult."""
        plan = result.plan
        self.write_json("config", {"config_hash": result.config.config_hash(), "config": result.config.to_dict()})
        self.write_table("metrics", (row for s in result.stages for row in s.losses))

        accuracy_rows = []
        for s in result.stages:
            accuracy_rows.append((s.stage, -1, s.acc_nme, s.acc_cnn))
            for task, (a_nme, a_cnn) in enumerate(zip(s.task_acc_nme, s.task_acc_cnn)):
                accuracy_rows.append((s.stage, task, a_nme, a_cnn))
        self.write_table("accuracy", accuracy_rows)

        self.write_table("importance", (row for s in result.stages if s.importance is not None
                                        for row in s.importance.rows()))
        self.write_table("exemplars", (row for s in result.stages
                                       for row in s.store.rows(s.stage, plan.class_order)))
        path = self.write_json("summary", result.summary)
        logger.info("Run artifacts written to %s", self.root)
        return path
