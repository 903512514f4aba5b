#!/usr/bin/env python3
"""
Command line entry for the consolidation lab.

    run                 one experiment -> summary.json, CSV tables, checkpoints
    sweep KEY[=V,...]   one experiment per value -> sweep.csv (sample_size -> variability.csv);
                        several assignments are paired value by value
    verify              gradient checks and bound suites -> verify.json
    inspect-importance  sorted channel importance of a finished run

Exit codes: 0 ok, 1 configuration error, 2 runtime failure, 3 failed verification.
"""

import argparse
import json
import logging
import os
import sys
from collections import defaultdict
from typing import Any, List, Optional, Sequence, Tuple

import numpy as np

current_dir = os.path.dirname(os.path.abspath(__file__))
app_dir = os.path.dirname(current_dir)
if app_dir not in sys.path:
    sys.path.insert(0, app_dir)

from consolidation.core import tensor as T  # noqa: E402
from consolidation.core.errors import ConfigError, LabError  # noqa: E402
from consolidation.core.storage import read_csv  # noqa: E402
from consolidation.lab.core.constants import (ARTIFACTS, EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME,  # noqa: E402
                                              EXIT_VERIFY, SUMMARY_METRICS, SWEEP_PRESETS,
                                              VARIABILITY_REPEATS, preset)
from consolidation.lab.core.data_models import BaselineMode, ExperimentConfig  # noqa: E402
from consolidation.lab.core.trainer import run_experiment, sample_size_study  # noqa: E402
from consolidation.lab.core.verification import run_verification  # noqa: E402
from consolidation.lab.utils import RunDirectoryManager, run_sweep, sweep_points  # noqa: E402

logger = logging.getLogger("consolidation")

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"


# ---------- config resolution ----------
def resolve_config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        cfg = ExperimentConfig.load(args.config)
    elif getattr(args, "preset", None):
        try:
            cfg = ExperimentConfig.from_dict(preset(args.preset)["config"])
        except KeyError:
            raise ConfigError(f"unknown preset: {args.preset}") from None
    else:
        raise ConfigError("one of --config or --preset is required")
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "mode", None):
        overrides["mode"] = args.mode
    if getattr(args, "out", None):
        overrides["output_dir"] = args.out
    return cfg.with_overrides(overrides) if overrides else cfg


def _parse_value(token: str) -> Any:
    try:
        return json.loads(token)
    except json.JSONDecodeError:
        return token


def parse_assignment(text: str) -> Tuple[str, List[Any]]:
    """'train.lambda_disc=2,3,4' -> key and values; a bare key takes the preset list."""
    key, sep, raw = text.partition("=")
    key = key.strip()
    if not sep:
        if key not in SWEEP_PRESETS:
            raise ConfigError(f"no preset values for sweep key {key!r}; pass {key}=v1,v2,...")
        return key, list(SWEEP_PRESETS[key])
    values = [_parse_value(tok.strip()) for tok in raw.split(",") if tok.strip()]
    if not values:
        raise ConfigError(f"sweep {key!r} has an empty value list")
    return key, values


# ---------- verbs ----------
def cmd_run(args) -> int:
    cfg = resolve_config(args)
    manager = RunDirectoryManager(cfg.output_dir)
    result = run_experiment(cfg, checkpoint_dir=manager.checkpoint_dir)
    path = manager.write_run(result)
    s = result.summary
    print(f"[run] {cfg.name} ({s['config_hash']}): avg inc acc NME {s['avg_inc_acc_nme']:.2f}, "
          f"CNN {s['avg_inc_acc_cnn']:.2f} -> {path}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    assignments = [parse_assignment(text) for text in args.assignment]
    keys = [key for key, _ in assignments]
    manager = RunDirectoryManager(cfg.output_dir)

    if "sample_size" in keys:
        if len(assignments) > 1:
            raise ConfigError("sample_size cannot be paired with other sweep keys")
        values = assignments[0][1]
        sizes = [int(v) for v in values]
        rows = sample_size_study(cfg, sizes, args.repeats)
        path = manager.write_table("variability", [(r.sample_size, r.layer, r.mean_std, r.max_std) for r in rows])
        print(f"[sweep] variability over {len(set(r.sample_size for r in rows))} sample sizes -> {path}")
        return EXIT_OK

    # every point is validated before any sub-run starts
    outcomes = run_sweep(cfg, sweep_points(assignments), manager, jobs=args.jobs)
    rows = []
    for point, ok, message, summary in outcomes:
        value = point[keys[0]] if len(keys) == 1 else [point[k] for k in keys]
        metrics = [summary.get(m) if summary else None for m in SUMMARY_METRICS]
        rows.append(["+".join(keys), json.dumps(value), int(ok), cfg.config_hash()] + metrics)
    path = manager.write_table("sweep", rows, ["key", "value", "ok", "base_config_hash"] + SUMMARY_METRICS)
    failed = [str(p) for p, ok, _, _ in outcomes if not ok]
    print(f"[sweep] {len(outcomes)} sub-runs, {len(failed)} failed -> {path}")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_verify(args) -> int:
    reports = run_verification(quick=args.quick, seed=args.seed or 0)
    payload = {"quick": bool(args.quick), "passed": all(r.passed for r in reports),
               "suites": [r.to_dict() for r in reports]}
    out = args.out or os.path.join("runs", "verify")
    path = RunDirectoryManager(out).write_json("verify", payload)
    failing = [r.suite for r in reports if not r.passed]
    if failing:
        print(f"[verify] FAILED: {', '.join(failing)} -> {path}")
        return EXIT_VERIFY
    print(f"[verify] all {len(reports)} suites passed -> {path}")
    return EXIT_OK


def cmd_inspect_importance(args) -> int:
    path = os.path.join(args.run, ARTIFACTS["importance"])
    if not os.path.exists(path):
        raise ConfigError(f"no importance table in {args.run}")
    groups = defaultdict(list)
    for row in read_csv(path):
        groups[(int(row["stage"]), int(row["layer"]))].append((int(row["channel"]), float(row["normalized"])))
    for (stage, layer), entries in sorted(groups.items()):
        values = np.array([v for _, v in entries])
        ranked = sorted(entries, key=lambda e: (-e[1], e[0]))
        print(f"stage {stage} layer {layer}: mean {values.mean():.6f} std {values.std():.6f}")
        print("  " + " ".join(f"c{c}:{v:.4f}" for c, v in ranked))
    return EXIT_OK


# ---------- argument parsing ----------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="afc-lab", description="Importance-weighted feature consolidation lab")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("--debug", action="store_true", help="NaN/Inf checks on every primitive")
    sub = parser.add_subparsers(dest="verb", required=True)

    def experiment_flags(p):
        p.add_argument("--config", help="experiment JSON file")
        p.add_argument("--preset", help="named preset experiment")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, help="master seed (overrides seed)")
        p.add_argument("--mode", choices=[m.value for m in BaselineMode], help="baseline mode")
        p.add_argument("--jobs", type=int, default=1, help="parallel sub-runs")

    run = sub.add_parser("run", help="run one experiment")
    experiment_flags(run)
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="one experiment per value of a config key")
    experiment_flags(sweep)
    sweep.add_argument("assignment", nargs="+", help="KEY=v1,v2,... or a preset KEY; several are paired")
    sweep.add_argument("--repeats", type=int, default=VARIABILITY_REPEATS, help="estimations per sample size")
    sweep.set_defaults(func=cmd_sweep)

    verify = sub.add_parser("verify", help="run the gradient and bound suites")
    verify.add_argument("--quick", action="store_true", help="reduced trial counts")
    verify.add_argument("--out", help="directory for verify.json")
    verify.add_argument("--seed", type=int, default=0)
    verify.set_defaults(func=cmd_verify)

    inspect = sub.add_parser("inspect-importance", help="sorted channel importance of a run")
    inspect.add_argument("run", help="run directory holding importance.csv")
    inspect.set_defaults(func=cmd_inspect_importance)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT)
    if args.debug:
        T.set_debug(True)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as e:
        logger.error("Configuration error: %s", e)
        return EXIT_CONFIG
    except LabError as e:
        logger.error("Run failed: %s", e)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
