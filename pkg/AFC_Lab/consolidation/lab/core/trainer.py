"""
Incremental-stage driver.

Stage t: grow the head by the stage's classes, train on D^t plus the
exemplar memory with the margin loss and (t >= 1) the importance weighted
discrepancy against the frozen previous model, then estimate importance
once, rebuild the exemplar memory, evaluate and checkpoint.
"""

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from class_stream.dataops import (Dataset, MixtureWeights, StagePlan, build_stage_plan,
                                  load_idx_dataset, make_synthetic, stage_indices, stage_loader,
                                  train_test_split)
from consolidation.core import tensor as T
from consolidation.core.errors import ConfigError, ContractError, DimensionError, StageAborted
from consolidation.core.importance import (ImportanceTable, estimate, finalize, importance_variability,
                                           uniform_table)
from consolidation.core.losses import classification_loss, discrepancy_loss, lambda_t, total_loss
from consolidation.core.memory import ExemplarStore, classify_cnn, classify_nme, rebuild_for_stage
from consolidation.core.metrics import (AccuracyMatrix, accuracy, average_accuracy,
                                        avg_incremental_accuracy, backward_transfer)
from consolidation.core.network import FeatureTap, IncrementalNet, parameter_digest
from consolidation.core.seeding import (STREAM_HEAD, STREAM_IMPORTANCE, STREAM_INIT, STREAM_LOADER,
                                        STREAM_MEMORY, derive_rng, derive_seed)
from consolidation.core.storage import capture, save_checkpoint

from .constants import CHECKPOINT_PATTERN
from .data_models import BaselineMode, BnMode, DatasetKind, DiscSource, ExperimentConfig

logger = logging.getLogger(__name__)

NO_DECAY = ("head.proxies", "head.eta")


def cosine_lr(epoch: float, total_epochs: int, lr0: float) -> float:
    if total_epochs < 1 or not 0 <= epoch <= total_epochs:
        raise ContractError(f"cosine_lr needs 0 <= epoch <= total_epochs, got {epoch}/{total_epochs}")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * epoch / total_epochs))


class SGD:
    """Heavy-ball SGD; weight decay skips the head proxies and scale."""

    def __init__(self, model: IncrementalNet, momentum: float = 0.9, weight_decay: float = 5e-4):
        self.named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, grads: Dict[T.Tensor, np.ndarray], lr: float) -> None:
        for name, p in self.named:
            g = grads[p]
            if self.weight_decay and name not in NO_DECAY:
                g = g + self.weight_decay * p.data
            v = self.velocity.get(name)
            # head rows are appended between stages; a new optimizer is built per stage
            v = g if v is None else self.momentum * v + g
            self.velocity[name] = v
            p.data = p.data - lr * v


@dataclass
class StageResult:
    stage: int
    acc_nme: float
    acc_cnn: float
    task_acc_nme: List[float]
    task_acc_cnn: List[float]
    losses: List[Tuple[int, int, int, float, float, float, float]] = field(repr=False)
    importance: Optional[ImportanceTable] = field(default=None, repr=False)
    store: Optional[ExemplarStore] = field(default=None, repr=False)
    checkpoint_path: Optional[str] = None
    mixture: Optional[MixtureWeights] = None
    lambda_t: float = 1.0
    teacher_digest: Optional[str] = None


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    plan: StagePlan
    stages: List[StageResult]
    summary: Dict[str, object]


# ---------- data ----------
def load_data(cfg: ExperimentConfig) -> Tuple[Dataset, Dataset]:
    d = cfg.dataset
    if d.kind is DatasetKind.SYNTHETIC:
        full = make_synthetic(d.num_classes, d.per_class + d.test_per_class, d.image_size,
                              d.seed, noise=d.noise, channels=d.channels)
        return train_test_split(full, d.test_per_class)
    train = load_idx_dataset(d.train_images, d.train_labels, d.num_classes)
    test = load_idx_dataset(d.test_images, d.test_labels, d.num_classes)
    factor = 2 ** len(cfg.network.channels)
    for name, data in ((d.train_images, train), (d.test_images, test)):
        h, w = data.image_shape[1:]
        if h % factor or w % factor:
            raise ConfigError(f"{name}: images are {h}x{w}; {len(cfg.network.channels)} pooling blocks "
                              f"need sides divisible by {factor}")
    if train.image_shape != test.image_shape:
        raise ConfigError(f"train images {train.image_shape} and test images {test.image_shape} differ in shape")
    return train, test


def build_model(cfg: ExperimentConfig, in_channels: int) -> IncrementalNet:
    n = cfg.network
    return IncrementalNet(in_channels=in_channels, channels=n.channels, activation=n.activation,
                          proxies_per_class=n.proxies_per_class, delta=n.delta, eta_init=n.eta_init,
                          tap_indices=n.tap_indices, bn_momentum=n.bn_momentum, bn_eps=n.bn_eps,
                          seed=derive_seed(cfg.seed, STREAM_INIT))


# ---------- one optimisation step ----------
def _exemplar_taps(taps: List[FeatureTap], rows: np.ndarray, detach: bool) -> List[FeatureTap]:
    out = []
    for tap in taps:
        maps = T.Tensor(tap.maps.data[rows]) if detach else T.take_rows(tap.maps, rows)
        out.append(FeatureTap(layer=tap.layer, channels=tap.channels, maps=maps))
    return out


def train_step(model: IncrementalNet, teacher: Optional[IncrementalNet], batch, importance: Optional[ImportanceTable],
               cfg: ExperimentConfig, lam: float, use_disc: bool):
    """Two forward passes, one backward pass. Returns (LossReport, gradients)."""
    tc = cfg.train
    params = [p for p in model.parameters() if p.requires_grad]
    with T.Tape() as tape:
        out = model.forward(batch.images, update_stats=True)
        cls = classification_loss(out.scores, batch.targets, model.head.eta, model.head.delta,
                                  tc.include_true_class)
        disc = None
        if use_disc:
            t_out = teacher.forward(batch.images, update_stats=False)
            s_taps, t_taps = out.taps, t_out.taps
            if tc.disc_source is DiscSource.EXEMPLARS:
                rows = np.flatnonzero(batch.from_memory)
                if rows.size:
                    s_taps = _exemplar_taps(s_taps, rows, detach=False)
                    t_taps = _exemplar_taps(t_taps, rows, detach=True)
                else:
                    s_taps = None
            disc = 0.0 if s_taps is None else discrepancy_loss(s_taps, t_taps, importance.normalized,
                                                                tc.map_norm_eps)
        report = total_loss(cls, disc, tc.lambda_disc, lam)
        if not math.isfinite(report.total):
            return report, None
        grads = T.backward(report.graph, params)
    if tape.backward_passes != 1:
        raise ContractError(f"expected one backward pass per step, got {tape.backward_passes}")
    return report, grads


# ---------- evaluation ----------
def evaluate(model: IncrementalNet, store: ExemplarStore, plan: StagePlan, test: Dataset,
             stage: int) -> Tuple[float, float, List[float], List[float]]:
    """Seen-class and per-task accuracy (%), NME and CNN."""
    idx = test.indices_of(plan.seen_classes(stage))
    missing = sorted(set(plan.seen_classes(stage)) - set(test.labels[idx].tolist()))
    if missing:
        logger.warning("Stage %d: no test images for classes %s", stage, missing)
    scores, embeddings = model.predict_scores(test.images[idx])
    columns = plan.to_columns(test.labels[idx])
    pred_nme = classify_nme(embeddings, store)
    pred_cnn = classify_cnn(scores)
    task_nme, task_cnn = [], []
    for task in range(stage + 1):
        mask = np.isin(test.labels[idx], plan.new_classes(task))
        task_nme.append(accuracy(pred_nme[mask], columns[mask]))
        task_cnn.append(accuracy(pred_cnn[mask], columns[mask]))
    return accuracy(pred_nme, columns), accuracy(pred_cnn, columns), task_nme, task_cnn


# ---------- stage ----------
def run_stage(t: int, model: IncrementalNet, teacher: Optional[IncrementalNet], plan: StagePlan,
              store: ExemplarStore, importance: Optional[ImportanceTable], cfg: ExperimentConfig,
              train: Dataset, test: Dataset, checkpoint_dir: Optional[str] = None) -> StageResult:
    """Train stage `t` in place on `model`; `teacher` must be given iff t >= 1."""
    if (teacher is None) != (t == 0):
        raise ContractError(f"stage {t}: a teacher is required exactly when t >= 1")
    mode = cfg.mode
    tc = cfg.train
    use_disc = teacher is not None and mode is not BaselineMode.FINETUNE and tc.lambda_disc != 0.0
    if use_disc:
        if teacher.tap_channels() != model.tap_channels():
            raise DimensionError(f"teacher taps {teacher.tap_channels()} vs student taps {model.tap_channels()}")
        if importance is None or not importance.finalized:
            raise ContractError(f"stage {t}: discrepancy needs a finalized importance table")
    lam = lambda_t(plan.n_t[t], plan.n_prev(t))
    digest = parameter_digest(teacher) if teacher is not None else None
    exemplars = store.indices()
    union, memory_mask = stage_indices(plan, train, t, exemplars)
    mixture = MixtureWeights.from_counts(int(memory_mask.sum()), int((~memory_mask).sum()))
    logger.info("Learning on %d-%d (lambda_t=%.4f, phi_old=%.3f)", plan.n_prev(t), plan.n_t[t], lam, mixture.phi_old)

    optimizer = SGD(model, tc.momentum, tc.weight_decay)
    losses: List[Tuple[int, int, int, float, float, float, float]] = []
    model.train()
    prog_bar = tqdm(range(tc.epochs), disable=not tc.progress)
    for epoch in prog_bar:
        lr = cosine_lr(epoch, tc.epochs, tc.lr0)
        loader = stage_loader(plan, train, t, exemplars, batch_size=tc.batch_size,
                              seed=derive_seed(cfg.seed, STREAM_LOADER, t, epoch),
                              flip=tc.flip, pad_crop=tc.pad_crop)
        epoch_losses = []
        for it, batch in enumerate(loader):
            report, grads = train_step(model, teacher, batch, importance, cfg, lam, use_disc)
            if grads is None:
                raise StageAborted(t, epoch, it, f"non-finite loss (cls={report.cls}, disc={report.disc})")
            optimizer.step(grads, lr)
            model.head.renormalize()
            losses.append((t, epoch, it, report.cls, report.disc, report.lambda_t, report.total))
            epoch_losses.append(report.total)
            logger.debug("stage %d epoch %d iter %d: %s", t, epoch, it, report)
        info = "Task {}, Epoch {}/{} => Loss {:.3f}, lr {:.4f}".format(
            t, epoch + 1, tc.epochs, float(np.mean(epoch_losses)), lr)
        prog_bar.set_description(info)
        logger.info(info)

    if teacher is not None and parameter_digest(teacher) != digest:
        raise ContractError(f"stage {t}: teacher parameters changed during training")

    # importance of the trained model on this stage's data, for the next stage
    if mode is BaselineMode.AFC:
        table = estimate(model, train.images[union], plan.to_columns(train.labels[union]), stage=t,
                         sample_limit=cfg.importance.sample_limit,
                         seed=derive_seed(cfg.seed, STREAM_IMPORTANCE, t),
                         batch_size=cfg.importance.batch_size, include_true_class=tc.include_true_class,
                         bn_eval=cfg.importance.bn_mode is BnMode.EVAL)
        table = finalize(table)
    elif mode is BaselineMode.UNIFORM:
        table = uniform_table(t, model.tap_indices, model.tap_channels())
    else:
        table = None

    new_store = rebuild_for_stage(store, model, train, plan, t, derive_rng(cfg.seed, STREAM_MEMORY, t))
    acc_nme, acc_cnn, task_nme, task_cnn = evaluate(model, new_store, plan, test, t)
    logger.info("Stage %d accuracy: NME %.2f, CNN %.2f", t, acc_nme, acc_cnn)

    path = None
    if checkpoint_dir is not None:
        path = os.path.join(checkpoint_dir, CHECKPOINT_PATTERN.format(t))
        meta = {"mode": mode.value, "n_t": plan.n_t[t], "class_order": list(plan.class_order)}
        save_checkpoint(path, capture(model, t, cfg.config_hash(), table, new_store, meta))
        logger.info("Checkpoint written to %s", path)

    return StageResult(stage=t, acc_nme=acc_nme, acc_cnn=acc_cnn, task_acc_nme=task_nme, task_acc_cnn=task_cnn,
                       losses=losses, importance=table, store=new_store, checkpoint_path=path,
                       mixture=mixture, lambda_t=lam, teacher_digest=digest)


# ---------- experiment ----------
def summarize(cfg: ExperimentConfig, stages: List[StageResult]) -> Dict[str, object]:
    nme, cnn = AccuracyMatrix(), AccuracyMatrix()
    for s in stages:
        nme.add_stage(s.task_acc_nme, s.acc_nme)
        cnn.add_stage(s.task_acc_cnn, s.acc_cnn)
    multi = nme.num_stages >= 2
    return {
        "name": cfg.name,
        "mode": cfg.mode.value,
        "seed": cfg.seed,
        "config_hash": cfg.config_hash(),
        "num_stages": nme.num_stages,
        "avg_inc_acc_nme": avg_incremental_accuracy(nme.seen),
        "avg_inc_acc_cnn": avg_incremental_accuracy(cnn.seen),
        "avg_acc_nme": average_accuracy(nme),
        "avg_acc_cnn": average_accuracy(cnn),
        "bwt_nme": backward_transfer(nme) if multi else None,
        "bwt_cnn": backward_transfer(cnn) if multi else None,
        "stage_acc_nme": list(nme.seen),
        "stage_acc_cnn": list(cnn.seen),
        "task_acc_nme": [list(r) for r in nme.rows],
        "task_acc_cnn": [list(r) for r in cnn.rows],
        "phi_old": [s.mixture.phi_old for s in stages],
    }


def run_experiment(cfg: ExperimentConfig, checkpoint_dir: Optional[str] = None) -> ExperimentResult:
    cfg.validate()
    train, test = load_data(cfg)
    p = cfg.plan
    plan = build_stage_plan(cfg.dataset.num_classes, p.num_stages, p.class_order_seed,
                            p.initial_half, p.initial_classes)
    if plan.n_t[0] < 2 and not cfg.train.include_true_class:
        raise ConfigError("the first stage needs at least two classes for the margin loss")
    logger.info("Experiment %s [%s] mode=%s, stages=%s", cfg.name, cfg.config_hash(), cfg.mode.value,
                [len(s) for s in plan.stages])

    model = build_model(cfg, train.image_shape[0])
    store = ExemplarStore(budget_mode=cfg.memory.budget_mode, budget=cfg.memory.budget,
                          selection=cfg.memory.selection)
    importance: Optional[ImportanceTable] = None
    teacher: Optional[IncrementalNet] = None
    results: List[StageResult] = []
    for t in range(plan.num_stages):
        if t > 0:
            teacher = model.clone_frozen()
        model.grow_head(len(plan.new_classes(t)), derive_rng(cfg.seed, STREAM_HEAD, t))
        result = run_stage(t, model, teacher, plan, store, importance, cfg, train, test, checkpoint_dir)
        results.append(result)
        store, importance = result.store, result.importance
    return ExperimentResult(config=cfg, plan=plan, stages=results, summary=summarize(cfg, results))


def sample_size_study(cfg: ExperimentConfig, sample_sizes, repeats: int):
    """
    Train stage 0, then measure the spread of the normalised importance over
    `repeats` random subsets per sample size. Sizes above the stage's data
    are dropped; the full size is always included.
    """
    train, test = load_data(cfg)
    p = cfg.plan
    plan = build_stage_plan(cfg.dataset.num_classes, p.num_stages, p.class_order_seed,
                            p.initial_half, p.initial_classes)
    model = build_model(cfg, train.image_shape[0])
    model.grow_head(len(plan.new_classes(0)), derive_rng(cfg.seed, STREAM_HEAD, 0))
    store = ExemplarStore(budget_mode=cfg.memory.budget_mode, budget=cfg.memory.budget,
                          selection=cfg.memory.selection)
    run_stage(0, model, None, plan, store, None, cfg, train, test)
    union, _ = stage_indices(plan, train, 0)
    n = int(union.size)
    sizes = sorted({int(s) for s in sample_sizes if 1 <= int(s) < n} | {n})
    return importance_variability(model, train.images[union], plan.to_columns(train.labels[union]),
                                  sizes, repeats, seed=derive_seed(cfg.seed, STREAM_IMPORTANCE, 0),
                                  batch_size=cfg.importance.batch_size)
