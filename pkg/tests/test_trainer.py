"""Stage driver: schedule, optimisation step, stage contracts, experiments."""

import math
from types import SimpleNamespace

import numpy as np
import pytest

from class_stream import build_stage_plan, stage_loader
from consolidation.core import tensor as T
from consolidation.core.errors import ConfigError, ContractError, StageAborted
from consolidation.core.importance import uniform_table
from consolidation.core.memory import ExemplarStore
from consolidation.core.network import parameter_digest
from consolidation.core.seeding import derive_rng, derive_seed, splitmix64
from consolidation.core.storage import load_checkpoint
from consolidation.lab.core import trainer
from consolidation.lab.core.constants import preset
from consolidation.lab.core.data_models import BaselineMode, ExperimentConfig
from consolidation.lab.core.trainer import (SGD, build_model, cosine_lr, load_data, run_experiment, run_stage,
                                            sample_size_study, train_step)
from formats.idx_codec import MAGIC_IMAGES, MAGIC_LABELS, write_idx


class TestCosineSchedule:
    def test_endpoints(self):
        assert cosine_lr(0, 30, 0.1) == 0.1
        assert cosine_lr(30, 30, 0.1) == pytest.approx(0.0, abs=1e-15)

    def test_midpoint(self):
        assert cosine_lr(15, 30, 0.1) == pytest.approx(0.05, rel=1e-12)

    def test_monotone(self):
        values = [cosine_lr(e, 10, 1.0) for e in range(11)]
        assert all(b <= a for a, b in zip(values, values[1:]))

    def test_out_of_range(self):
        with pytest.raises(ContractError):
            cosine_lr(11, 10, 0.1)


class TestSeeding:
    def test_streams_differ(self):
        assert derive_seed(0, 1) != derive_seed(0, 2)
        assert derive_seed(0, 3, 1, 0) != derive_seed(0, 3, 1, 1)

    def test_stable(self):
        assert derive_seed(5, 2, 7) == derive_seed(5, 2, 7)
        assert splitmix64(0) == splitmix64(0)
        np.testing.assert_array_equal(derive_rng(1, 5).random(3), derive_rng(1, 5).random(3))


class TestSGD:
    def test_plain_step(self, tiny_net):
        opt = SGD(tiny_net, momentum=0.0, weight_decay=0.0)
        w = tiny_net.blocks[0].conv.weight
        before = w.data.copy()
        grads = {p: np.ones_like(p.data) for p in tiny_net.parameters()}
        opt.step(grads, lr=0.1)
        np.testing.assert_allclose(w.data, before - 0.1)

    def test_weight_decay_skips_head(self, tiny_net):
        opt = SGD(tiny_net, momentum=0.0, weight_decay=0.5)
        eta_before = tiny_net.head.eta.data.copy()
        w_before = tiny_net.blocks[0].conv.weight.data.copy()
        grads = {p: np.zeros_like(p.data) for p in tiny_net.parameters()}
        opt.step(grads, lr=1.0)
        np.testing.assert_array_equal(tiny_net.head.eta.data, eta_before)
        np.testing.assert_allclose(tiny_net.blocks[0].conv.weight.data, 0.5 * w_before)

    def test_momentum_accumulates(self, tiny_net):
        opt = SGD(tiny_net, momentum=0.5, weight_decay=0.0)
        eta = tiny_net.head.eta
        start = eta.data.copy()
        grads = {p: np.ones_like(p.data) for p in tiny_net.parameters()}
        opt.step(grads, lr=1.0)
        opt.step(grads, lr=1.0)
        np.testing.assert_allclose(eta.data, start - 1.0 - 1.5)


class TestTrainStep:
    def _setup(self, smoke_config):
        train, test = load_data(smoke_config)
        p = smoke_config.plan
        plan = build_stage_plan(smoke_config.dataset.num_classes, p.num_stages, p.class_order_seed,
                                p.initial_half, p.initial_classes)
        model = build_model(smoke_config, train.image_shape[0])
        model.grow_head(len(plan.new_classes(0)), np.random.default_rng(0))
        return train, test, plan, model

    def test_one_backward_per_step(self, smoke_config, monkeypatch):
        train, _, plan, model = self._setup(smoke_config)
        teacher = model.clone_frozen()
        table = uniform_table(1, model.tap_indices, model.tap_channels())
        batch = next(stage_loader(plan, train, 0, batch_size=6))
        calls = []
        original = T.backward

        def counting(loss, wrt):
            calls.append(1)
            return original(loss, wrt)

        monkeypatch.setattr(T, "backward", counting)
        report, grads = train_step(model, teacher, batch, table, smoke_config, 1.5, use_disc=True)
        assert len(calls) == 1
        assert grads is not None
        assert report.total == pytest.approx(report.cls + smoke_config.train.lambda_disc * 1.5 * report.disc)

    def test_identical_teacher_has_zero_discrepancy(self, smoke_config):
        train, _, plan, model = self._setup(smoke_config)
        model.eval()
        teacher = model.clone_frozen()
        table = uniform_table(1, model.tap_indices, model.tap_channels())
        batch = next(stage_loader(plan, train, 0, batch_size=6))
        report, _ = train_step(model, teacher, batch, table, smoke_config, 2.0, use_disc=True)
        assert report.disc == pytest.approx(0.0, abs=1e-20)

    def test_teacher_not_updated(self, smoke_config):
        train, _, plan, model = self._setup(smoke_config)
        teacher = model.clone_frozen()
        digest = parameter_digest(teacher)
        table = uniform_table(1, model.tap_indices, model.tap_channels())
        opt = SGD(model)
        for batch in stage_loader(plan, train, 0, batch_size=6):
            _, grads = train_step(model, teacher, batch, table, smoke_config, 2.0, use_disc=True)
            assert all(p in grads for p in model.parameters())
            opt.step(grads, 0.1)
        assert parameter_digest(teacher) == digest
        assert parameter_digest(model) != digest


class TestRunStage:
    def _stage_zero(self, cfg):
        train, test = load_data(cfg)
        p = cfg.plan
        plan = build_stage_plan(cfg.dataset.num_classes, p.num_stages, p.class_order_seed,
                                p.initial_half, p.initial_classes)
        model = build_model(cfg, train.image_shape[0])
        model.grow_head(len(plan.new_classes(0)), derive_rng(cfg.seed, 2, 0))
        store = ExemplarStore(budget_mode=cfg.memory.budget_mode, budget=cfg.memory.budget)
        return train, test, plan, model, store

    def test_stage_zero_has_no_discrepancy(self, smoke_config):
        train, test, plan, model, store = self._stage_zero(smoke_config)
        result = run_stage(0, model, None, plan, store, None, smoke_config, train, test)
        assert all(row[4] == 0.0 for row in result.losses)
        assert all(row[6] == row[3] for row in result.losses)
        assert result.lambda_t == 1.0
        assert result.mixture.phi_old == 0.0
        assert len(result.store) == 3 * len(plan.new_classes(0))
        assert result.importance.finalized

    def test_teacher_required_after_stage_zero(self, smoke_config):
        train, test, plan, model, store = self._stage_zero(smoke_config)
        with pytest.raises(ContractError):
            run_stage(1, model, None, plan, store, None, smoke_config, train, test)
        with pytest.raises(ContractError):
            run_stage(0, model, model.clone_frozen(), plan, store, None, smoke_config, train, test)

    def test_uniform_mode_stores_ones(self, smoke_config):
        cfg = smoke_config.with_overrides({"mode": "uniform"})
        train, test, plan, model, store = self._stage_zero(cfg)
        result = run_stage(0, model, None, plan, store, None, cfg, train, test)
        assert all(np.all(w == 1.0) for w in result.importance.normalized)

    def test_finetune_mode_skips_importance(self, smoke_config):
        cfg = smoke_config.with_overrides({"mode": "finetune"})
        train, test, plan, model, store = self._stage_zero(cfg)
        assert run_stage(0, model, None, plan, store, None, cfg, train, test).importance is None

    def test_non_finite_loss_aborts_stage(self, smoke_config, monkeypatch):
        train, test, plan, model, store = self._stage_zero(smoke_config)
        nan = float("nan")
        monkeypatch.setattr(trainer, "train_step",
                            lambda *a, **k: (SimpleNamespace(cls=nan, disc=0.0, total=nan), None))
        with pytest.raises(StageAborted) as info:
            run_stage(0, model, None, plan, store, None, smoke_config, train, test)
        assert (info.value.stage, info.value.epoch, info.value.iteration) == (0, 0, 0)

    def test_checkpoint_written(self, smoke_config, tmp_path):
        train, test, plan, model, store = self._stage_zero(smoke_config)
        result = run_stage(0, model, None, plan, store, None, smoke_config, train, test,
                           checkpoint_dir=str(tmp_path))
        ckpt = load_checkpoint(result.checkpoint_path)
        assert ckpt.stage == 0
        assert ckpt.config_hash == smoke_config.config_hash()
        assert sorted(ckpt.importance) == list(model.tap_indices)


class TestRunExperiment:
    def test_two_stage_smoke(self, smoke_config, tmp_path):
        result = run_experiment(smoke_config, checkpoint_dir=str(tmp_path))
        assert len(result.stages) == 2
        s = result.summary
        assert s["num_stages"] == 2
        assert s["avg_inc_acc_nme"] == pytest.approx(np.mean(s["stage_acc_nme"]))
        assert s["bwt_nme"] is not None
        assert len(s["task_acc_cnn"][1]) == 2
        stage1 = [row for row in result.stages[1].losses]
        assert all(row[5] == pytest.approx(math.sqrt(4 / 2)) for row in stage1)
        assert 0.0 < result.stages[1].mixture.phi_old < 1.0

    def test_deterministic(self, smoke_config, tmp_path):
        a = run_experiment(smoke_config, checkpoint_dir=str(tmp_path / "a"))
        b = run_experiment(smoke_config, checkpoint_dir=str(tmp_path / "b"))
        assert a.summary == b.summary
        for sa, sb in zip(a.stages, b.stages):
            with open(sa.checkpoint_path, "rb") as fa, open(sb.checkpoint_path, "rb") as fb:
                assert fa.read() == fb.read()

    def test_zero_lambda_matches_finetune(self, smoke_config):
        a = run_experiment(smoke_config.with_overrides({"train.lambda_disc": 0.0}))
        b = run_experiment(smoke_config.with_overrides({"mode": "finetune"}))
        for sa, sb in zip(a.stages, b.stages):
            assert [r[3] for r in sa.losses] == [r[3] for r in sb.losses]
            assert all(r[6] == r[3] for r in sa.losses)
            assert sa.acc_nme == sb.acc_nme

    def test_single_stage(self, smoke_config):
        cfg = smoke_config.with_overrides({"plan.num_stages": 1, "plan.initial_half": False})
        result = run_experiment(cfg)
        s = result.summary
        assert s["avg_inc_acc_nme"] == result.stages[0].acc_nme
        assert s["bwt_nme"] is None

    def test_first_stage_needs_two_classes(self, smoke_config):
        cfg = smoke_config.with_overrides({"plan.initial_half": False, "plan.initial_classes": 1,
                                           "plan.num_stages": 4})
        with pytest.raises(ConfigError):
            run_experiment(cfg)

    def test_seed_streams(self, smoke_config):
        a = run_experiment(smoke_config)
        b = run_experiment(smoke_config.with_overrides({"seed": 1}))
        assert a.stages[0].losses != b.stages[0].losses
        assert BaselineMode(a.summary["mode"]) is BaselineMode.AFC
        assert derive_seed(0, 1) != derive_seed(1, 1)


class TestSampleSizeStudy:
    def test_rows_per_size_and_layer(self, smoke_config):
        rows = sample_size_study(smoke_config, [1, 4, 1000], repeats=3)
        sizes = sorted({r.sample_size for r in rows})
        assert sizes == [1, 4, 24]
        assert all(r.mean_std == 0.0 for r in rows if r.sample_size == 24)
        assert len(rows) == 3 * 2


def _idx_config(tmp_path, side=8, test_classes=None, per_class=12):
    """Smoke settings over IDX files written to tmp_path; test rows only for `test_classes`."""
    data_rng = np.random.default_rng(0)
    train_labels = np.repeat(np.arange(4), per_class)
    test_labels = np.repeat(np.asarray(sorted(test_classes) if test_classes is not None else range(4)), 4)
    paths = {}
    for split, labels in (("train", train_labels), ("test", test_labels)):
        images = data_rng.integers(0, 256, size=(len(labels), side, side))
        paths[f"{split}_images"] = write_idx(str(tmp_path / f"{split}-images.idx"), images, MAGIC_IMAGES)
        paths[f"{split}_labels"] = write_idx(str(tmp_path / f"{split}-labels.idx"), labels, MAGIC_LABELS)
    raw = preset("smoke")["config"]
    data = dict(raw, dataset=dict(kind="idx", num_classes=4, **paths))
    return ExperimentConfig.from_dict(data)


class TestIdxData:
    @pytest.mark.parametrize("side, channels, factor", [(10, [4, 6], 4), (28, [4, 6, 8], 8)])
    def test_indivisible_image_side_is_a_config_error(self, tmp_path, side, channels, factor):
        cfg = _idx_config(tmp_path, side=side).with_overrides({"network.channels": channels})
        with pytest.raises(ConfigError, match=f"{side}x{side}"):
            load_data(cfg)
        with pytest.raises(ConfigError, match=f"divisible by {factor}"):
            run_experiment(cfg)

    def test_end_to_end(self, tmp_path):
        result = run_experiment(_idx_config(tmp_path))
        assert len(result.stages) == 2
        assert all(0.0 <= s.acc_nme <= 100.0 for s in result.stages)

    def test_seen_classes_without_test_rows(self, tmp_path):
        p = ExperimentConfig.from_dict(preset("smoke")["config"]).plan
        plan = build_stage_plan(4, p.num_stages, p.class_order_seed, p.initial_half, p.initial_classes)
        cfg = _idx_config(tmp_path, test_classes=plan.new_classes(1))
        result = run_experiment(cfg)
        first = result.stages[0]
        assert first.acc_nme == 0.0 and first.acc_cnn == 0.0
        assert result.stages[1].task_acc_nme[0] == 0.0

    def test_empty_prediction(self, tiny_net):
        scores, embeddings = tiny_net.predict_scores(np.zeros((0, 1, 8, 8)))
        assert scores.shape == (0, 3)
        assert embeddings.shape == (0, 4)
