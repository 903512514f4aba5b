"""Backbone, LSC head, head growth and frozen clones."""

import numpy as np
import pytest

from consolidation.core import tensor as T
from consolidation.core.errors import ContractError, DimensionError
from consolidation.core.network import IncrementalNet, LscHead, lsc_scores, parameter_digest


def _unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


class TestLscScores:
    """Soft maximum over the J proxies of each class."""

    def test_single_proxy_is_cosine(self, rng):
        h = _unit(rng.standard_normal((3, 5)))
        proxies = _unit(rng.standard_normal((4, 5)))
        np.testing.assert_allclose(lsc_scores(T.Tensor(h), T.Tensor(proxies), 1).data, h @ proxies.T,
                                   rtol=1e-12)

    def test_two_proxies_reference_value(self):
        h = np.array([[1.0, 0.0]])
        proxies = np.array([[0.8, 0.6], [0.2, np.sqrt(1 - 0.04)]])
        score = lsc_scores(T.Tensor(h), T.Tensor(proxies), 2).item()
        assert score == pytest.approx(0.5874, abs=1e-4)

    def test_equal_similarities(self):
        h = np.array([[1.0, 0.0]])
        proxies = np.array([[0.3, 0.9], [0.3, -0.9], [0.3, 0.1]])
        np.testing.assert_allclose(lsc_scores(T.Tensor(h), T.Tensor(proxies), 3).data, [[0.3]], rtol=1e-12)

    def test_proxy_equal_to_embedding(self):
        h = _unit([[0.3, -0.4, 1.2]])
        proxies = np.vstack([h, _unit([[1.0, 0.0, 0.0]])])
        scores = lsc_scores(T.Tensor(h), T.Tensor(proxies), 1).data
        assert scores[0, 0] == pytest.approx(1.0, abs=1e-12)
        assert scores[0, 0] >= scores[0, 1]


class TestHead:
    def test_grow_keeps_existing_rows(self):
        head = LscHead(dim=6, proxies_per_class=3)
        head.grow(4, np.random.default_rng(0))
        before = head.proxies.data.copy()
        head.grow(2, np.random.default_rng(1))
        assert head.num_classes == 6
        np.testing.assert_array_equal(head.proxies.data[:12], before)
        np.testing.assert_allclose(np.linalg.norm(head.proxies.data, axis=1), 1.0, rtol=1e-12)

    def test_grow_by_zero(self):
        with pytest.raises(ContractError):
            LscHead(dim=4).grow(0, np.random.default_rng(0))

    def test_forward_before_grow(self):
        with pytest.raises(ContractError):
            LscHead(dim=4).forward(T.Tensor(np.ones((1, 4))))

    def test_renormalize(self):
        head = LscHead(dim=2, proxies_per_class=1)
        head.proxies.data = np.array([[3.0, 4.0], [0.0, 0.0]])
        head.renormalize()
        np.testing.assert_allclose(head.proxies.data, [[0.6, 0.8], [0.0, 0.0]])


class TestIncrementalNet:
    def test_score_shape_and_range(self, rng):
        net = IncrementalNet(in_channels=1, channels=(3, 4), proxies_per_class=2, seed=0)
        net.grow_head(4, rng)
        out = net.forward(rng.random((2, 1, 8, 8)))
        assert out.scores.shape == (2, 4)
        assert np.all(np.abs(out.scores.data) <= 1.0 + 1e-12)
        np.testing.assert_allclose(np.linalg.norm(out.embedding.data, axis=1), 1.0, rtol=1e-9)
        assert [t.layer for t in out.taps] == [1, 2]
        assert out.taps[0].maps.shape == (2, 3, 4, 4)
        assert out.taps[1].maps.shape == (2, 4, 2, 2)

    def test_tap_subset(self):
        net = IncrementalNet(in_channels=1, channels=(3, 4, 5), tap_indices=[2], seed=0)
        assert net.tap_channels() == [4]
        with pytest.raises(ContractError):
            IncrementalNet(in_channels=1, channels=(3, 4), tap_indices=[3])

    def test_wrong_input_channels(self, tiny_net):
        with pytest.raises(DimensionError):
            tiny_net.forward(np.zeros((1, 3, 8, 8)))

    def test_clone_gives_identical_taps(self, tiny_net, rng):
        x = rng.random((3, 1, 8, 8))
        tiny_net.eval()
        teacher = tiny_net.clone_frozen()
        a, b = tiny_net.forward(x), teacher.forward(x)
        for sa, sb in zip(a.taps, b.taps):
            np.testing.assert_array_equal(sa.maps.data, sb.maps.data)

    def test_teacher_ignores_student_updates(self, tiny_net, rng):
        x = rng.random((3, 1, 8, 8))
        teacher = tiny_net.clone_frozen()
        before = teacher.forward(x).scores.data.copy()
        for p in tiny_net.parameters():
            p.data += 0.5
        tiny_net.forward(x)
        np.testing.assert_array_equal(teacher.forward(x).scores.data, before)

    def test_clone_is_frozen(self, tiny_net, rng):
        teacher = tiny_net.clone_frozen()
        teacher.train()
        assert teacher.frozen and not teacher.training
        assert not any(p.requires_grad for p in teacher.parameters())
        with T.Tape() as tape:
            teacher.forward(rng.random((2, 1, 8, 8)))
        assert len(tape) == 0

    def test_grow_leaves_old_scores(self, tiny_net, rng):
        x = rng.random((4, 1, 8, 8))
        tiny_net.eval()
        before = tiny_net.forward(x).scores.data.copy()
        tiny_net.grow_head(2, rng)
        after = tiny_net.forward(x).scores.data
        assert after.shape == (4, 5)
        np.testing.assert_allclose(after[:, :3], before, rtol=1e-12, atol=1e-12)

    def test_forward_from_tap_matches_forward(self, tiny_net, rng):
        x = rng.random((2, 1, 8, 8))
        tiny_net.eval()
        full = tiny_net.forward(x)
        resumed = tiny_net.forward_from_tap(1, full.taps[0].maps.data)
        np.testing.assert_array_equal(resumed.scores.data, full.scores.data)

    def test_batch_norm_stats_update_only_in_training(self, tiny_net, rng):
        x = rng.random((4, 1, 8, 8))
        key = "block1.norm.running_mean"
        start = dict(tiny_net.named_buffers())[key].copy()
        tiny_net.eval()
        tiny_net.forward(x)
        np.testing.assert_array_equal(dict(tiny_net.named_buffers())[key], start)
        tiny_net.train()
        tiny_net.forward(x)
        assert not np.array_equal(dict(tiny_net.named_buffers())[key], start)

    def test_same_seed_same_weights(self):
        a = IncrementalNet(in_channels=1, channels=(3, 4), seed=7)
        b = IncrementalNet(in_channels=1, channels=(3, 4), seed=7)
        assert parameter_digest(a) == parameter_digest(b)

    def test_digest_tracks_parameters(self, tiny_net):
        before = parameter_digest(tiny_net)
        tiny_net.head.eta.data += 1.0
        assert parameter_digest(tiny_net) != before

    def test_embed_and_predict_agree(self, tiny_net, rng):
        x = rng.random((5, 1, 8, 8))
        scores, emb = tiny_net.predict_scores(x, batch_size=2)
        np.testing.assert_allclose(tiny_net.embed(x, batch_size=3), emb, rtol=1e-10, atol=1e-12)
        assert scores.shape == (5, 3)
        assert tiny_net.training
