import json
import struct

import numpy as np
import pytest

from consolidation.core.errors import ContractError, DimensionError
from consolidation.core.importance import ImportanceTable, finalize
from consolidation.core.memory import ExemplarStore
from consolidation.core.network import IncrementalNet
from consolidation.core.storage import (CheckpointError, capture, load_checkpoint, read_csv, read_json,
                                        restore_importance, restore_model, save_checkpoint, write_csv,
                                        write_json)
from consolidation.core.storage.checkpoint import decode, encode


@pytest.fixture
def snapshot(tiny_net):
    table = finalize(ImportanceTable(stage=0, layers=[1, 2], raw=[np.array([1.0, 2.0, 3.0]), np.ones(4)]))
    store = ExemplarStore(per_class={0: [3, 1], 2: [7]},
                          class_means={0: np.array([0.6, 0.8, 0.0, 0.0]), 2: np.array([0.0, 0.0, 1.0, 0.0])})
    return capture(tiny_net, 0, "abcdef0123456789", table, store, meta={"mode": "afc"})


class TestCodec:
    def test_round_trip(self, snapshot):
        back = decode(encode(snapshot))
        assert back.stage == 0 and back.config_hash == "abcdef0123456789"
        assert back.meta == {"mode": "afc", "num_classes": 3}
        assert back.exemplars == {0: [3, 1], 2: [7]}
        assert sorted(back.params) == sorted(snapshot.params)
        for name, value in snapshot.params.items():
            np.testing.assert_array_equal(back.params[name], value)
        for name, value in snapshot.buffers.items():
            np.testing.assert_array_equal(back.buffers[name], value)
        np.testing.assert_array_equal(back.importance[1], [0.5, 1.0, 1.5])
        np.testing.assert_array_equal(back.raw_importance[1], [1.0, 2.0, 3.0])
        np.testing.assert_array_equal(back.raw_importance[2], np.ones(4))
        np.testing.assert_array_equal(back.class_means[2], [0.0, 0.0, 1.0, 0.0])

    def test_same_state_same_bytes(self, snapshot, tiny_net):
        again = capture(tiny_net, 0, "abcdef0123456789", None, None, meta={"mode": "afc"})
        again.importance, again.exemplars, again.class_means = (snapshot.importance, snapshot.exemplars,
                                                                 snapshot.class_means)
        again.raw_importance = snapshot.raw_importance
        assert encode(again) == encode(snapshot)

    def test_header_layout(self, snapshot):
        blob = encode(snapshot)
        magic, version, header_len = struct.unpack_from("<4sII", blob, 0)
        assert magic == b"AFCK" and version == 1
        header = json.loads(blob[12:12 + header_len])
        total = sum(8 * a["count"] for a in header["arrays"])
        assert len(blob) == 12 + header_len + total

    def test_bad_magic(self, snapshot):
        blob = bytearray(encode(snapshot))
        blob[:4] = b"NOPE"
        with pytest.raises(CheckpointError, match="magic"):
            decode(bytes(blob))

    def test_bad_version(self, snapshot):
        blob = bytearray(encode(snapshot))
        struct.pack_into("<I", blob, 4, 9)
        with pytest.raises(CheckpointError, match="version"):
            decode(bytes(blob))

    @pytest.mark.parametrize("keep", [5, 40, -8])
    def test_truncated(self, snapshot, keep):
        with pytest.raises(CheckpointError, match="truncated"):
            decode(encode(snapshot)[:keep])


class TestImportance:
    def test_table_rebuilt_from_file(self, snapshot, tmp_path):
        back = load_checkpoint(save_checkpoint(str(tmp_path / "s.ckpt"), snapshot))
        table = restore_importance(back)
        assert table.finalized and table.layers == [1, 2] and table.stage == 0
        np.testing.assert_array_equal(table.raw[0], [1.0, 2.0, 3.0])
        renormalized = finalize(ImportanceTable(stage=0, layers=table.layers, raw=table.raw))
        for a, b in zip(renormalized.normalized, table.normalized):
            np.testing.assert_array_equal(a, b)

    def test_unfinalized_table_is_not_stored(self, tiny_net):
        table = ImportanceTable(stage=0, layers=[1], raw=[np.ones(3)])
        ckpt = decode(encode(capture(tiny_net, 0, "h", table, None)))
        assert ckpt.importance == {} and ckpt.raw_importance == {}
        assert restore_importance(ckpt) is None

    def test_raw_layers_must_match(self, snapshot):
        snapshot.raw_importance.pop(2)
        with pytest.raises(CheckpointError, match="raw importance"):
            restore_importance(decode(encode(snapshot)))


class TestFiles:
    def test_missing_is_none(self, tmp_path):
        assert load_checkpoint(str(tmp_path / "nothing.ckpt")) is None

    def test_save_and_load(self, snapshot, tmp_path):
        path = save_checkpoint(str(tmp_path / "deep" / "stage0.ckpt"), snapshot)
        back = load_checkpoint(path)
        assert back.exemplars == snapshot.exemplars


class TestRestore:
    def test_restore_grows_head_and_matches(self, tiny_net, tiny_data, snapshot):
        fresh = IncrementalNet(in_channels=1, channels=(3, 4), proxies_per_class=2, seed=9)
        restore_model(fresh, snapshot)
        assert fresh.num_classes == 3
        tiny_net.eval()
        fresh.eval()
        a_scores, a_emb = tiny_net.predict_scores(tiny_data.images)
        b_scores, b_emb = fresh.predict_scores(tiny_data.images)
        np.testing.assert_array_equal(a_scores, b_scores)
        np.testing.assert_array_equal(a_emb, b_emb)

    def test_restore_into_larger_head(self, snapshot):
        big = IncrementalNet(in_channels=1, channels=(3, 4), proxies_per_class=2, seed=0)
        big.grow_head(5, np.random.default_rng(0))
        with pytest.raises(ContractError):
            restore_model(big, snapshot)

    def test_restore_shape_mismatch(self, snapshot):
        other = IncrementalNet(in_channels=1, channels=(3, 5), proxies_per_class=2, seed=0)
        with pytest.raises(DimensionError):
            restore_model(other, snapshot)


class TestRecords:
    def test_csv(self, tmp_path):
        path = write_csv(str(tmp_path / "a" / "t.csv"), ["x", "y"], [(1, 0.5), (2, float("nan"))])
        rows = read_csv(path)
        assert rows == [{"x": "1", "y": "0.5"}, {"x": "2", "y": "nan"}]

    def test_csv_row_length(self, tmp_path):
        with pytest.raises(ValueError):
            write_csv(str(tmp_path / "t.csv"), ["x", "y"], [(1,)])

    def test_json_is_stable(self, tmp_path):
        payload = {"b": np.float64(1.5), "a": [float("inf"), np.int64(3)]}
        path = write_json(str(tmp_path / "s.json"), payload)
        with open(path, encoding="utf-8") as f:
            text = f.read()
        assert text.endswith("\n")
        assert text.index('"a"') < text.index('"b"')
        assert read_json(path) == {"a": [None, 3], "b": 1.5}
