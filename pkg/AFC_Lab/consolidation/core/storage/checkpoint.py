"""
Stage checkpoint codec.

Byte layout (little endian):

    offset  size  field
    0       4     magic b"AFCK"
    4       4     u32 format version
    8       4     u32 header length H
    12      H     UTF-8 JSON header, sorted keys, compact
    12+H    ...   float64 blobs, back to back, in header "arrays" order

Each header "arrays" entry is {"name", "shape", "offset", "count"} with the
offset relative to the first blob byte. Names are "param/<dotted>",
"buffer/<dotted>", "raw/<layer>", "importance/<layer>" and "mean/<column>".
Raw importance is kept next to the normalised weights so a table can be
rebuilt and renormalised from the file alone. No timestamps,
so the same state always encodes to the same bytes.
"""

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..errors import ContractError, DimensionError, LabError
from ..importance import ImportanceTable

MAGIC = b"AFCK"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


class CheckpointError(LabError):
    pass


@dataclass
class Checkpoint:
    stage: int
    config_hash: str
    params: Dict[str, np.ndarray]
    buffers: Dict[str, np.ndarray]
    importance: Dict[int, np.ndarray] = field(default_factory=dict)
    raw_importance: Dict[int, np.ndarray] = field(default_factory=dict)
    exemplars: Dict[int, List[int]] = field(default_factory=dict)
    class_means: Dict[int, np.ndarray] = field(default_factory=dict)
    meta: Dict[str, object] = field(default_factory=dict)


def _arrays(ckpt: Checkpoint) -> List[Tuple[str, np.ndarray]]:
    out = [(f"param/{k}", v) for k, v in sorted(ckpt.params.items())]
    out += [(f"buffer/{k}", v) for k, v in sorted(ckpt.buffers.items())]
    out += [(f"raw/{k}", v) for k, v in sorted(ckpt.raw_importance.items())]
    out += [(f"importance/{k}", v) for k, v in sorted(ckpt.importance.items())]
    out += [(f"mean/{k}", v) for k, v in sorted(ckpt.class_means.items())]
    return out


def encode(ckpt: Checkpoint) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, array in _arrays(ckpt):
        data = np.ascontiguousarray(array, dtype="<f8")
        entries.append({"name": name, "shape": list(data.shape), "offset": offset, "count": int(data.size)})
        blobs.append(data.tobytes())
        offset += data.nbytes
    header = {
        "stage": int(ckpt.stage),
        "config_hash": ckpt.config_hash,
        "exemplars": {str(k): [int(i) for i in v] for k, v in sorted(ckpt.exemplars.items())},
        "meta": ckpt.meta,
        "arrays": entries,
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(raw)) + raw + b"".join(blobs)


def decode(blob: bytes, path: str = "<bytes>") -> Checkpoint:
    if len(blob) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, header_len = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    start = _PREFIX.size + header_len
    if len(blob) < start:
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(blob[_PREFIX.size:start].decode("utf-8"))
    ckpt = Checkpoint(stage=header["stage"], config_hash=header["config_hash"], params={}, buffers={},
                      exemplars={int(k): list(v) for k, v in header["exemplars"].items()},
                      meta=header.get("meta", {}))
    for entry in header["arrays"]:
        lo = start + entry["offset"]
        hi = lo + 8 * entry["count"]
        if hi > len(blob):
            raise CheckpointError(f"{path}: truncated array {entry['name']}")
        array = np.frombuffer(blob[lo:hi], dtype="<f8").astype(np.float64).reshape(entry["shape"])
        kind, _, key = entry["name"].partition("/")
        if kind == "param":
            ckpt.params[key] = array
        elif kind == "buffer":
            ckpt.buffers[key] = array
        elif kind == "importance":
            ckpt.importance[int(key)] = array
        elif kind == "raw":
            ckpt.raw_importance[int(key)] = array
        elif kind == "mean":
            ckpt.class_means[int(key)] = array
    return ckpt


def save_checkpoint(path: str, ckpt: Checkpoint) -> str:
    folder = os.path.dirname(path)
    if folder:
        os.makedirs(folder, exist_ok=True)
    with open(path, "wb") as f:
        f.write(encode(ckpt))
    return path


def load_checkpoint(path: str) -> Optional[Checkpoint]:
    if not os.path.exists(path):
        return None
    with open(path, "rb") as f:
        return decode(f.read(), path)


def capture(model, stage: int, config_hash: str, importance=None, store=None,
            meta: Optional[Dict[str, object]] = None) -> Checkpoint:
    """Snapshot of a model (plus the stage's importance table and exemplar store)."""
    ckpt = Checkpoint(
        stage=stage,
        config_hash=config_hash,
        params={k: p.data.copy() for k, p in model.named_parameters()},
        buffers={k: b.copy() for k, b in model.named_buffers()},
        meta=dict(meta or {}),
    )
    ckpt.meta.setdefault("num_classes", model.num_classes)
    if importance is not None and importance.finalized:
        ckpt.importance = {layer: np.asarray(w) for layer, w in zip(importance.layers, importance.normalized)}
        ckpt.raw_importance = {layer: np.asarray(r) for layer, r in zip(importance.layers, importance.raw)}
    if store is not None:
        ckpt.exemplars = {k: list(v) for k, v in store.per_class.items()}
        ckpt.class_means = dict(store.class_means)
    return ckpt


def restore_importance(ckpt: Checkpoint) -> Optional[ImportanceTable]:
    """The stage's finalized importance table, or None when the checkpoint has none."""
    if not ckpt.importance:
        return None
    layers = sorted(ckpt.importance)
    if sorted(ckpt.raw_importance) != layers:
        raise CheckpointError(f"raw importance layers {sorted(ckpt.raw_importance)} != normalized layers {layers}")
    return ImportanceTable(stage=ckpt.stage, layers=layers, raw=[ckpt.raw_importance[k] for k in layers],
                           normalized=[ckpt.importance[k] for k in layers])


def restore_model(model, ckpt: Checkpoint, rng: Optional[np.random.Generator] = None):
    """Load parameters and buffers into `model`, growing its head first if needed."""
    missing = model.num_classes - int(ckpt.meta.get("num_classes", model.num_classes))
    if missing > 0:
        raise ContractError(f"model head has {model.num_classes} classes, checkpoint fewer")
    if missing < 0:
        model.grow_head(-missing, rng or np.random.default_rng(0))
    params = dict(model.named_parameters())
    if set(params) != set(ckpt.params):
        raise DimensionError(f"parameter names differ: {sorted(set(params) ^ set(ckpt.params))}")
    for name, p in params.items():
        if p.shape != ckpt.params[name].shape:
            raise DimensionError(f"{name}: model {p.shape} vs checkpoint {ckpt.params[name].shape}")
        p.data = ckpt.params[name].copy()
    for name, value in ckpt.buffers.items():
        model.set_buffer(name, value)
    return model
