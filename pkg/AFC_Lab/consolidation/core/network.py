"""
Backbone of conv blocks with feature taps, plus the local-similarity head.

- Module: tiny parameter/buffer registry with train/eval switch
- ConvBlock: conv3x3 (no bias) -> batch norm -> relu|softplus -> avg-pool 2
- LscHead: J unit proxies per class, learnable scale eta, margin delta
- IncrementalNet: backbone + head; grow_head(), clone_frozen(), forward()
"""

from __future__ import annotations

import copy
import hashlib
import logging
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor

logger = logging.getLogger(__name__)

DEFAULT_CHANNELS = (16, 32, 64)
DEFAULT_PROXIES = 10
DEFAULT_DELTA = 0.6
DEFAULT_ETA = 1.0
EMBED_EPS = 1e-12


@dataclass
class FeatureTap:
    layer: int          # 1-based block index
    channels: int
    maps: Tensor        # [B, C, H, W]


@dataclass
class ForwardOutput:
    scores: Tensor      # [B, n_t], every entry in [-1, 1]
    taps: List[FeatureTap]
    embedding: Tensor   # [B, d], unit rows


# -----------------------------------------------------------------------------
# Module base
# -----------------------------------------------------------------------------
class Module:
    def __init__(self) -> None:
        self.training = True
        self._params: Dict[str, Tensor] = {}
        self._buffers: Dict[str, np.ndarray] = {}
        self._children: Dict[str, "Module"] = {}

    def add_parameter(self, name: str, data: np.ndarray) -> Tensor:
        p = T.parameter(data)
        self._params[name] = p
        return p

    def add_buffer(self, name: str, data: np.ndarray) -> None:
        self._buffers[name] = np.array(data, dtype=np.float64)

    def add_child(self, name: str, child: "Module") -> "Module":
        self._children[name] = child
        return child

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def set_buffer(self, dotted: str, value: np.ndarray) -> None:
        head, _, rest = dotted.partition(".")
        if rest:
            self._children[head].set_buffer(rest, value)
        else:
            self._buffers[head] = np.array(value, dtype=np.float64)

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


# -----------------------------------------------------------------------------
# Layers
# -----------------------------------------------------------------------------
class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, kernel: int = 3):
        super().__init__()
        std = np.sqrt(2.0 / (in_ch * kernel * kernel))
        self.weight = self.add_parameter("weight", rng.normal(0.0, std, size=(out_ch, in_ch, kernel, kernel)))
        self.padding = kernel // 2

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, stride=1, padding=self.padding)


class BatchNorm2d(Module):
    """Per-channel batch norm; running stats use the unbiased batch variance."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = self.add_parameter("gamma", np.ones(channels))
        self.beta = self.add_parameter("beta", np.zeros(channels))
        self.add_buffer("running_mean", np.zeros(channels))
        self.add_buffer("running_var", np.ones(channels))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor, update_stats: bool = True) -> Tensor:
        c = x.shape[1]
        gamma = T.reshape(self.gamma, (1, c, 1, 1))
        beta = T.reshape(self.beta, (1, c, 1, 1))
        if self.training:
            mu = T.mean(x, axis=(0, 2, 3), keepdims=True)
            centered = x - mu
            var = T.mean(centered * centered, axis=(0, 2, 3), keepdims=True)
            if update_stats:
                n = x.shape[0] * x.shape[2] * x.shape[3]
                unbiased = var.data.reshape(c) * (n / max(n - 1, 1))
                m = self.momentum
                self._buffers["running_mean"] = (1 - m) * self._buffers["running_mean"] + m * mu.data.reshape(c)
                self._buffers["running_var"] = (1 - m) * self._buffers["running_var"] + m * unbiased
            xhat = centered / T.sqrt(var + self.eps)
        else:
            rm = self._buffers["running_mean"].reshape(1, c, 1, 1)
            rv = self._buffers["running_var"].reshape(1, c, 1, 1)
            xhat = (x - rm) * (1.0 / np.sqrt(rv + self.eps))
        return xhat * gamma + beta


class ConvBlock(Module):
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, activation: str = "relu",
                 bn_momentum: float = 0.1, bn_eps: float = 1e-5):
        super().__init__()
        if activation not in ("relu", "softplus"):
            raise ContractError(f"unknown activation {activation!r}")
        self.conv = self.add_child("conv", Conv2d(in_ch, out_ch, rng))
        self.norm = self.add_child("norm", BatchNorm2d(out_ch, bn_momentum, bn_eps))
        self.activation = activation
        self.out_channels = out_ch

    def forward(self, x: Tensor, update_stats: bool = True,
                pattern: Optional[List[np.ndarray]] = None) -> Tensor:
        pre = self.norm.forward(self.conv.forward(x), update_stats=update_stats)
        if self.activation == "relu":
            if pattern is not None:
                pattern.append(pre.data > 0)
            act = T.relu(pre)
        else:
            act = T.softplus(pre)
        return T.avg_pool(act, 2)


# -----------------------------------------------------------------------------
# Head
# -----------------------------------------------------------------------------
def lsc_scores(h: Tensor, proxies: Tensor, proxies_per_class: int) -> Tensor:
    """
    y_k = sum_j softmax_j(<theta_kj, h>) <theta_kj, h>

    h: [B, d] unit rows; proxies: [K*J, d] unit rows, class-major.
    """
    sims = T.matmul(h, T.transpose(proxies))
    b = h.shape[0]
    k = proxies.shape[0] // proxies_per_class
    sims = T.reshape(sims, (b, k, proxies_per_class))
    weights = T.softmax(sims, axis=2)
    return T.tsum(weights * sims, axis=2)


class LscHead(Module):
    def __init__(self, dim: int, proxies_per_class: int = DEFAULT_PROXIES,
                 delta: float = DEFAULT_DELTA, eta_init: float = DEFAULT_ETA):
        super().__init__()
        if proxies_per_class < 1:
            raise ContractError("proxies_per_class must be >= 1")
        self.dim = dim
        self.proxies_per_class = proxies_per_class
        self.delta = float(delta)
        self.proxies = self.add_parameter("proxies", np.zeros((0, dim)))
        self.eta = self.add_parameter("eta", np.array([float(eta_init)]))

    @property
    def num_classes(self) -> int:
        return self.proxies.shape[0] // self.proxies_per_class

    def grow(self, new_classes: int, rng: np.random.Generator) -> None:
        """Append J fresh unit proxies per new class; existing rows are untouched."""
        if new_classes < 1:
            raise ContractError(f"grow_head needs new_classes >= 1, got {new_classes}")
        fresh = rng.standard_normal((new_classes * self.proxies_per_class, self.dim))
        fresh /= np.linalg.norm(fresh, axis=1, keepdims=True)
        self.proxies.data = np.concatenate([self.proxies.data, fresh], axis=0)

    def renormalize(self) -> None:
        norms = np.linalg.norm(self.proxies.data, axis=1, keepdims=True)
        self.proxies.data = self.proxies.data / np.where(norms > 0, norms, 1.0)

    def forward(self, h: Tensor) -> Tensor:
        if self.num_classes == 0:
            raise ContractError("head has no classes; call grow_head first")
        if h.shape[1] != self.dim:
            raise DimensionError(f"embedding width {h.shape[1]} != head dim {self.dim}")
        return lsc_scores(h, self.proxies, self.proxies_per_class)


# -----------------------------------------------------------------------------
# Network
# -----------------------------------------------------------------------------
class IncrementalNet(Module):
    """
    Conv blocks -> spatial mean -> L2-normalised embedding -> LSC head.
    Taps are the outputs of the blocks listed in `tap_indices` (1-based).
    """

    def __init__(self, in_channels: int = 3, channels: Sequence[int] = DEFAULT_CHANNELS,
                 activation: str = "relu", proxies_per_class: int = DEFAULT_PROXIES,
                 delta: float = DEFAULT_DELTA, eta_init: float = DEFAULT_ETA,
                 tap_indices: Optional[Sequence[int]] = None, bn_momentum: float = 0.1,
                 bn_eps: float = 1e-5, seed: int = 0):
        super().__init__()
        if not channels:
            raise ContractError("backbone needs at least one block")
        rng = np.random.default_rng(seed)
        self.in_channels = in_channels
        self.channels = tuple(int(c) for c in channels)
        self.blocks: List[ConvBlock] = []
        prev = in_channels
        for i, out_ch in enumerate(self.channels, start=1):
            block = ConvBlock(prev, out_ch, rng, activation, bn_momentum, bn_eps)
            self.blocks.append(self.add_child(f"block{i}", block))
            prev = out_ch
        self.tap_indices = tuple(tap_indices) if tap_indices is not None else tuple(range(1, len(self.channels) + 1))
        if any(not 1 <= i <= len(self.channels) for i in self.tap_indices):
            raise ContractError(f"tap indices {self.tap_indices} outside 1..{len(self.channels)}")
        self.embedding_dim = self.channels[-1]
        self.head = self.add_child("head", LscHead(self.embedding_dim, proxies_per_class, delta, eta_init))
        self.frozen = False

    # ---------- head management ----------
    @property
    def num_classes(self) -> int:
        return self.head.num_classes

    def grow_head(self, new_classes: int, rng: np.random.Generator) -> "IncrementalNet":
        self.head.grow(new_classes, rng)
        logger.debug("Head grown by %d classes to %d", new_classes, self.num_classes)
        return self

    def clone_frozen(self) -> "IncrementalNet":
        """Deep copy in eval mode with gradients disabled."""
        twin = copy.deepcopy(self)
        twin.requires_grad_(False)
        twin.eval()
        twin.frozen = True
        return twin

    def train(self, mode: bool = True) -> "IncrementalNet":
        # a frozen teacher stays in eval mode
        super().train(mode and not getattr(self, "frozen", False))
        return self

    # ---------- forward ----------
    def tap_channels(self) -> List[int]:
        return [self.channels[i - 1] for i in self.tap_indices]

    def _run_blocks(self, x: Tensor, start: int, update_stats: bool,
                    pattern: Optional[List[np.ndarray]]) -> Tuple[Tensor, List[FeatureTap]]:
        taps: List[FeatureTap] = []
        for i in range(start, len(self.blocks) + 1):
            x = self.blocks[i - 1].forward(x, update_stats=update_stats, pattern=pattern)
            if i in self.tap_indices:
                taps.append(FeatureTap(layer=i, channels=self.channels[i - 1], maps=x))
        return x, taps

    def _head(self, z: Tensor, taps: List[FeatureTap]) -> ForwardOutput:
        pooled = T.mean(z, axis=(2, 3))
        norm = T.frobenius_norm(pooled, axis=1, keepdims=True)
        h = pooled / (norm + EMBED_EPS)
        return ForwardOutput(scores=self.head.forward(h), taps=taps, embedding=h)

    def forward(self, x, update_stats: bool = True) -> ForwardOutput:
        x = T.as_tensor(x)
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(f"expected [B,{self.in_channels},H,W] input, got {x.shape}")
        z, taps = self._run_blocks(x, 1, update_stats, None)
        return self._head(z, taps)

    def forward_from_tap(self, layer: int, maps, pattern: Optional[List[np.ndarray]] = None) -> ForwardOutput:
        """Continue the forward pass from the output of block `layer` (no stat updates)."""
        if not 1 <= layer <= len(self.blocks):
            raise ContractError(f"layer {layer} outside 1..{len(self.blocks)}")
        maps = T.as_tensor(maps)
        taps = [FeatureTap(layer=layer, channels=self.channels[layer - 1], maps=maps)]
        z, later = self._run_blocks(maps, layer + 1, False, pattern)
        return self._head(z, taps + later)

    def embed(self, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
        """Unit embeddings for a stack of images, eval mode, no recording."""
        was_training = self.training
        self.eval()
        try:
            out = [self.forward(images[i:i + batch_size], update_stats=False).embedding.data
                   for i in range(0, len(images), batch_size)]
        finally:
            self.train(was_training)
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.embedding_dim))

    def predict_scores(self, images: np.ndarray, batch_size: int = 128) -> Tuple[np.ndarray, np.ndarray]:
        """(scores, embeddings) in eval mode."""
        was_training = self.training
        self.eval()
        scores, embeds = [], []
        try:
            for i in range(0, len(images), batch_size):
                out = self.forward(images[i:i + batch_size], update_stats=False)
                scores.append(out.scores.data)
                embeds.append(out.embedding.data)
        finally:
            self.train(was_training)
        if not scores:
            return np.zeros((0, self.num_classes)), np.zeros((0, self.embedding_dim))
        return np.concatenate(scores, axis=0), np.concatenate(embeds, axis=0)


def parameter_digest(model: Module) -> str:
    """sha256 over parameter names, shapes and bytes."""
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(str(p.shape).encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()
