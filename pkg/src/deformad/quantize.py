"""Single-item vector quantization of encoder features.

Each spatial feature column is replaced by its nearest memory prototype;
the decoder sees the quantized cube through a straight-through composite
so reconstruction gradients reach the encoder while prototypes learn only
from the compression loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from .numeric.tensor import Tensor, _make, stop_gradient


class MemoryBank:
    """Prototype matrix (depth x items) with per-item usage statistics."""

    def __init__(self, items, seed=0):
        items = np.asarray(items)
        if items.ndim != 2 or items.shape[0] < 1 or items.shape[1] < 1:
            raise ValueError(f"memory needs a (depth, items) matrix, got "
                             f"shape {items.shape}")
        if not np.all(np.isfinite(items)):
            raise ValueError("memory items must be finite")
        self.items = Tensor(items, requires_grad=True, name="memory.items")
        self.usage_counts = np.zeros(items.shape[1], dtype=np.int64)
        self.stale_epochs = np.zeros(items.shape[1], dtype=np.int64)
        self._rng = np.random.default_rng(seed)

    @classmethod
    def initialize(cls, depth, n_items, seed=0, sigma=0.1):
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, sigma, size=(depth, n_items)), seed=seed)

    @property
    def depth(self):
        return self.items.shape[0]

    @property
    def n_items(self):
        return self.items.shape[1]

    def reset_usage(self):
        self.usage_counts[:] = 0


@dataclass
class QuantizedEmbedding:
    """Result of quantizing a feature cube.

    ``z_q`` columns are exact copies of the selected prototypes;
    ``straight_through`` carries the same values but routes gradients to
    the query features, and is what the decoder consumes.
    """

    codes: np.ndarray          # (B, H', W') item indices
    z_q: Tensor                # (B, D, H', W'), differentiable to the bank
    z_e: Tensor                # the query features
    straight_through: Tensor


def _lookup(bank: MemoryBank, codes: np.ndarray) -> Tensor:
    items = bank.items
    data = items.data[:, codes]                      # (D, B, H, W)
    data = np.ascontiguousarray(data.transpose(1, 0, 2, 3))
    n_items = items.shape[1]

    def backward(dout):
        d = dout.shape[1]
        dflat = dout.transpose(1, 0, 2, 3).reshape(d, -1)
        onehot = (codes.reshape(-1)[:, None]
                  == np.arange(n_items)[None, :]).astype(dout.dtype)
        return (dflat @ onehot,)

    return _make(data, (items,), "memory_lookup", backward)


def quantize(z_e: Tensor, bank: MemoryBank, update_usage=True) -> QuantizedEmbedding:
    """Replace every feature column with its argmin-L2 prototype.

    Ties break toward the lowest item index. ``update_usage=False`` makes
    the call read-only for concurrent inference.
    """
    if bank.n_items < 1:
        raise ValueError("cannot quantize against an empty memory")
    if z_e.ndim != 4:
        raise ValueError(f"expected (B, D, H, W) features, got shape {z_e.shape}")
    if z_e.shape[1] != bank.depth:
        raise ValueError(f"feature depth {z_e.shape[1]} does not match "
                         f"memory depth {bank.depth}")

    diff = z_e.data[:, :, :, :, None] - bank.items.data[None, :, None, None, :]
    dist2 = np.einsum("bdhwn,bdhwn->bhwn", diff, diff)
    codes = np.argmin(dist2, axis=-1)

    if update_usage:
        bank.usage_counts += np.bincount(codes.reshape(-1),
                                         minlength=bank.n_items)

    z_q = _lookup(bank, codes)
    delta = Tensor(z_q.data - z_e.data, dtype=z_e.data.dtype)
    straight_through = z_e + delta
    return QuantizedEmbedding(codes=codes, z_q=z_q, z_e=z_e,
                              straight_through=straight_through)


def compression_loss(z_e: Tensor, z_q: Tensor, beta: float) -> Tensor:
    """Mean-squared pull of prototypes toward queries plus the beta-weighted
    commitment of queries toward their (frozen) prototypes."""
    if z_e.shape != z_q.shape:
        raise ValueError(f"shape mismatch: z_e {z_e.shape} vs z_q {z_q.shape}")
    embed = ((stop_gradient(z_e) - z_q) ** 2).mean()
    commit = ((z_e - stop_gradient(z_q)) ** 2).mean()
    return embed + beta * commit


class SkipReducer:
    """Low-capacity skip path: 1x1 convolution over stop-gradient features.

    The reduction factor keeps the channel budget at C/reduction so the
    path cannot smuggle enough information to reconstruct anomalies.
    """

    MIN_REDUCTION = 16

    def __init__(self, in_channels, reduction, seed=0):
        if reduction < self.MIN_REDUCTION:
            raise ValueError(f"skip reduction must be >= {self.MIN_REDUCTION}, "
                             f"got {reduction}")
        self.in_channels = in_channels
        self.out_channels = max(1, in_channels // reduction)
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(in_channels)
        self.weight = Tensor(rng.uniform(-scale, scale,
                                         size=(self.out_channels, in_channels, 1, 1)),
                             requires_grad=True, name="skip.weight")
        self.bias = Tensor(np.zeros(self.out_channels), requires_grad=True,
                           name="skip.bias")

    def parameters(self):
        return [self.weight, self.bias]

    def __call__(self, features: Tensor) -> Tensor:
        blocked = stop_gradient(features)
        out = nm.conv2d(blocked, self.weight)
        return out + nm.reshape(self.bias, (1, -1, 1, 1))


def reseed_dead_items(bank: MemoryBank, recent_queries, staleness_threshold: int):
    """Replace prototypes unused for `staleness_threshold` consecutive epochs
    with randomly chosen recent query vectors. Call once per epoch."""
    queries = np.asarray(recent_queries)
    if queries.ndim != 2 or queries.shape[0] == 0:
        raise ValueError("recent_queries must be a nonempty (count, depth) array")
    if queries.shape[1] != bank.depth:
        raise ValueError(f"query depth {queries.shape[1]} != bank depth "
                         f"{bank.depth}")

    dead = bank.usage_counts == 0
    bank.stale_epochs = np.where(dead, bank.stale_epochs + 1, 0)
    to_reseed = np.flatnonzero(bank.stale_epochs >= staleness_threshold)
    if to_reseed.size:
        picks = bank._rng.integers(0, queries.shape[0], size=to_reseed.size)
        items = bank.items.data.copy()
        items[:, to_reseed] = queries[picks].T
        bank.items.data = items
        bank.stale_epochs[to_reseed] = 0
    bank.reset_usage()
    return bank
