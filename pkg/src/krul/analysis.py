"""Layer classification and streamed attention-distance estimation.

A layer is I-R (initial/recent) when, averaged over heads and query rows, at
least ``gamma`` of its attention mass lands on the first and last ~10% of
tokens.  Distances between I-R layers are accumulated as per-head sums of
squared differences: the prefill block is folded once (optionally on a
background worker), decode rows are folded one step at a time and dropped.
"""

from __future__ import annotations

import math
import threading
from concurrent.futures import Executor, Future
from dataclasses import dataclass
from itertools import combinations
from typing import Iterable, Optional, Sequence

import numpy as np

from .engine import AttentionRecord
from .errors import AccountingError, ClassificationError, ConfigError, StateCorruptionError

MIN_SEQ_LEN = 10


@dataclass(frozen=True)
class ClassifierConfig:
    gamma: float = 0.5
    initial_frac: float = 0.10
    recent_frac: float = 0.10

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.initial_frac < 0 or self.recent_frac < 0:
            raise ConfigError("region fractions must be non-negative")
        if self.initial_frac + self.recent_frac >= 1.0:
            raise ConfigError("initial_frac + recent_frac must be < 1")


def region_bounds(seq_len: int, cfg: ClassifierConfig) -> tuple[int, int]:
    """(end of initial region, start of recent region); each holds >= 1 token."""
    init_end = max(1, math.floor(cfg.initial_frac * seq_len))
    recent_start = seq_len - max(1, math.floor(cfg.recent_frac * seq_len))
    return init_end, recent_start


@dataclass(frozen=True)
class LayerClassReport:
    ir_layers: tuple[int, ...]
    non_ir_layers: tuple[int, ...]
    avg_weight_sum: tuple[float, ...]
    gamma: float

    def to_dict(self) -> dict:
        return {
            "ir_layers": list(self.ir_layers),
            "non_ir_layers": list(self.non_ir_layers),
            "avg_weight_sum": list(self.avg_weight_sum),
            "gamma": self.gamma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerClassReport":
        return cls(
            tuple(d["ir_layers"]), tuple(d["non_ir_layers"]), tuple(d["avg_weight_sum"]), d["gamma"]
        )


def _prefill_blocks(attn) -> list[np.ndarray]:
    return list(attn.prefill) if isinstance(attn, AttentionRecord) else list(attn)


def classify_layers(attn, cfg: ClassifierConfig = ClassifierConfig()) -> LayerClassReport:
    """Split layers into I-R and non-I-R from the prefill attention.

    ``attn`` is an AttentionRecord or a per-layer list of [heads, rows, seq]
    arrays.  Region boundaries are taken over the key axis.
    """
    blocks = _prefill_blocks(attn)
    if not blocks:
        raise ClassificationError("no attention to classify")
    seq_len = blocks[0].shape[-1]
    if seq_len < MIN_SEQ_LEN:
        raise ClassificationError(f"seq_len {seq_len} < {MIN_SEQ_LEN}: regions cannot be formed")
    init_end, recent_start = region_bounds(seq_len, cfg)

    sums, ir, non_ir = [], [], []
    for layer, a in enumerate(blocks):
        heads, rows = a.shape[0], a.shape[1]
        a = a.astype(np.float64)
        mass = a[..., :init_end].sum() + a[..., max(recent_start, init_end):].sum()
        avg = float(mass / (heads * rows))
        sums.append(avg)
        (non_ir if avg < cfg.gamma else ir).append(layer)
    return LayerClassReport(tuple(ir), tuple(non_ir), tuple(sums), cfg.gamma)


def stable_squared_distance(a, b) -> float:
    """Squared Euclidean distance as |a|^2 + |b|^2 - 2ab, clamped at zero."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    return max(0.0, float(a @ a + b @ b - 2.0 * (a @ b)))


@dataclass(frozen=True)
class DistanceMatrix:
    layers: tuple[int, ...]
    values: np.ndarray  # [k, k] over ``layers``

    def distance(self, i: int, j: int) -> float:
        return float(self.values[self.layers.index(i), self.layers.index(j)])

    def pairs(self) -> list[tuple[int, int, float]]:
        return [(i, j, self.distance(i, j)) for i, j in combinations(self.layers, 2)]

    def to_triples(self) -> list[list]:
        return [[i, j, d] for i, j, d in self.pairs()]

    @classmethod
    def from_triples(cls, layers: Iterable[int], triples) -> "DistanceMatrix":
        layers = tuple(sorted(layers))
        idx = {l: k for k, l in enumerate(layers)}
        values = np.zeros((len(layers), len(layers)))
        for i, j, d in triples:
            values[idx[i], idx[j]] = values[idx[j], idx[i]] = d
        return cls(layers, values)


class SimilarityAccumulator:
    """Running per-head squared differences for every pair of tracked layers.

    Folds from one background prefill worker and the inline decode loop may
    interleave; all updates are additions under a lock.  ``finalize`` waits
    for outstanding background folds.
    """

    def __init__(self, layers: Iterable[int], n_heads: int):
        self.layers = tuple(sorted(set(layers)))
        self.n_heads = n_heads
        self.pairs = list(combinations(self.layers, 2))
        self._pair_index = {p: k for k, p in enumerate(self.pairs)}
        self._sums = np.zeros((len(self.pairs), n_heads))
        self._lock = threading.Lock()
        self._pending: list[Future] = []
        self._prefill_claimed = False
        self.prefill_rows = 0
        self.decode_rows = 0
        # instrumentation: decode rows referenced by the accumulator right now / at peak
        self.retained_rows = 0
        self.peak_retained_rows = 0

    @property
    def rows_seen(self) -> int:
        return self.prefill_rows + self.decode_rows

    def head_sums(self, i: int, j: int) -> np.ndarray:
        with self._lock:
            return self._sums[self._pair_index[(min(i, j), max(i, j))]].copy()

    def _claim_prefill(self) -> None:
        with self._lock:
            if self._prefill_claimed:
                raise AccountingError("prefill attention already folded")
            self._prefill_claimed = True

    def fold_prefill(self, attn) -> "SimilarityAccumulator":
        self._claim_prefill()
        self._fold_prefill(_prefill_blocks(attn))
        return self

    def fold_prefill_async(self, attn, executor: Executor) -> Future:
        self._claim_prefill()
        blocks = _prefill_blocks(attn)
        fut = executor.submit(self._fold_prefill, blocks)
        self._pending.append(fut)
        return fut

    def _fold_prefill(self, blocks: list[np.ndarray]) -> None:
        shapes = {blocks[l].shape for l in self.layers}
        if len(shapes) > 1:
            raise StateCorruptionError(f"prefill attention shapes differ across layers: {shapes}")
        flat = {l: blocks[l].astype(np.float64).reshape(blocks[l].shape[0], -1) for l in self.layers}
        norms = {l: np.einsum("hk,hk->h", f, f) for l, f in flat.items()}
        delta = np.zeros_like(self._sums)
        for k, (i, j) in enumerate(self.pairs):
            cross = np.einsum("hk,hk->h", flat[i], flat[j])
            delta[k] = np.maximum(norms[i] + norms[j] - 2.0 * cross, 0.0)
        rows = blocks[self.layers[0]].shape[1] if self.layers else 0
        with self._lock:
            self._sums += delta
            self.prefill_rows += rows

    def fold_decode_step(self, rows: Sequence[np.ndarray]) -> "SimilarityAccumulator":
        """Fold one decode step; ``rows[l]`` is layer l's [heads, 1, width] row."""
        widths = {rows[l].shape for l in self.layers}
        if len(widths) > 1:
            raise StateCorruptionError(f"decode rows differ in shape across layers: {widths}")
        self.retained_rows = len(self.layers)
        self.peak_retained_rows = max(self.peak_retained_rows, self.retained_rows)
        flat = {l: rows[l].astype(np.float64).reshape(rows[l].shape[0], -1) for l in self.layers}
        delta = np.zeros_like(self._sums)
        for k, (i, j) in enumerate(self.pairs):
            diff = flat[i] - flat[j]
            delta[k] = np.einsum("hk,hk->h", diff, diff)
        del flat
        self.retained_rows = 0
        with self._lock:
            self._sums += delta
            self.decode_rows += 1
        return self

    def wait(self) -> None:
        pending, self._pending = self._pending, []
        for fut in pending:
            fut.result()

    def finalize(self) -> DistanceMatrix:
        self.wait()
        if not self._prefill_claimed:
            raise AccountingError("finalize before the prefill attention was folded")
        with self._lock:
            per_pair = np.sqrt(self._sums).mean(axis=1) if self.n_heads else np.zeros(len(self.pairs))
        k = len(self.layers)
        values = np.zeros((k, k))
        for (i, j), d in zip(self.pairs, per_pair):
            a, b = self.layers.index(i), self.layers.index(j)
            values[a, b] = values[b, a] = d
        return DistanceMatrix(self.layers, values)


def fold_prefill(acc: SimilarityAccumulator, attn) -> SimilarityAccumulator:
    return acc.fold_prefill(attn)


def fold_decode_step(acc: SimilarityAccumulator, rows) -> SimilarityAccumulator:
    return acc.fold_decode_step(rows)


def finalize(acc: SimilarityAccumulator) -> DistanceMatrix:
    return acc.finalize()


def estimate_distances(
    record: AttentionRecord,
    layers: Iterable[int],
    executor: Optional[Executor] = None,
) -> DistanceMatrix:
    """Run a whole record through an accumulator (prefill in the background if an executor is given)."""
    acc = SimilarityAccumulator(layers, record.prefill[0].shape[0])
    if executor is not None:
        acc.fold_prefill_async(record, executor)
    else:
        acc.fold_prefill(record)
    for rows in record.decode:
        acc.fold_decode_step(rows)
    return acc.finalize()
