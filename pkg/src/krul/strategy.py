"""Greedy selection of cross-layer KV sharing pairs."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable

from .analysis import DistanceMatrix
from .errors import ConfigError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StrategyConfig:
    r_l: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.r_l <= 1.0:
            raise ConfigError(f"r_l must be in [0, 1], got {self.r_l}")


def layer_quota(n_layers: int, r_l: float) -> int:
    # round first so 0.3 * 10 does not ceil to 4
    return math.ceil(round(n_layers * r_l, 9))


@dataclass(frozen=True)
class CompressionStrategy:
    pairs: tuple[tuple[int, int], ...] = ()
    distances: tuple[float, ...] = ()
    exhausted: bool = False  # quota not reached because no disjoint pair was left

    @property
    def shared(self) -> frozenset[int]:
        return frozenset(l for p in self.pairs for l in p)

    def partner(self, layer: int):
        for i, j in self.pairs:
            if layer == i:
                return j
            if layer == j:
                return i
        return None

    def to_triples(self) -> list[list]:
        return [[i, j, d] for (i, j), d in zip(self.pairs, self.distances)]

    @classmethod
    def from_triples(cls, triples, exhausted: bool = False) -> "CompressionStrategy":
        triples = list(triples)
        return cls(
            tuple((int(i), int(j)) for i, j, _ in triples),
            tuple(float(d) for _, _, d in triples),
            exhausted,
        )


EMPTY = CompressionStrategy()


def select_strategy(
    D: DistanceMatrix, lir: Iterable[int], cfg: StrategyConfig, n_layers: int
) -> CompressionStrategy:
    """Accept disjoint I-R pairs in ascending distance until enough layers are shared."""
    lir = sorted(set(lir))
    quota = layer_quota(n_layers, cfg.r_l)
    if quota == 0:
        return EMPTY
    if len(lir) < 2:
        log.warning("fewer than two I-R layers; no layers can be shared")
        return CompressionStrategy(exhausted=True)

    candidates = sorted(
        (D.distance(i, j), i, j) for k, i in enumerate(lir) for j in lir[k + 1 :]
    )
    shared: set[int] = set()
    pairs, dists = [], []
    for d, i, j in candidates:
        if i in shared or j in shared:
            continue
        shared.update((i, j))
        pairs.append((i, j))
        dists.append(d)
        if len(shared) >= quota:
            break
    exhausted = len(shared) < quota
    if exhausted:
        log.warning("pairing exhausted at %d shared layers (quota %d)", len(shared), quota)
    return CompressionStrategy(tuple(pairs), tuple(dists), exhausted)


@dataclass(frozen=True)
class Violation:
    kind: str
    detail: str = ""
    where: tuple = field(default=())


def validate_strategy(
    strategy: CompressionStrategy, lir: Iterable[int], n_layers: int, r_l: float
) -> list[Violation]:
    lir = set(lir)
    out: list[Violation] = []
    seen: set[int] = set()
    for i, j in strategy.pairs:
        if not i < j:
            out.append(Violation("pair order", f"({i}, {j}) is not ordered i < j", (i, j)))
        if i == j:
            continue
        for l in (i, j):
            if l in seen:
                out.append(Violation("layer reuse", f"layer {l} appears in more than one pair", (l,)))
            seen.add(l)
            if l not in lir:
                out.append(Violation("non-I-R member", f"layer {l} is not an I-R layer", (l,)))
            if not 0 <= l < n_layers:
                out.append(Violation("layer range", f"layer {l} outside [0, {n_layers})", (l,)))
    if len(strategy.distances) != len(strategy.pairs):
        out.append(Violation("distances", "one distance per pair required"))
    elif any(b < a for a, b in zip(strategy.distances, strategy.distances[1:])):
        out.append(Violation("selection order", "pair distances decrease in selection order"))
    quota = layer_quota(n_layers, r_l)
    size = 2 * len(strategy.pairs)
    if size < quota and not strategy.exhausted:
        out.append(Violation("quota", f"{size} shared layers < quota {quota}"))
    if quota and size >= quota + 2:
        out.append(Violation("overshoot", f"{size} shared layers >= quota {quota} + 2"))
    if quota == 0 and size:
        out.append(Violation("overshoot", "r_l = 0 but layers are shared"))
    return out
