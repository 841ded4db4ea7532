"""Per-layer recompute/load split of a conversation history.

Layer l recomputes positions ``[0, recompute_len[l])`` and loads
``[recompute_len[l], L)``.  Recompute lengths never grow with depth, so the
hidden prefix every layer needs has already been produced by the layer below.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

from .errors import PlanInvalidError
from .strategy import EMPTY, CompressionStrategy, Violation


def _round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


@dataclass(frozen=True)
class RestorationPlan:
    history_len: int
    recompute_len: tuple[int, ...]
    load_len: tuple[int, ...]

    @classmethod
    def from_recompute(cls, history_len: int, recompute_len) -> "RestorationPlan":
        rec = tuple(int(r) for r in recompute_len)
        return cls(history_len, rec, tuple(history_len - r for r in rec))

    @classmethod
    def uniform(cls, history_len: int, n_layers: int, r_c: float) -> "RestorationPlan":
        """Same split in every layer (the fixed-ratio baseline)."""
        return cls.from_recompute(history_len, [_round_half_up(r_c * history_len)] * n_layers)

    @property
    def n_layers(self) -> int:
        return len(self.recompute_len)

    @property
    def r_c_effective(self) -> float:
        total = self.n_layers * self.history_len
        return sum(self.recompute_len) / total if total else 0.0

    def load_span(self, layer: int) -> tuple[int, int]:
        return self.recompute_len[layer], self.history_len

    def to_dict(self) -> dict:
        return {
            "history_len": self.history_len,
            "recompute_len": list(self.recompute_len),
            "load_len": list(self.load_len),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RestorationPlan":
        return cls(d["history_len"], tuple(d["recompute_len"]), tuple(d["load_len"]))


def build_plan(
    L: int, N: int, r_c: float, strategy: Optional[CompressionStrategy] = None
) -> RestorationPlan:
    """Pyramid plan: recompute length ramps down linearly with depth.

    For r_c <= 0.5 the ramp runs from 2*r_c*L at layer 0 to 0 at the last
    layer; above 0.5 it runs from L down to (2*r_c - 1)*L.  Rounding is then
    repaired one token at a time on the deepest adjustable layers so the total
    recompute equals round(r_c * L * N).  ``strategy`` does not change the
    shape; it is accepted so callers can pass the pair set along uniformly.
    """
    if not 0.0 <= r_c <= 1.0:
        raise PlanInvalidError(f"r_c must be in [0, 1], got {r_c}")
    if N == 1:
        return RestorationPlan.from_recompute(L, [_round_half_up(r_c * L)])

    rec = []
    for l in range(N):
        if r_c <= 0.5:
            frac = 2.0 * r_c * (N - 1 - l) / (N - 1)
        else:
            frac = 1.0 - 2.0 * (1.0 - r_c) * l / (N - 1)
        rec.append(_round_half_up(L * min(max(frac, 0.0), 1.0)))
    for l in range(1, N):
        rec[l] = min(rec[l], rec[l - 1])

    target = _round_half_up(r_c * L * N)
    total = sum(rec)
    while total < target:
        l = next(l for l in reversed(range(N)) if rec[l] < L and (l == 0 or rec[l - 1] > rec[l]))
        rec[l] += 1
        total += 1
    while total > target:
        l = next(l for l in reversed(range(N)) if rec[l] > 0 and (l == N - 1 or rec[l + 1] < rec[l]))
        rec[l] -= 1
        total -= 1
    return RestorationPlan.from_recompute(L, rec)


def blob_layout(
    plan: RestorationPlan, strategy: CompressionStrategy = EMPTY
) -> list[tuple[tuple[int, ...], tuple[int, int]]]:
    """Stored blobs as ``(owners, span)`` in load order (ascending deepest owner).

    An unpaired layer stores its own load span; a pair stores one blob over
    the larger of its members' load spans.
    """
    L = plan.history_len
    paired = strategy.shared
    blobs = [((l,), (plan.recompute_len[l], L)) for l in range(plan.n_layers) if l not in paired]
    for i, j in strategy.pairs:
        lo, hi = min(i, j), max(i, j)
        start = min(plan.recompute_len[lo], plan.recompute_len[hi])
        blobs.append(((lo, hi), (start, L)))
    return sorted(blobs, key=lambda b: max(b[0]))


def validate_plan(
    plan: RestorationPlan,
    strategy: Optional[CompressionStrategy] = None,
    snapshot=None,
) -> list[Violation]:
    """Report monotonicity, per-layer totals and pair-span coverage problems.

    A ``monotonicity`` violation is the static form of a missing hidden-state
    prefix at restore time.  Coverage is checked against ``snapshot.blobs``
    when a snapshot is given, otherwise against the convention that a pair
    blob spans its deeper member's load span.
    """
    out: list[Violation] = []
    L, N = plan.history_len, plan.n_layers
    if len(plan.load_len) != N:
        out.append(Violation("length", f"{N} recompute entries vs {len(plan.load_len)} load entries"))
        return out
    for l, (r, g) in enumerate(zip(plan.recompute_len, plan.load_len)):
        if not 0 <= r <= L:
            out.append(Violation("range", f"layer {l}: recompute_len {r} outside [0, {L}]", (l,)))
        if r + g != L:
            out.append(Violation("totals", f"layer {l}: {r} + {g} != {L}", (l,)))
    for l in range(1, N):
        if plan.recompute_len[l] > plan.recompute_len[l - 1]:
            out.append(
                Violation(
                    "monotonicity",
                    f"layer {l} recomputes {plan.recompute_len[l]} tokens but layer {l - 1} "
                    f"only provides {plan.recompute_len[l - 1]} hidden states",
                    (l - 1, l),
                )
            )

    if snapshot is not None:
        blobs = [(b.owners, b.span) for b in snapshot.blobs]
    elif strategy is not None:
        blobs = []
        for i, j in strategy.pairs:
            if max(i, j) < N:
                deeper = max(i, j)
                blobs.append(((min(i, j), deeper), (plan.recompute_len[deeper], L)))
    else:
        blobs = []
    for owners, (start, end) in blobs:
        for l in owners:
            if not 0 <= l < N:
                out.append(Violation("coverage", f"blob owner {l} is not a model layer", (l,)))
                continue
            need = plan.load_span(l)
            if start > need[0] or end < need[1]:
                out.append(
                    Violation("coverage", f"blob {owners} span [{start}, {end}) misses layer {l} span {list(need)}", owners)
                )
    return out
