"""Recompute/load balancing, pipeline simulation and real restoration."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .engine import KVCacheLayer, Model, iter_prefix_recompute
from .errors import RestorationGapError, SnapshotError
from .kvstore import KVSnapshot, expand
from .plan import RestorationPlan, blob_layout, build_plan, validate_plan
from .strategy import EMPTY, CompressionStrategy

__all__ = [
    "CostModel",
    "CalibrationRow",
    "PipelineTrace",
    "Task",
    "RestorationPlan",
    "build_plan",
    "validate_plan",
    "calibration_table",
    "calibrate_rc",
    "simulate_pipeline",
    "simulated_ttft",
    "execute_restore",
    "rc_grid",
    "DEFAULT_GRID",
]


def rc_grid(step: float = 0.05) -> tuple[float, ...]:
    n = int(round(1.0 / step))
    return tuple(round(k / n, 10) for k in range(n + 1))


DEFAULT_GRID = rc_grid(0.05)


@dataclass(frozen=True)
class CostModel:
    """Analytic restoration costs.

    Recomputing p tokens that start at position ``start`` in one layer costs
    ``p * (8 d^2 + 4 ffn_mult d^2) + 4 d * sum(attention spans)`` flops; a
    stored blob of n positions costs ``2 * n * d * bytes_per_elem`` bytes.
    """

    f_peak: float
    b_peak: float
    d_model: int
    ffn_mult: float = 4.0
    bytes_per_elem: int = 4

    def layer_flops(self, n_tokens: int, start: int = 0) -> float:
        d = self.d_model
        span_sum = n_tokens * start + n_tokens * (n_tokens + 1) / 2
        return n_tokens * (8 * d * d + 4 * d * self.ffn_mult * d) + 4 * d * span_sum

    def blob_bytes(self, n_positions: int) -> int:
        return 2 * n_positions * self.d_model * self.bytes_per_elem

    def compute_time(self, flops: float) -> float:
        return flops / self.f_peak if flops else 0.0

    def load_time(self, nbytes: float) -> float:
        return nbytes / self.b_peak if nbytes else 0.0

    def recompute_flops(self, plan: RestorationPlan) -> float:
        return sum(self.layer_flops(r) for r in plan.recompute_len)

    def stored_bytes(self, plan: RestorationPlan, strategy: CompressionStrategy = EMPTY) -> int:
        return sum(self.blob_bytes(end - start) for _, (start, end) in blob_layout(plan, strategy))

    def restore_times(self, plan: RestorationPlan, strategy: CompressionStrategy = EMPTY) -> tuple[float, float]:
        """(T_C, T_L) for a plan; shared blobs are counted once."""
        return (
            self.compute_time(self.recompute_flops(plan)),
            self.load_time(self.stored_bytes(plan, strategy)),
        )

    def prefill_time(self, n_layers: int, n_new: int, history_len: int = 0) -> float:
        return self.compute_time(n_layers * self.layer_flops(n_new, history_len))

    @classmethod
    def with_ratio(
        cls,
        n_layers: int,
        history_len: int,
        d_model: int,
        ratio: float,
        *,
        ffn_mult: float = 4.0,
        b_peak: float = 25e9,
        bytes_per_elem: int = 4,
    ) -> "CostModel":
        """Pick f_peak so full recompute takes ``ratio`` times as long as a full load."""
        probe = cls(1.0, b_peak, d_model, ffn_mult, bytes_per_elem)
        flops = n_layers * probe.layer_flops(history_len)
        t_load = probe.load_time(n_layers * probe.blob_bytes(history_len))
        return cls(flops / (ratio * t_load), b_peak, d_model, ffn_mult, bytes_per_elem)


@dataclass(frozen=True)
class CalibrationRow:
    r_c: float
    t_compute: float
    t_load: float

    @property
    def gap(self) -> float:
        return abs(self.t_compute - self.t_load)


def calibration_table(
    cost: CostModel,
    N: int,
    L: int,
    strategy: CompressionStrategy = EMPTY,
    grid: Sequence[float] = DEFAULT_GRID,
    plan_builder=build_plan,
) -> list[CalibrationRow]:
    if not grid:
        raise ValueError("calibration grid is empty")
    rows = []
    for r_c in sorted(grid):
        if not 0.0 <= r_c <= 1.0:
            raise ValueError(f"grid value {r_c} outside [0, 1]")
        t_c, t_l = cost.restore_times(plan_builder(L, N, r_c, strategy), strategy)
        rows.append(CalibrationRow(r_c, t_c, t_l))
    return rows


def select_row(rows: Sequence[CalibrationRow]) -> CalibrationRow:
    best = rows[0]
    for row in rows[1:]:
        if row.gap < best.gap:  # strict: ties stay with the smaller r_c
            best = row
    return best


def calibrate_rc(
    cost: CostModel,
    N: int,
    L: int,
    strategy: CompressionStrategy = EMPTY,
    grid: Sequence[float] = DEFAULT_GRID,
) -> float:
    """Grid value of r_c minimising |T_C - T_L| for the pyramid plan."""
    return select_row(calibration_table(cost, N, L, strategy, grid)).r_c


# ---------------------------------------------------------------- simulation


@dataclass(frozen=True)
class Task:
    stream: str
    layer: int
    start: float
    end: float
    owners: tuple[int, ...] = ()

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass
class PipelineTrace:
    tasks: list[Task] = field(default_factory=list)

    def stream(self, name: str) -> list[Task]:
        return [t for t in self.tasks if t.stream == name]

    @property
    def makespan(self) -> float:
        return max((t.end for t in self.tasks), default=0.0)

    def busy(self, name: str) -> float:
        return sum(t.duration for t in self.stream(name))

    @property
    def bubble_fraction(self) -> dict[str, float]:
        """Idle time per stream while the restoration is still running, over the makespan."""
        m = self.makespan
        return {s: (m - self.busy(s)) / m if m > 0 else 0.0 for s in ("compute", "load")}

    def to_records(self) -> list[dict]:
        return [
            {"stream": t.stream, "layer": t.layer, "start": t.start, "end": t.end} for t in self.tasks
        ]

    def write_event_log(self, path: str, fmt: str = "json") -> None:
        records = self.to_records()
        with open(path, "w", newline="") as f:
            if fmt == "json":
                json.dump({"schema": "krul-trace/1", "events": records}, f, indent=1)
            else:
                w = csv.DictWriter(f, fieldnames=["stream", "layer", "start", "end"])
                w.writeheader()
                w.writerows(records)


def simulate_pipeline(
    plan: RestorationPlan, strategy: CompressionStrategy, cost: CostModel
) -> PipelineTrace:
    """Two-stream list schedule.

    The compute stream recomputes layers in order (layer l waits for layer
    l-1); the load stream fetches blobs in ascending owner order with no
    dependency on compute.  Zero-length work emits no task.
    """
    # (stream, layer, owners, duration, dependency index or None)
    jobs: list[tuple[str, int, tuple[int, ...], float, Optional[int]]] = []
    prev = None
    for l, r in enumerate(plan.recompute_len):
        if r > 0:
            jobs.append(("compute", l, (l,), cost.compute_time(cost.layer_flops(r)), prev))
            prev = len(jobs) - 1
    for owners, (start, end) in blob_layout(plan, strategy):
        if end > start:
            jobs.append(("load", max(owners), owners, cost.load_time(cost.blob_bytes(end - start)), None))

    free = {"compute": 0.0, "load": 0.0}
    finish: list[float] = []
    trace = PipelineTrace()
    for stream, layer, owners, dur, dep in jobs:
        start = max(free[stream], finish[dep] if dep is not None else 0.0)
        end = start + dur
        finish.append(end)
        free[stream] = end
        trace.tasks.append(Task(stream, layer, start, end, owners))
    return trace


def simulated_ttft(
    plan: Optional[RestorationPlan],
    strategy: CompressionStrategy,
    cost: CostModel,
    n_layers: int,
    n_new: int,
) -> float:
    """Restoration makespan plus prefill of ``n_new`` tokens over the history."""
    if plan is None:
        return cost.prefill_time(n_layers, n_new)
    return simulate_pipeline(plan, strategy, cost).makespan + cost.prefill_time(
        n_layers, n_new, plan.history_len
    )


# ---------------------------------------------------------------- real restore


def execute_restore(
    model: Model,
    tokens_history: Sequence[int],
    snapshot: KVSnapshot,
    executor: Optional[ThreadPoolExecutor] = None,
) -> list[KVCacheLayer]:
    """Rebuild the full per-layer KV of ``tokens_history``.

    The calling thread recomputes each layer's prefix while a loader task
    copies blob spans out of the snapshot in blob order; the two meet in a
    per-layer slot before concatenation.
    """
    if snapshot.config_hash != model.config.config_hash():
        raise SnapshotError("snapshot was written for a different model config")
    plan, L, N = snapshot.plan, snapshot.history_len, model.config.n_layers
    if len(tokens_history) != L:
        raise RestorationGapError(f"history has {len(tokens_history)} tokens, snapshot covers {L}")
    if snapshot.n_layers != N:
        raise RestorationGapError(f"snapshot has {snapshot.n_layers} layers, model has {N}")
    problems = validate_plan(plan, snapshot.strategy, snapshot=snapshot)
    if problems:
        raise RestorationGapError("; ".join(f"{v.kind}: {v.detail}" for v in problems))

    slots: list[Future] = [Future() for _ in range(N)]

    def load_all():
        for blob in snapshot.blobs:
            for l in sorted(blob.owners, reverse=True):
                try:
                    view = expand(snapshot, l)
                    slots[l].set_result(KVCacheLayer(view.keys.copy(), view.values.copy(), view.span))
                except Exception as exc:  # surfaced at the rendezvous
                    slots[l].set_exception(exc)

    own = executor is None
    pool = ThreadPoolExecutor(max_workers=1, thread_name_prefix="krul-load") if own else executor
    try:
        loader = pool.submit(load_all)
        restored = []
        for l, prefix, _ in iter_prefix_recompute(model, tokens_history, plan):
            loaded = slots[l].result()
            layer = KVCacheLayer.concat([prefix, loaded])
            if layer.span != (0, L):
                raise RestorationGapError(f"layer {l} restored span {layer.span}, expected (0, {L})")
            restored.append(layer)
        loader.result()
    finally:
        if own:
            pool.shutdown(wait=True)
    return restored
