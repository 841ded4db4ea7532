"""Synthetic multi-turn workloads and the restoration benchmark."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .analysis import ClassifierConfig, SimilarityAccumulator, classify_layers
from .engine import Model, ModelConfig, build_model, greedy_generate, prefill
from .errors import ClassificationError, ConfigError
from .kvstore import KVSnapshot, MergeMode, compress_and_snapshot
from .plan import RestorationPlan, build_plan
from .scheduler import CostModel, calibrate_rc, execute_restore, rc_grid, simulated_ttft
from .strategy import EMPTY, CompressionStrategy, StrategyConfig, select_strategy

REPORT_SCHEMA = "krul-bench/1"
METHODS = ("full-recompute", "full-load", "fixed-ratio", "fixed-compression", "krul")


@dataclass(frozen=True)
class WorkloadSpec:
    turns: int = 3
    input_len: int = 16
    ratio: float = 6.56  # model-output length / user-input length
    output_len: Optional[int] = None  # overrides ratio when set
    jitter: float = 0.0  # user-input lengths drawn from input_len * [1 - jitter, 1 + jitter]
    seed: int = 0

    def __post_init__(self):
        if self.turns < 1 or self.input_len < 1:
            raise ConfigError("turns and input_len must be >= 1")
        if not self.ratio > 0:
            raise ConfigError("ratio must be > 0")
        if self.output_len is not None and self.output_len < 1:
            raise ConfigError("output_len must be >= 1")
        if not 0 <= self.jitter < 1:
            raise ConfigError("jitter must be in [0, 1)")


@dataclass(frozen=True)
class Turn:
    user: tuple[int, ...]
    output_len: int


def gen_workload(workload: WorkloadSpec, vocab_size: int) -> list[Turn]:
    rng = np.random.default_rng(workload.seed)
    turns = []
    for _ in range(workload.turns):
        n = workload.input_len
        if workload.jitter:
            lo = max(1, math.floor(n * (1 - workload.jitter)))
            hi = max(lo, math.ceil(n * (1 + workload.jitter)))
            n = int(rng.integers(lo, hi + 1))
        out = workload.output_len if workload.output_len is not None else max(1, round(workload.ratio * n))
        turns.append(Turn(tuple(int(t) for t in rng.integers(0, vocab_size, n)), out))
    return turns


@dataclass(frozen=True)
class BenchConfig:
    model: ModelConfig = ModelConfig(n_layers=8, n_heads=4, head_dim=8, d_model=32, ir_bias=6.0)
    workload: WorkloadSpec = WorkloadSpec()
    classifier: ClassifierConfig = ClassifierConfig(gamma=0.4)
    strategy: StrategyConfig = StrategyConfig(r_l=0.5)
    merge_mode: MergeMode = MergeMode.MEAN
    rc_grid_step: float = 0.005
    fixed_rc: float = 0.5
    compute_load_ratio: float = 2.0 / 1.35
    b_peak: float = 25e9
    f_peak: Optional[float] = None  # explicit value disables compute_load_ratio
    cost_ref_len: int = 512
    methods: tuple[str, ...] = METHODS
    wall_clock: bool = False

    def cost_model(self) -> CostModel:
        m = self.model
        if self.f_peak is not None:
            return CostModel(self.f_peak, self.b_peak, m.d_model, m.ffn_mult)
        return CostModel.with_ratio(
            m.n_layers, self.cost_ref_len, m.d_model, self.compute_load_ratio,
            ffn_mult=m.ffn_mult, b_peak=self.b_peak,
        )

    # flat key/value form used by config files
    _SECTIONS = {
        "model": {f.name: f.name for f in fields(ModelConfig)} | {"seed": "model_seed"},
        "workload": {f.name: f.name for f in fields(WorkloadSpec)} | {"seed": "workload_seed"},
        "classifier": {f.name: f.name for f in fields(ClassifierConfig)},
        "strategy": {"r_l": "r_l"},
    }

    def to_flat(self) -> dict:
        flat = {}
        for section, keys in self._SECTIONS.items():
            obj = getattr(self, section)
            for attr, key in keys.items():
                flat[key] = getattr(obj, attr)
        for f in fields(self):
            if f.name not in self._SECTIONS:
                flat[f.name] = getattr(self, f.name)
        flat["merge_mode"] = self.merge_mode.value
        flat["methods"] = list(self.methods)
        return flat

    @classmethod
    def from_flat(cls, flat: dict) -> "BenchConfig":
        flat = dict(flat)
        derive_d_model = "d_model" not in flat
        kwargs = {}
        base = cls()
        for section, keys in cls._SECTIONS.items():
            sub = {attr: _coerce(flat.pop(key)) for attr, key in keys.items() if key in flat}
            kwargs[section] = replace(getattr(base, section), **sub) if sub else getattr(base, section)
        if derive_d_model:
            m = kwargs["model"]
            kwargs["model"] = replace(m, d_model=m.n_heads * m.head_dim)
        for key, value in flat.items():
            if key not in {f.name for f in fields(cls)}:
                raise ConfigError(f"unknown config key {key!r}")
            value = _coerce(value)
            if key == "merge_mode":
                value = MergeMode(value)
            elif key == "methods":
                value = tuple(value.split(",") if isinstance(value, str) else value)
                bad = set(value) - set(METHODS)
                if bad:
                    raise ConfigError(f"unsupported method(s): {sorted(bad)}")
            kwargs[key] = value
        return cls(**kwargs)


def _coerce(value):
    if isinstance(value, str):
        low = value.strip().lower()
        if low in ("inf", "+inf", "infinity"):
            return float("inf")
        if low in ("true", "false"):
            return low == "true"
        try:
            return int(value)
        except ValueError:
            try:
                return float(value)
            except ValueError:
                return value
    return value


# ---------------------------------------------------------------- reference


@dataclass
class _RefTurn:
    history: list[int]
    user: list[int]
    generated: list[int]
    logits: list[np.ndarray]


def _reference_run(model: Model, turns: Sequence[Turn]) -> list[_RefTurn]:
    hist: list[int] = []
    out = []
    for turn in turns:
        tokens = hist + list(turn.user)
        logits, kv, _ = prefill(model, tokens)
        gen, kv, seen = greedy_generate(model, kv, logits, turn.output_len)
        out.append(_RefTurn(hist, list(turn.user), gen, seen))
        hist = tokens + gen
    return out


# ---------------------------------------------------------------- methods


@dataclass
class MethodResult:
    method: str
    simulated_ttft_s: float
    restore_wall_s: Optional[float]
    stored_bytes: float
    full_bytes: float
    max_logit_divergence: float
    token_agreement: float
    restorations: int
    ttft_speedup_vs_recompute: float = 1.0
    storage_reduction: Optional[float] = None
    turns: list[dict] = field(default_factory=list)


def _fixed_pairs(n_layers: int) -> CompressionStrategy:
    """Adjacent pairs over the deeper half of the model."""
    start = n_layers // 2
    pairs = tuple((l, l + 1) for l in range(start, n_layers - 1, 2))
    return CompressionStrategy(pairs, tuple(0.0 for _ in pairs))


class _Policy:
    """End-of-turn snapshot policy for one method."""

    def __init__(self, method: str, cfg: BenchConfig, cost: CostModel):
        self.method, self.cfg, self.cost = method, cfg, cost
        self.N = cfg.model.n_layers
        self.acc: Optional[SimilarityAccumulator] = None
        self.report = None

    def on_prefill(self, attn, executor) -> None:
        if self.method != "krul":
            return
        try:
            self.report = classify_layers(attn, self.cfg.classifier)
            ir = self.report.ir_layers
        except ClassificationError:
            self.report, ir = None, ()
        self.acc = SimilarityAccumulator(ir, self.cfg.model.n_heads)
        self.acc.fold_prefill_async(attn, executor)

    def on_rows(self, rows) -> None:
        if self.acc is not None:
            self.acc.fold_decode_step(rows)

    def decide(self, L: int) -> tuple[Optional[RestorationPlan], CompressionStrategy, dict]:
        N, cfg = self.N, self.cfg
        if self.method == "full-recompute":
            return None, EMPTY, {}
        if self.method == "full-load":
            return RestorationPlan.uniform(L, N, 0.0), EMPTY, {}
        if self.method == "fixed-ratio":
            return RestorationPlan.uniform(L, N, cfg.fixed_rc), EMPTY, {}
        if self.method == "fixed-compression":
            return RestorationPlan.uniform(L, N, 0.0), _fixed_pairs(N), {}
        D = self.acc.finalize()
        strategy = select_strategy(D, self.acc.layers, cfg.strategy, N)
        r_c = calibrate_rc(self.cost, N, L, strategy, rc_grid(cfg.rc_grid_step))
        extra = {"distances": D, "r_c": r_c, "ir_layers": list(self.acc.layers)}
        self.acc = None
        return build_plan(L, N, r_c, strategy), strategy, extra


def _run_method(
    method: str,
    model: Model,
    ref: list[_RefTurn],
    cfg: BenchConfig,
    cost: CostModel,
    on_snapshot: Optional[Callable[[int, KVSnapshot], None]] = None,
) -> MethodResult:
    N = model.config.n_layers
    policy = _Policy(method, cfg, cost)
    snapshot: Optional[KVSnapshot] = None
    ttfts, walls, stored, full, per_turn = [], [], [], [], []
    max_div, agree, total = 0.0, 0, 0
    restorations = 0

    with ThreadPoolExecutor(max_workers=1, thread_name_prefix="krul-prefill-fold") as pool:
        for k, rt in enumerate(ref):
            hist, tokens = rt.history, rt.history + rt.user
            t0 = time.perf_counter()
            if snapshot is None:
                logits, kv, attn = prefill(model, tokens)
                ttft = cost.prefill_time(N, len(tokens))
            else:
                restored = execute_restore(model, hist, snapshot)
                logits, kv, attn = prefill(model, tokens, preloaded=restored)
                ttft = simulated_ttft(snapshot.plan, snapshot.strategy, cost, N, len(rt.user))
                restorations += 1
            walls.append(time.perf_counter() - t0)
            ttfts.append(ttft)

            policy.on_prefill(attn, pool)
            _, kv, seen = greedy_generate(model, kv, logits, len(rt.generated), forced=rt.generated, on_rows=policy.on_rows)
            for mine, theirs in zip(seen, rt.logits):
                max_div = max(max_div, float(np.abs(mine - theirs).max()))
                agree += int(np.argmax(mine) == np.argmax(theirs))
                total += 1

            L = len(tokens) + len(rt.generated)
            plan, strategy, extra = policy.decide(L)
            row = {"turn": k, "history_len": L, "simulated_ttft_s": ttft}
            if plan is None:
                snapshot = None
                stored.append(0)
                full.append(N * L * 2 * model.config.d_model * 4)
            else:
                snapshot = compress_and_snapshot(
                    kv, strategy, plan, cfg.merge_mode, config=model.config,
                    conversation_id=f"bench-{method}", report=policy.report, distances=extra.get("distances"),
                )
                if on_snapshot is not None:
                    on_snapshot(k, snapshot)
                rep = snapshot.storage_report()
                stored.append(rep.stored_bytes)
                full.append(rep.full_bytes)
                row.update(r_c=plan.r_c_effective, pairs=[list(p) for p in strategy.pairs], stored_bytes=rep.stored_bytes)
                if "ir_layers" in extra:
                    row["ir_layers"] = extra["ir_layers"]
            per_turn.append(row)
            if method == "full-recompute":
                snapshot = None

    mean_stored = float(np.mean(stored))
    mean_full = float(np.mean(full))
    return MethodResult(
        method=method,
        simulated_ttft_s=float(np.mean(ttfts)),
        restore_wall_s=float(np.mean(walls)) if cfg.wall_clock else None,
        stored_bytes=mean_stored,
        full_bytes=mean_full,
        max_logit_divergence=max_div,
        token_agreement=agree / total if total else 1.0,
        restorations=restorations,
        storage_reduction=(mean_full / mean_stored) if mean_stored else None,
        turns=per_turn,
    )


@dataclass
class BenchReport:
    config: dict
    results: list[MethodResult]
    schema: str = REPORT_SCHEMA

    def result(self, method: str) -> MethodResult:
        return next(r for r in self.results if r.method == method)

    CSV_COLUMNS = (
        "method", "simulated_ttft_s", "ttft_speedup_vs_recompute", "restore_wall_s", "stored_bytes",
        "full_bytes", "storage_reduction", "max_logit_divergence", "token_agreement", "restorations",
    )

    def to_json(self) -> str:
        payload = {
            "schema": self.schema,
            "config": self.config,
            "results": [asdict(r) for r in self.results],
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_COLUMNS)
        for r in self.results:
            w.writerow([_cell(getattr(r, c)) for c in self.CSV_COLUMNS])
        return buf.getvalue()


def _cell(value) -> str:
    if value is None:
        return ""
    return repr(value) if isinstance(value, float) else str(value)


def run_conversation(
    cfg: BenchConfig,
    method: str = "krul",
    on_snapshot: Optional[Callable[[int, KVSnapshot], None]] = None,
) -> MethodResult:
    """Run one method over the configured workload; ``on_snapshot(turn, snap)`` sees each saved state."""
    if method not in METHODS:
        raise ConfigError(f"unsupported method {method!r}")
    model = build_model(cfg.model)
    ref = _reference_run(model, gen_workload(cfg.workload, cfg.model.vocab_size))
    return _run_method(method, model, ref, cfg, cfg.cost_model(), on_snapshot)


def run_bench(cfg: BenchConfig, methods: Optional[Sequence[str]] = None) -> BenchReport:
    methods = tuple(methods or cfg.methods)
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ConfigError(f"unsupported method(s): {bad}")
    model = build_model(cfg.model)
    turns = gen_workload(cfg.workload, cfg.model.vocab_size)
    ref = _reference_run(model, turns)
    cost = cfg.cost_model()
    results = [_run_method(m, model, ref, cfg, cost) for m in methods]
    base = next((r.simulated_ttft_s for r in results if r.method == "full-recompute"), None)
    if base is None:
        base = _run_method("full-recompute", model, ref, cfg, cost).simulated_ttft_s
    for r in results:
        r.ttft_speedup_vs_recompute = base / r.simulated_ttft_s if r.simulated_ttft_s else float("nan")
    return BenchReport(config=cfg.to_flat(), results=results)
