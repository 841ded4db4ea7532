"""Deterministic toy causal transformer.

Prefill, single-token decode, and truncated-prefix recomputation all run
through one forward core (`_forward`) that processes, per layer, a prefix of
positions ``[0, p_l)`` plus a contiguous tail ``[tail_start, n)``; the gap
``[p_l, tail_start)`` is supplied as preloaded KV.

Weights, activations, KV and attention weights are float32.  Contractions
accumulate in float64 and round back, so a row's result does not depend on
how many other rows share the matmul (prefill vs decode agree to ~1 ulp).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ConfigError, PlanInvalidError, RestorationGapError, StateCorruptionError

DTYPE = np.float32
_ROPE_BASE = 10000.0
RECENT_WINDOW = 4


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    head_dim: int = 8
    d_model: int = 32
    vocab_size: int = 64
    ffn_mult: float = 2.0
    seed: int = 0
    # Optional positional logit bonus on key 0 and the RECENT_WINDOW newest keys,
    # applied in layers >= n_layers // 4; gives the toy model I-R-style layers.
    ir_bias: float = 0.0

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "head_dim", "d_model", "vocab_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_layers < 2:
            raise ConfigError("n_layers must be >= 2")
        if self.d_model != self.n_heads * self.head_dim:
            raise ConfigError(
                f"d_model ({self.d_model}) != n_heads * head_dim ({self.n_heads * self.head_dim})"
            )
        if self.head_dim % 2:
            raise ConfigError("head_dim must be even for rotary position mixing")
        if not self.ffn_mult > 0:
            raise ConfigError("ffn_mult must be positive")
        if self.ir_bias < 0:
            raise ConfigError("ir_bias must be non-negative")

    @property
    def ir_bias_from(self) -> int:
        return self.n_layers // 4

    @property
    def ffn_dim(self) -> int:
        return max(1, int(round(self.ffn_mult * self.d_model)))

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(frozen=True)
class KVCacheLayer:
    keys: np.ndarray  # [n_heads, seq, head_dim]
    values: np.ndarray
    span: tuple[int, int]  # half-open absolute positions

    def __post_init__(self):
        if self.keys.shape != self.values.shape:
            raise StateCorruptionError(f"keys {self.keys.shape} != values {self.values.shape}")
        if self.span[1] - self.span[0] != self.keys.shape[1]:
            raise StateCorruptionError(f"span {self.span} does not match seq_len {self.keys.shape[1]}")

    @property
    def seq_len(self) -> int:
        return self.keys.shape[1]

    def slice(self, start: int, stop: int) -> "KVCacheLayer":
        """Sub-span by absolute positions."""
        a, b = start - self.span[0], stop - self.span[0]
        if a < 0 or b > self.seq_len or a > b:
            raise RestorationGapError(f"[{start}, {stop}) outside {self.span}")
        return KVCacheLayer(self.keys[:, a:b], self.values[:, a:b], (start, stop))

    @staticmethod
    def concat(parts: Sequence["KVCacheLayer"]) -> "KVCacheLayer":
        parts = [p for p in parts if p.seq_len > 0] or list(parts[:1])
        for prev, nxt in zip(parts, parts[1:]):
            if prev.span[1] != nxt.span[0]:
                raise RestorationGapError(f"spans {prev.span} and {nxt.span} are not contiguous")
        keys = np.concatenate([p.keys for p in parts], axis=1)
        values = np.concatenate([p.values for p in parts], axis=1)
        return KVCacheLayer(keys, values, (parts[0].span[0], parts[-1].span[1]))


@dataclass
class AttentionRecord:
    """Captured causal attention.

    ``prefill[l]`` has shape [n_heads, rows, width] where row r is query
    position ``query_start + r`` and width is the key count; for a plain
    prefill ``query_start == 0`` and the matrix is square.  ``decode`` holds one
    entry per decode step, each a per-layer list of [n_heads, 1, width] rows.
    """

    prefill: list[np.ndarray]
    query_start: int = 0
    decode: list[list[np.ndarray]] = field(default_factory=list)

    @property
    def n_layers(self) -> int:
        return len(self.prefill)

    @property
    def seq_len(self) -> int:
        return self.prefill[0].shape[-1]

    def append_decode(self, rows: list[np.ndarray]) -> None:
        self.decode.append(rows)


@dataclass(frozen=True)
class HiddenState:
    activations: np.ndarray  # [seq_len, d_model]
    layer_index: int
    span: tuple[int, int]


class Model:
    """Immutable weights plus the config they were drawn from."""

    def __init__(self, config: ModelConfig, weights: dict[str, np.ndarray]):
        self.config = config
        for w in weights.values():
            w.setflags(write=False)
        self.weights = weights
        self._wide = {k: w.astype(np.float64) for k, w in weights.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.weights[name]

    def wide(self, name: str) -> np.ndarray:
        return self._wide[name]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.weights):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.weights[name]).tobytes())
        return h.hexdigest()


def build_model(config: ModelConfig) -> Model:
    rng = np.random.Generator(np.random.PCG64(config.seed))
    d, f, v = config.d_model, config.ffn_dim, config.vocab_size
    bound = 1.0 / np.sqrt(d)

    def draw(*shape):
        return rng.uniform(-bound, bound, size=shape).astype(DTYPE)

    weights = {"embed": draw(v, d)}
    for l in range(config.n_layers):
        for name in ("wq", "wk", "wv", "wo"):
            weights[f"{l}.{name}"] = draw(d, d)
        weights[f"{l}.w1"] = draw(d, f)
        weights[f"{l}.b1"] = draw(f)
        weights[f"{l}.w2"] = draw(f, d)
        weights[f"{l}.b2"] = draw(d)
    weights["unembed"] = draw(d, v)
    return Model(config, weights)


# ---------------------------------------------------------------- numerics


def _rms_norm(x: np.ndarray) -> np.ndarray:
    w = x.astype(np.float64)
    return (w / np.sqrt(np.mean(w * w, axis=-1, keepdims=True) + 1e-6)).astype(DTYPE)


def _mm(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """float32 x float64 contraction, rounded to float32."""
    return (x.astype(np.float64) @ w).astype(DTYPE)


def _gelu(x: np.ndarray) -> np.ndarray:
    c = DTYPE(np.sqrt(2.0 / np.pi))
    return DTYPE(0.5) * x * (DTYPE(1.0) + np.tanh(c * (x + DTYPE(0.044715) * x * x * x)))


def _rope_tables(positions: np.ndarray, head_dim: int) -> tuple[np.ndarray, np.ndarray]:
    inv_freq = _ROPE_BASE ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = positions.astype(np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles).astype(DTYPE), np.sin(angles).astype(DTYPE)


def _rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    m, d = x.shape
    return x.reshape(m, n_heads, d // n_heads).transpose(1, 0, 2)


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    return e / e.sum(axis=-1, keepdims=True)  # float64 in, float64 out


# ---------------------------------------------------------------- forward core


@dataclass
class _LayerOut:
    prefix_kv: KVCacheLayer
    tail_kv: KVCacheLayer
    tail_attn: np.ndarray  # [H, T, tail_start + T]
    hidden_prefix: np.ndarray
    hidden_tail: np.ndarray


def _forward(
    model: Model,
    prefix_tokens: Sequence[int],
    prefix_lens: Sequence[int],
    tail_tokens: Sequence[int],
    tail_start: int,
    context: Optional[Sequence[Optional[KVCacheLayer]]] = None,
) -> Iterator[_LayerOut]:
    cfg = model.config
    H, hd = cfg.n_heads, cfg.head_dim
    T = len(tail_tokens)
    p0 = prefix_lens[0] if prefix_lens else 0
    emb = model["embed"]
    xp = emb[np.asarray(prefix_tokens[:p0], dtype=np.int64)]
    xt = emb[np.asarray(tail_tokens, dtype=np.int64)]
    scale = 1.0 / np.sqrt(hd)
    tail_pos = np.arange(tail_start, tail_start + T)

    for l in range(cfg.n_layers):
        p = prefix_lens[l]
        xp = xp[:p]
        x = np.concatenate([xp, xt], axis=0)
        pos = np.concatenate([np.arange(p), tail_pos])
        h = _rms_norm(x)
        cos, sin = _rope_tables(pos, hd)
        q = _rope(_split_heads(_mm(h, model.wide(f"{l}.wq")), H), cos, sin)
        k = _rope(_split_heads(_mm(h, model.wide(f"{l}.wk")), H), cos, sin)
        v = _split_heads(_mm(h, model.wide(f"{l}.wv")), H)

        prefix_kv = KVCacheLayer(k[:, :p], v[:, :p], (0, p))
        tail_kv = KVCacheLayer(k[:, p:], v[:, p:], (tail_start, tail_start + T))
        if T:
            ctx = context[l] if context is not None else None
            if ctx is None:
                if p != tail_start:
                    raise RestorationGapError(f"layer {l}: no KV for [{p}, {tail_start})")
                keys, vals = k, v
            else:
                if ctx.span != (p, tail_start):
                    raise RestorationGapError(
                        f"layer {l}: preloaded span {ctx.span} does not continue computed prefix [0, {p})"
                    )
                keys = np.concatenate([k[:, :p], ctx.keys, k[:, p:]], axis=1)
                vals = np.concatenate([v[:, :p], ctx.values, v[:, p:]], axis=1)
        else:
            keys, vals = k, v
        key_pos = np.arange(keys.shape[1])

        if x.shape[0]:
            scores = (q.astype(np.float64) @ keys.astype(np.float64).transpose(0, 2, 1)) * scale
            if cfg.ir_bias and l >= cfg.ir_bias_from:
                lag = pos[:, None] - key_pos[None, :]
                scores = scores + cfg.ir_bias * ((key_pos[None, :] == 0) + (lag < RECENT_WINDOW))
            scores = np.where(key_pos[None, None, :] > pos[None, :, None], -np.inf, scores)
            probs = _softmax_rows(scores)
            attn = (probs @ vals.astype(np.float64)).astype(DTYPE)
            attn = attn.transpose(1, 0, 2).reshape(x.shape[0], cfg.d_model)
            x = x + _mm(attn, model.wide(f"{l}.wo"))
            ff = _gelu(_mm(x, model.wide(f"{l}.w1")) + model[f"{l}.b1"])
            x = x + (_mm(ff, model.wide(f"{l}.w2")) + model[f"{l}.b2"])
            probs = probs.astype(DTYPE)
        else:
            probs = np.zeros((H, 0, keys.shape[1]), dtype=DTYPE)

        xp, xt = x[:p], x[p:]
        yield _LayerOut(prefix_kv, tail_kv, probs[:, p:, :], xp, xt)


def _logits(model: Model, hidden_row: np.ndarray) -> np.ndarray:
    return _mm(_rms_norm(hidden_row[None, :]), model.wide("unembed"))[0]


def _check_tokens(model: Model, tokens: Sequence[int]) -> None:
    if len(tokens) == 0:
        raise ValueError("token sequence must be non-empty")
    arr = np.asarray(tokens)
    if arr.min() < 0 or arr.max() >= model.config.vocab_size:
        raise ValueError("token id out of range")


# ---------------------------------------------------------------- public ops


def prefill(
    model: Model,
    tokens: Sequence[int],
    preloaded: Optional[Sequence[KVCacheLayer]] = None,
) -> tuple[np.ndarray, list[KVCacheLayer], AttentionRecord]:
    """Causal prefill; with ``preloaded`` only the gaps around it are computed.

    ``preloaded[l]`` must cover ``[p_l, P)`` for a common ``P < len(tokens)``
    with ``p_l`` non-increasing; layer l then recomputes ``[0, p_l)`` and every
    layer computes the new tail ``[P, n)``.  The attention record holds the
    tail rows only (``query_start == P``).
    """
    _check_tokens(model, tokens)
    n, N = len(tokens), model.config.n_layers
    if preloaded is None:
        prefix_lens, tail_start = [0] * N, 0
    else:
        if len(preloaded) != N:
            raise RestorationGapError(f"expected {N} preloaded layers, got {len(preloaded)}")
        ends = {kv.span[1] for kv in preloaded}
        if len(ends) != 1:
            raise RestorationGapError(f"preloaded spans end at different positions: {sorted(ends)}")
        tail_start = ends.pop()
        if tail_start >= n:
            raise RestorationGapError("preloaded history leaves no new tokens to prefill")
        prefix_lens = [kv.span[0] for kv in preloaded]
        for l in range(1, N):
            if prefix_lens[l] > prefix_lens[l - 1]:
                raise RestorationGapError(
                    f"layer {l} needs hidden states up to {prefix_lens[l]} but layer {l - 1} "
                    f"only computes {prefix_lens[l - 1]}"
                )

    kv, attn = [], []
    out = None
    for l, out in enumerate(
        _forward(model, tokens, prefix_lens, tokens[tail_start:], tail_start, preloaded)
    ):
        mid = [preloaded[l]] if preloaded is not None else []
        kv.append(KVCacheLayer.concat([out.prefix_kv, *mid, out.tail_kv]))
        attn.append(out.tail_attn)
    logits = _logits(model, out.hidden_tail[-1])
    return logits, kv, AttentionRecord(prefill=attn, query_start=tail_start)


def decode_step(
    model: Model, kv: Sequence[KVCacheLayer], last_token: int
) -> tuple[np.ndarray, list[KVCacheLayer], list[np.ndarray]]:
    _check_tokens(model, [last_token])
    if len(kv) != model.config.n_layers:
        raise StateCorruptionError(f"expected {model.config.n_layers} layers of KV, got {len(kv)}")
    spans = {layer.span for layer in kv}
    if len(spans) != 1 or next(iter(spans))[0] != 0:
        raise StateCorruptionError(f"ragged KV spans across layers: {sorted(spans)}")
    s = next(iter(spans))[1]
    N = model.config.n_layers

    new_kv, rows = [], []
    out = None
    for l, out in enumerate(_forward(model, [], [0] * N, [last_token], s, kv)):
        new_kv.append(KVCacheLayer.concat([kv[l], out.tail_kv]))
        rows.append(out.tail_attn)
    return _logits(model, out.hidden_tail[-1]), new_kv, rows


def _recompute_lens(plan) -> list[int]:
    return [int(r) for r in getattr(plan, "recompute_len", plan)]


def iter_prefix_recompute(model: Model, tokens: Sequence[int], plan) -> Iterator[tuple[int, KVCacheLayer, np.ndarray]]:
    """Yield ``(layer, kv_prefix, hidden_out)`` layer by layer; validates the plan first."""
    lens = _recompute_lens(plan)
    N = model.config.n_layers
    if len(lens) != N:
        raise PlanInvalidError(f"plan has {len(lens)} layers, model has {N}")
    if any(r < 0 for r in lens) or lens[0] > len(tokens):
        raise PlanInvalidError(f"recompute lengths {lens} outside [0, {len(tokens)}]")
    for l in range(1, N):
        if lens[l] > lens[l - 1]:
            raise PlanInvalidError(f"recompute_len increases at layer {l}: {lens[l - 1]} -> {lens[l]}")
    if lens[0] == 0:
        H, hd = model.config.n_heads, model.config.head_dim
        empty = np.zeros((H, 0, hd), dtype=DTYPE)
        for l in range(N):
            yield l, KVCacheLayer(empty, empty, (0, 0)), np.zeros((0, model.config.d_model), DTYPE)
        return
    _check_tokens(model, tokens[: lens[0]])
    for l, out in enumerate(_forward(model, tokens, lens, [], lens[0])):
        yield l, out.prefix_kv, out.hidden_prefix


def partial_prefix_recompute(
    model: Model, tokens: Sequence[int], plan
) -> tuple[list[KVCacheLayer], Optional[HiddenState]]:
    """KV for ``[0, recompute_len[l])`` per layer, feeding each layer a truncated hidden prefix.

    Returns the per-layer prefixes and the last layer's output hidden prefix
    (None when nothing was recomputed).
    """
    kv, hidden = [], None
    for l, prefix, h in iter_prefix_recompute(model, tokens, plan):
        kv.append(prefix)
        hidden = h
    if hidden is None or hidden.shape[0] == 0:
        return kv, None
    return kv, HiddenState(hidden, model.config.n_layers - 1, (0, hidden.shape[0]))


def greedy_generate(
    model: Model,
    kv: list[KVCacheLayer],
    logits: np.ndarray,
    steps: int,
    forced: Optional[Sequence[int]] = None,
    on_rows=None,
) -> tuple[list[int], list[KVCacheLayer], list[np.ndarray]]:
    """Run ``steps`` decode steps starting from ``logits``.

    Each produced token is fed back (or ``forced[i]`` when teacher forcing).
    Returns the emitted tokens, final KV and the logits seen before each step.
    ``on_rows`` receives each step's per-layer attention rows.
    """
    tokens, seen = [], []
    for i in range(steps):
        seen.append(logits)
        tok = int(forced[i]) if forced is not None else int(np.argmax(logits))
        tokens.append(tok)
        logits, kv, rows = decode_step(model, kv, tok)
        if on_rows is not None:
            on_rows(rows)
    return tokens, kv, seen
