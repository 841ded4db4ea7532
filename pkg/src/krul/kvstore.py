"""Compressed KV snapshots of inactive conversations.

Container layout (all integers little-endian)::

    b"KRUL" | u32 version | 32-byte config hash
    | u32 metadata length | metadata (UTF-8 JSON, sorted keys)
    | u32 blob count | per blob: u64 byte length, keys then values as <f4
    | 32-byte SHA-256 of everything above
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from dataclasses import dataclass
from enum import Enum
from typing import BinaryIO, Optional, Sequence, Union

import numpy as np

from .analysis import DistanceMatrix, LayerClassReport
from .engine import DTYPE, KVCacheLayer, ModelConfig
from .errors import LoadError, RestorationGapError, SnapshotError
from .plan import RestorationPlan, blob_layout, validate_plan
from .strategy import CompressionStrategy

MAGIC = b"KRUL"
FORMAT_VERSION = 1
_DIGEST = 32


class MergeMode(str, Enum):
    MEAN = "mean"
    KEEP_DEEPER = "keep-deeper"


@dataclass(frozen=True)
class Blob:
    owners: tuple[int, ...]
    span: tuple[int, int]
    keys: np.ndarray  # [n_heads, span_len, head_dim]
    values: np.ndarray

    @property
    def nbytes(self) -> int:
        return self.keys.nbytes + self.values.nbytes


@dataclass(frozen=True)
class StorageReport:
    full_bytes: int
    stored_bytes: int

    @property
    def reduction(self) -> float:
        return self.full_bytes / self.stored_bytes if self.stored_bytes else float("inf")

    def to_dict(self) -> dict:
        return {"full_bytes": self.full_bytes, "stored_bytes": self.stored_bytes, "reduction": self.reduction}


@dataclass(frozen=True)
class KVSnapshot:
    conversation_id: str
    config_hash: str
    history_len: int
    n_layers: int
    n_heads: int
    head_dim: int
    mode: MergeMode
    strategy: CompressionStrategy
    plan: RestorationPlan
    blobs: tuple[Blob, ...]
    report: Optional[LayerClassReport] = None
    distances: Optional[DistanceMatrix] = None
    format_version: int = FORMAT_VERSION

    def blob_for(self, layer: int) -> Blob:
        for b in self.blobs:
            if layer in b.owners:
                return b
        raise RestorationGapError(f"layer {layer} is not covered by the snapshot")

    def storage_report(self) -> StorageReport:
        full = self.n_layers * self.history_len * 2 * self.n_heads * self.head_dim * np.dtype(DTYPE).itemsize
        return StorageReport(full, sum(b.nbytes for b in self.blobs))

    def metadata(self) -> dict:
        return {
            "conversation_id": self.conversation_id,
            "history_len": self.history_len,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "head_dim": self.head_dim,
            "mode": self.mode.value,
            "strategy": {"pairs": self.strategy.to_triples(), "exhausted": self.strategy.exhausted},
            "plan": self.plan.to_dict(),
            "report": self.report.to_dict() if self.report else None,
            "distances": (
                {"layers": list(self.distances.layers), "pairs": self.distances.to_triples()}
                if self.distances is not None
                else None
            ),
            "blobs": [{"owners": list(b.owners), "span": list(b.span)} for b in self.blobs],
        }


def _config_hash(config: Union[ModelConfig, str]) -> str:
    return config if isinstance(config, str) else config.config_hash()


def compress_and_snapshot(
    kv: Sequence[KVCacheLayer],
    strategy: CompressionStrategy,
    plan: RestorationPlan,
    mode: MergeMode = MergeMode.MEAN,
    *,
    config: Union[ModelConfig, str],
    conversation_id: str = "",
    report: Optional[LayerClassReport] = None,
    distances: Optional[DistanceMatrix] = None,
) -> KVSnapshot:
    """Keep each layer's load span; store each pair once, merged per ``mode``."""
    mode = MergeMode(mode)
    N, L = len(kv), plan.history_len
    if plan.n_layers != N:
        raise SnapshotError(f"plan covers {plan.n_layers} layers, KV has {N}")
    for l, layer in enumerate(kv):
        if layer.span != (0, L):
            raise SnapshotError(f"layer {l} KV spans {layer.span}, expected (0, {L})")
    for i, j in strategy.pairs:
        if not (0 <= i < N and 0 <= j < N) or i == j:
            raise SnapshotError(f"pair ({i}, {j}) has a member outside the model's {N} layers")
    problems = validate_plan(plan, strategy)
    if problems:
        raise SnapshotError("; ".join(f"{v.kind}: {v.detail}" for v in problems))

    blobs = []
    for owners, (start, end) in blob_layout(plan, strategy):
        if len(owners) == 1:
            src = kv[owners[0]]
            k, v = src.keys[:, start:end], src.values[:, start:end]
        else:
            shallow, deep = owners
            k = kv[deep].keys[:, start:end].copy()
            v = kv[deep].values[:, start:end].copy()
            if mode is MergeMode.MEAN:
                lo = plan.recompute_len[shallow] - start  # overlap with the shallow member's span
                k[:, lo:] = (k[:, lo:] + kv[shallow].keys[:, start + lo : end]) * DTYPE(0.5)
                v[:, lo:] = (v[:, lo:] + kv[shallow].values[:, start + lo : end]) * DTYPE(0.5)
        blobs.append(
            Blob(owners, (start, end), np.ascontiguousarray(k, DTYPE), np.ascontiguousarray(v, DTYPE))
        )
    H, _, hd = kv[0].keys.shape
    return KVSnapshot(
        conversation_id=conversation_id,
        config_hash=_config_hash(config),
        history_len=L,
        n_layers=N,
        n_heads=H,
        head_dim=hd,
        mode=mode,
        strategy=strategy,
        plan=plan,
        blobs=tuple(blobs),
        report=report,
        distances=distances,
    )


def expand(snapshot: KVSnapshot, layer: int) -> KVCacheLayer:
    """Layer ``layer``'s load span, as a view into its (possibly shared) blob."""
    blob = snapshot.blob_for(layer)
    want = snapshot.plan.load_span(layer)
    if want[0] < blob.span[0] or want[1] != blob.span[1]:
        raise RestorationGapError(f"layer {layer} needs {list(want)}, blob {blob.owners} holds {list(blob.span)}")
    a = want[0] - blob.span[0]
    return KVCacheLayer(blob.keys[:, a:], blob.values[:, a:], want)


# ---------------------------------------------------------------- container


def dumps(snapshot: KVSnapshot) -> bytes:
    meta = json.dumps(snapshot.metadata(), sort_keys=True, separators=(",", ":")).encode()
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", snapshot.format_version))
    out.write(bytes.fromhex(snapshot.config_hash))
    out.write(struct.pack("<I", len(meta)))
    out.write(meta)
    out.write(struct.pack("<I", len(snapshot.blobs)))
    for b in snapshot.blobs:
        payload = b.keys.astype("<f4").tobytes() + b.values.astype("<f4").tobytes()
        out.write(struct.pack("<Q", len(payload)))
        out.write(payload)
    body = out.getvalue()
    return body + hashlib.sha256(body).digest()


def save(snapshot: KVSnapshot, sink: Union[str, os.PathLike, BinaryIO]) -> None:
    data = dumps(snapshot)
    if hasattr(sink, "write"):
        sink.write(data)
    else:
        with open(sink, "wb") as f:
            f.write(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, field: str) -> bytes:
        if self.pos + n > len(self.data):
            raise LoadError(field, "unexpected end of data")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, field: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), field))[0]


def loads(data: bytes, config: Union[ModelConfig, str, None] = None) -> KVSnapshot:
    """Parse and fully validate a snapshot; errors name the failing field."""
    if len(data) < len(MAGIC) + 4 + _DIGEST + _DIGEST:
        raise LoadError("checksum", "file too short to carry a checksum")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise LoadError("checksum", "SHA-256 mismatch (truncated or corrupted)")
    r = _Reader(body)
    if r.take(4, "magic") != MAGIC:
        raise LoadError("magic", "not a KRUL snapshot")
    version = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise LoadError("version", f"unsupported format version {version}")
    config_hash = r.take(_DIGEST, "config").hex()
    if config is not None and config_hash != _config_hash(config):
        raise LoadError("config", "snapshot was written for a different model config")
    try:
        meta = json.loads(r.take(r.unpack("<I", "metadata"), "metadata").decode())
        H, hd, N, L = meta["n_heads"], meta["head_dim"], meta["n_layers"], meta["history_len"]
        strategy = CompressionStrategy.from_triples(meta["strategy"]["pairs"], meta["strategy"]["exhausted"])
        plan = RestorationPlan.from_dict(meta["plan"])
        report = LayerClassReport.from_dict(meta["report"]) if meta["report"] else None
        distances = (
            DistanceMatrix.from_triples(meta["distances"]["layers"], meta["distances"]["pairs"])
            if meta["distances"]
            else None
        )
        mode = MergeMode(meta["mode"])
        table = meta["blobs"]
    except (KeyError, TypeError, ValueError) as exc:
        raise LoadError("metadata", str(exc)) from exc

    if r.unpack("<I", "blob") != len(table):
        raise LoadError("blob", "blob count does not match metadata")
    blobs = []
    for entry in table:
        owners, span = tuple(entry["owners"]), tuple(entry["span"])
        n = span[1] - span[0]
        size = r.unpack("<Q", "blob")
        if n < 0 or size != 2 * H * n * hd * 4:
            raise LoadError("blob", f"blob {owners} has {size} bytes, expected {2 * H * max(n, 0) * hd * 4}")
        raw = np.frombuffer(r.take(size, "blob"), dtype="<f4").astype(DTYPE)
        k, v = raw[: size // 8].reshape(H, n, hd), raw[size // 8 :].reshape(H, n, hd)
        blobs.append(Blob(owners, span, k, v))
    if r.pos != len(body):
        raise LoadError("blob", "trailing bytes after the last blob")

    snap = KVSnapshot(
        conversation_id=meta["conversation_id"],
        config_hash=config_hash,
        history_len=L,
        n_layers=N,
        n_heads=H,
        head_dim=hd,
        mode=mode,
        strategy=strategy,
        plan=plan,
        blobs=tuple(blobs),
        report=report,
        distances=distances,
        format_version=version,
    )
    _check_invariants(snap)
    return snap


def _check_invariants(snap: KVSnapshot) -> None:
    if snap.plan.n_layers != snap.n_layers or snap.plan.history_len != snap.history_len:
        raise LoadError("plan", "plan dimensions disagree with the snapshot header")
    problems = validate_plan(snap.plan, snap.strategy, snapshot=snap)
    if problems:
        raise LoadError("plan", "; ".join(f"{v.kind}: {v.detail}" for v in problems))
    owners = sorted(l for b in snap.blobs for l in b.owners)
    if owners != list(range(snap.n_layers)):
        raise LoadError("coverage", f"blob owners {owners} do not cover each layer exactly once")
    for b in snap.blobs:
        if b.span[1] != snap.history_len:
            raise LoadError("coverage", f"blob {b.owners} ends at {b.span[1]}, history is {snap.history_len}")
    expected = {(tuple(o), tuple(s)) for o, s in blob_layout(snap.plan, snap.strategy)}
    if {(b.owners, b.span) for b in snap.blobs} != expected:
        raise LoadError("coverage", "blob table disagrees with the plan and strategy")


def load(source: Union[str, os.PathLike, BinaryIO, bytes], config: Union[ModelConfig, str, None] = None) -> KVSnapshot:
    if isinstance(source, (bytes, bytearray)):
        data = bytes(source)
    elif hasattr(source, "read"):
        data = source.read()
    else:
        with open(source, "rb") as f:
            data = f.read()
    return loads(data, config)
