"""Command line entry point: ``krul {run,calibrate,bench,inspect}``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from dataclasses import replace
from typing import Optional, Sequence

from . import kvstore
from .errors import KrulError
from .harness import METHODS, BenchConfig, run_bench, run_conversation
from .scheduler import calibration_table, rc_grid, select_row
from .strategy import EMPTY


def _load_config(args) -> BenchConfig:
    flat = {}
    if args.config:
        with open(args.config) as f:
            flat = json.load(f)
        if not isinstance(flat, dict) or any(isinstance(v, dict) for v in flat.values()):
            raise KrulError("config file must be a flat JSON object")
    if args.seed is not None:
        flat["model_seed"] = args.seed
        flat["workload_seed"] = args.seed
    return BenchConfig.from_flat(flat)


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        with open(out, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def _rows_to_text(rows: list[dict], fmt: str) -> str:
    if fmt == "json":
        return json.dumps(rows, indent=2) + "\n"
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def cmd_calibrate(args, cfg: BenchConfig) -> int:
    cost = cfg.cost_model()
    N = cfg.model.n_layers
    L = args.history_len or cfg.cost_ref_len
    rows = calibration_table(cost, N, L, EMPTY, rc_grid(args.grid_step))
    best = select_row(rows)
    table = [
        {"r_c": r.r_c, "t_compute": r.t_compute, "t_load": r.t_load, "gap": r.gap, "selected": r is best}
        for r in rows
    ]
    _emit(_rows_to_text(table, args.format), args.out)
    return 0


def cmd_bench(args, cfg: BenchConfig) -> int:
    methods = args.methods.split(",") if args.methods else None
    if methods:
        bad = [m for m in methods if m not in METHODS]
        if bad:
            print(f"krul bench: unsupported method(s): {', '.join(bad)}", file=sys.stderr)
            return 2
    report = run_bench(cfg, methods)
    _emit(report.to_json() if args.format == "json" else report.to_csv(), args.out)
    return 0


def cmd_run(args, cfg: BenchConfig) -> int:
    """One Krul conversation; prints per-turn timings and optionally saves snapshots."""
    cfg = replace(cfg, wall_clock=True)
    on_snapshot = None
    if args.save_dir:
        os.makedirs(args.save_dir, exist_ok=True)

        def on_snapshot(turn, snap):
            kvstore.save(snap, os.path.join(args.save_dir, f"turn{turn:03d}.krul"))

    t0 = time.perf_counter()
    result = run_conversation(cfg, "krul", on_snapshot)
    elapsed = time.perf_counter() - t0
    rows = [
        {
            "turn": t["turn"],
            "history_len": t["history_len"],
            "simulated_ttft_s": t["simulated_ttft_s"],
            "r_c": t.get("r_c"),
            "pairs": " ".join(f"{i}-{j}" for i, j in t.get("pairs", [])),
            "stored_bytes": t.get("stored_bytes"),
        }
        for t in result.turns
    ]
    _emit(_rows_to_text(rows, args.format), args.out)
    print(
        f"# wall {elapsed:.3f}s, max logit divergence {result.max_logit_divergence:.3g}",
        file=sys.stderr,
    )
    return 0


def cmd_inspect(args, cfg: Optional[BenchConfig]) -> int:
    try:
        snap = kvstore.load(args.snapshot)
    except kvstore.LoadError as exc:
        print(f"krul inspect: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"krul inspect: {exc}", file=sys.stderr)
        return 1
    payload = {
        "format_version": snap.format_version,
        "config_hash": snap.config_hash,
        "metadata": snap.metadata(),
        "storage": snap.storage_report().to_dict(),
    }
    if args.format == "csv":
        rep = payload["storage"]
        text = _rows_to_text([{"history_len": snap.history_len, "n_layers": snap.n_layers, **rep}], "csv")
    else:
        text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    _emit(text, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON config file")
    common.add_argument("--seed", type=int, help="overrides model_seed and workload_seed")
    common.add_argument("--out", help="write output here instead of stdout")
    common.add_argument("--format", choices=("json", "csv"), default="json")

    parser = argparse.ArgumentParser(prog="krul", parents=[common], description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="run one conversation with Krul restoration")
    p.add_argument("--save-dir", help="write each turn's snapshot into this directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("calibrate", parents=[common], help="print the r_c calibration table")
    p.add_argument("--history-len", type=int, help="history length L (default cost_ref_len)")
    p.add_argument("--grid-step", type=float, default=0.05)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("bench", parents=[common], help="compare restoration methods")
    p.add_argument("--methods", help=f"comma-separated subset of {','.join(METHODS)}")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", parents=[common], help="print snapshot metadata and storage")
    p.add_argument("snapshot")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args)
        return args.func(args, cfg)
    except (KrulError, ValueError, OSError) as exc:
        print(f"krul {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
