import json
from dataclasses import replace

import pytest

from krul.engine import ModelConfig
from krul.errors import ConfigError
from krul.harness import METHODS, BenchConfig, WorkloadSpec, gen_workload, run_bench, run_conversation
from krul.kvstore import MergeMode
from krul.strategy import StrategyConfig

SMALL = BenchConfig(workload=WorkloadSpec(turns=2, input_len=12, ratio=2.0))


@pytest.fixture(scope="module")
def default_report():
    return run_bench(BenchConfig())


def test_workload_is_deterministic():
    workload = WorkloadSpec(turns=4, input_len=10, jitter=0.3, seed=5)
    assert gen_workload(workload, 64) == gen_workload(workload, 64)
    assert gen_workload(workload, 64) != gen_workload(replace(workload, seed=6), 64)


def test_output_length_follows_ratio():
    (turn,) = gen_workload(WorkloadSpec(turns=1, input_len=64, ratio=6.56), 100)
    assert len(turn.user) == 64 and turn.output_len == 420


def test_explicit_output_length():
    turns = gen_workload(WorkloadSpec(turns=2, input_len=5, output_len=3), 10)
    assert [t.output_len for t in turns] == [3, 3]


@pytest.mark.parametrize("kw", [dict(turns=0), dict(ratio=0.0), dict(input_len=0), dict(jitter=1.0)])
def test_bad_workload(kw):
    with pytest.raises(ConfigError):
        WorkloadSpec(**kw)


def test_single_turn_has_no_restoration():
    cfg = replace(SMALL, workload=replace(SMALL.workload, turns=1))
    for r in run_bench(cfg).results:
        assert r.restorations == 0 and r.max_logit_divergence == 0.0


def test_full_recompute_is_the_reference():
    r = run_bench(SMALL, ["full-recompute"]).result("full-recompute")
    assert r.stored_bytes == 0 and r.max_logit_divergence == 0.0 and r.token_agreement == 1.0


def test_lossless_krul_path():
    cfg = replace(SMALL, strategy=StrategyConfig(r_l=0.0), merge_mode=MergeMode.KEEP_DEEPER)
    r = run_bench(cfg, ["krul"]).result("krul")
    assert r.restorations == 1 and r.max_logit_divergence < 1e-5


def test_krul_at_least_as_fast_as_fixed_ratio(default_report):
    assert default_report.result("krul").simulated_ttft_s <= default_report.result("fixed-ratio").simulated_ttft_s


def test_krul_beats_fixed_ratio_at_equal_bytes(default_report):
    k = default_report.result("krul")
    rc = round(1 - k.stored_bytes / k.full_bytes, 3)
    fixed = run_bench(replace(BenchConfig(), fixed_rc=rc), ["fixed-ratio"]).result("fixed-ratio")
    assert fixed.stored_bytes == pytest.approx(k.stored_bytes, rel=0.01)
    assert fixed.simulated_ttft_s / k.simulated_ttft_s >= 1.0


def test_krul_shares_layers_and_compresses(default_report):
    k = default_report.result("krul")
    assert any(t.get("pairs") for t in k.turns)
    assert k.storage_reduction > default_report.result("fixed-ratio").storage_reduction
    assert k.token_agreement >= 0.95


def test_report_reproducible():
    assert run_bench(SMALL).to_json() == run_bench(SMALL).to_json()


def test_csv_has_one_row_per_method(default_report):
    lines = default_report.to_csv().strip().splitlines()
    assert lines[0].startswith("method,")
    assert [l.split(",")[0] for l in lines[1:]] == list(METHODS)


def test_json_schema(default_report):
    doc = json.loads(default_report.to_json())
    assert doc["schema"] == "krul-bench/1" and len(doc["results"]) == len(METHODS)
    assert doc["config"]["r_l"] == 0.5


def test_unsupported_method():
    with pytest.raises(ConfigError):
        run_bench(SMALL, ["h2o"])
    with pytest.raises(ConfigError):
        run_conversation(SMALL, "h2o")


def test_flat_config_round_trip():
    cfg = BenchConfig.from_flat({"n_layers": 6, "gamma": "0.3", "turns": 2, "merge_mode": "keep-deeper",
                                 "methods": "krul,full-load", "workload_seed": 9})
    assert cfg.model == ModelConfig(n_layers=6, n_heads=4, head_dim=8, d_model=32, ir_bias=6.0)
    assert cfg.classifier.gamma == 0.3 and cfg.merge_mode is MergeMode.KEEP_DEEPER
    assert cfg.methods == ("krul", "full-load") and cfg.workload.seed == 9
    assert BenchConfig.from_flat(cfg.to_flat()) == cfg
    with pytest.raises(ConfigError):
        BenchConfig.from_flat({"no_such_key": 1})


def test_snapshot_callback_sees_every_turn():
    seen = []
    run_conversation(SMALL, "krul", lambda turn, snap: seen.append((turn, snap.history_len)))
    assert [t for t, _ in seen] == [0, 1]
    assert seen[1][1] > seen[0][1]
