import csv
import io
import json

import pytest

from krul.cli import main
from krul.harness import METHODS, BenchConfig
from krul.scheduler import calibrate_rc


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"turns": 2, "input_len": 10, "ratio": 2.0}))
    return str(path)


def test_calibrate_argmin_matches(tmp_path, capsys):
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps({"f_peak": "inf", "b_peak": 1e9}))
    assert main(["calibrate", "--config", str(cfg_path), "--format", "csv"]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    chosen = [float(r["r_c"]) for r in rows if r["selected"] == "True"]
    cfg = BenchConfig.from_flat({"f_peak": "inf", "b_peak": 1e9})
    assert chosen == [calibrate_rc(cfg.cost_model(), cfg.model.n_layers, cfg.cost_ref_len)] == [1.0]


def test_bench_csv(small_config, tmp_path):
    out = tmp_path / "r.csv"
    assert main(["bench", "--config", small_config, "--format", "csv", "--out", str(out)]) == 0
    rows = list(csv.reader(out.open()))
    assert rows[0][0] == "method" and len(rows) == 1 + len(METHODS)


def test_bench_seed_flag_is_reproducible(small_config, tmp_path):
    a, b, c = (tmp_path / n for n in ("a.json", "b.json", "c.json"))
    main(["bench", "--config", small_config, "--seed", "4", "--out", str(a)])
    main(["bench", "--config", small_config, "--seed", "4", "--out", str(b)])
    main(["bench", "--config", small_config, "--seed", "5", "--out", str(c)])
    assert a.read_bytes() == b.read_bytes() != c.read_bytes()


def test_run_then_inspect(small_config, tmp_path, capsys):
    snaps = tmp_path / "snaps"
    assert main(["run", "--config", small_config, "--save-dir", str(snaps), "--format", "csv"]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0].startswith("turn,history_len,simulated_ttft_s")
    files = sorted(snaps.iterdir())
    assert [f.name for f in files] == ["turn000.krul", "turn001.krul"]
    assert main(["inspect", str(files[-1])]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["storage"]["stored_bytes"] > 0 and "plan" in doc["metadata"]

    truncated = tmp_path / "bad.krul"
    truncated.write_bytes(files[-1].read_bytes()[:-7])
    assert main(["inspect", str(truncated)]) != 0
    assert "checksum" in capsys.readouterr().err


def test_unknown_flag_and_subcommand():
    with pytest.raises(SystemExit) as e:
        main(["bench", "--bogus"])
    assert e.value.code != 0
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code != 0


def test_unsupported_method_exits_nonzero(small_config, capsys):
    assert main(["bench", "--config", small_config, "--methods", "h2o"]) != 0
    assert "h2o" in capsys.readouterr().err


def test_bad_config_key_exits_nonzero(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text('{"nope": 1}')
    assert main(["calibrate", "--config", str(p)]) != 0
    assert "nope" in capsys.readouterr().err


def test_module_entry_point():
    import subprocess
    import sys

    res = subprocess.run([sys.executable, "-m", "krul", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "calibrate" in res.stdout
