import json
import subprocess
import sys

import pytest

from conformal_ssl.cli import build_parser, main

FAST = ["--epochs", "20", "--hidden", "16", "--max-iters", "3"]
SCHEMA_ITER_KEYS = {"iter", "n_pos", "n_neg", "mean_set_size", "coverage", "test_acc", "selected_precision"}


def strip_seconds(path):
    d = json.loads(path.read_text())
    d.pop("seconds")
    return d


def run_ssl(tmp_path, name, *extra):
    out = tmp_path / name
    argv = ["ssl", "--gen", "blobs", "--n", "400", "--classes", "4", "--labeled-frac", "0.2",
            "--alpha", "0.1", "--seed", "7", "--out", str(out), *FAST, *extra]
    assert main(argv) == 0
    return out


def test_ssl_writes_metrics_schema(tmp_path):
    out = run_ssl(tmp_path, "run.json")
    d = json.loads(out.read_text())
    assert set(d) == {"config", "iterations", "final_test_acc", "seconds"}
    assert 1 <= len(d["iterations"]) <= 3
    for r in d["iterations"]:
        assert set(r) == SCHEMA_ITER_KEYS
        assert isinstance(r["iter"], int) and isinstance(r["n_pos"], int)
        assert 0 <= r["coverage"] <= 1
    assert d["config"]["ssl"]["conformal"]["alpha"] == 0.1
    assert d["config"]["ssl"]["selection"]["tau_p"] == 0.7


def test_ssl_byte_identical_apart_from_seconds(tmp_path):
    a = run_ssl(tmp_path, "a.json")
    b = run_ssl(tmp_path, "b.json", "--threads", "3")
    assert strip_seconds(a) == strip_seconds(b)
    la = [ln for ln in a.read_text().splitlines() if '"seconds"' not in ln]
    lb = [ln for ln in b.read_text().splitlines() if '"seconds"' not in ln]
    assert la == lb


def test_sets_output(tmp_path):
    sets = tmp_path / "sets.csv"
    run_ssl(tmp_path, "r.json", "--sets-out", str(sets))
    lines = sets.read_text().splitlines()
    assert lines[0] == "sample_id,set_members,y_tilde,g"
    sid, members, y, g = lines[1].split(",")
    assert len(y) == len(g) == 4 and members


def test_calibrate_too_small_fold(tmp_path, capsys):
    code = main(["calibrate", "--gen", "blobs", "--n", "50", "--classes", "2",
                 "--labeled-frac", "0.5", "--calib-frac", "0.2", "--epochs", "5"])
    assert code == 3
    err = capsys.readouterr().err
    assert "calibration fold too small" in err
    assert err.startswith("error[config] code=3:")
    assert len(err.strip().splitlines()) == 1


def test_calibrate_prints_and_audits(tmp_path, capsys):
    out = tmp_path / "audit.json"
    code = main(["calibrate", "--gen", "blobs", "--n", "600", "--classes", "3", "--labeled-frac", "0.4",
                 "--randomized", "--epochs", "20", "--out", str(out)])
    assert code == 0
    line = capsys.readouterr().out.splitlines()[0]
    assert line.startswith("temperature=") and "tau_hat=" in line and "n_calib=" in line
    audit = json.loads(out.read_text())
    assert audit["randomized"] is True and 0 <= audit["test_coverage"] <= 1


def test_gen_data_then_eval(tmp_path, capsys):
    data, model, ev = tmp_path / "d.csv", tmp_path / "m.npz", tmp_path / "e.json"
    assert main(["gen-data", "--gen", "moons", "--n", "300", "--with-split", "--labeled-frac", "0.3",
                 "--seed", "2", "--out", str(data)]) == 0
    assert main(["calibrate", "--data", str(data), "--epochs", "30", "--model-out", str(model)]) == 0
    assert main(["eval", "--model", str(model), "--data", str(data), "--out", str(ev)]) == 0
    report = json.loads(ev.read_text())
    assert report["n"] == 60
    assert report["test_acc"] > 0.7 and report["coverage"] is not None


def test_supervised_metrics(tmp_path):
    out = tmp_path / "s.json"
    assert main(["supervised", "--gen", "moons", "--n", "300", "--epochs", "20", "--out", str(out)]) == 0
    d = json.loads(out.read_text())
    assert d["iterations"] == [] and 0 <= d["final_test_acc"] <= 1


def test_config_file_and_flag_override(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"tau_p": 0.8, "kappa-n": 0.001, "label_mode": "multi", "alpha": 0.2}))
    out = run_ssl(tmp_path, "r.json", "--config", str(cfg), "--alpha", "0.05")
    d = json.loads(out.read_text())["config"]["ssl"]
    assert d["selection"]["tau_p"] == 0.8
    assert d["selection"]["kappa_n"] == 0.001
    assert d["selection"]["label_mode"] == "multi"
    assert d["conformal"]["alpha"] == 0.05


def test_config_unknown_key(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"bogus": 1}')
    assert main(["ssl", "--gen", "moons", "--config", str(cfg)]) == 3


def test_unknown_flag_is_usage_error():
    assert main(["ssl", "--no-such-flag"]) == 2


def test_missing_data_file_is_io_error(tmp_path, capsys):
    assert main(["ssl", "--data", str(tmp_path / "missing.csv")]) == 4
    assert capsys.readouterr().err.startswith("error[io] code=4:")


def test_invalid_value_is_config_error():
    assert main(["ssl", "--gen", "moons", "--alpha", "1.5"]) == 3


def test_help_lists_every_flag():
    _, subs = build_parser()
    text = subs["ssl"].format_help()
    for flag in [
        "--gen", "--data", "--labeled-frac", "--calib-frac", "--alpha", "--lambda", "--k-reg", "--randomized",
        "--tau-p", "--tau-n", "--kappa-p", "--kappa-n", "--gamma", "--label-mode", "--mc-passes",
        "--max-iters", "--tol", "--lr", "--epochs", "--batch-size", "--hidden", "--dropout", "--seed",
        "--threads", "--out", "--sets-out", "--calibrate-on-dtilde", "--uncertainty-raw",
    ]:
        assert flag in text, flag


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "conformal_ssl", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "ssl" in proc.stdout


@pytest.mark.parametrize("cmd", ["gen-data", "supervised", "calibrate", "ssl", "eval"])
def test_subcommand_help(cmd, capsys):
    assert main([cmd, "--help"]) == 0
    assert "usage:" in capsys.readouterr().out
