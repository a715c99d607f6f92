import json
import os
import subprocess
import sys

import numpy as np
import pytest

from microunify.cli import main
from microunify.config import ConfigError, parse_config

BASE = """\
seed = 0
arch = fc(16,32) relu fc(16,16) relu fc(3,16)
input = 32
data = synthetic_classify
data.n = 240
train.epochs = 15
admm.K = 4
constraint.method = unify
constraint.block = 2x2
constraint.ratio = 1.0
"""


def write(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_parse_and_defaults():
    cfg = parse_config(BASE + "layer.2.method = prune\nlayer.2.ratio = 0.5\n")
    assert cfg.input_shape == (32,) and cfg.train.epochs == 15
    assert cfg.admm.lr == pytest.approx(0.1 * cfg.train.lr)
    spec = cfg.build_spec(cfg.build_model())
    # classification models leave the first and last layer dense by default
    assert spec.get(0).method == "none" and spec.get(4).method == "none"
    assert spec.get(2).method == "prune" and spec.get(2).ratio == 0.5


@pytest.mark.parametrize("line,msg", [
    ("train.epochs = many", "line 11: train.epochs"),
    ("constraint.ratio = 2", "outside"),
    ("bogus = 1", "unknown key"),
    ("layer.x.method = unify", "layer.<id>"),
    ("no equals sign", "expected 'key = value'"),
])
def test_config_errors_name_line_and_field(line, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_config(BASE + line + "\n")


def test_missing_layer_and_infeasible_spec():
    cfg = parse_config(BASE + "layer.9.method = prune\n")
    with pytest.raises(ConfigError, match="layer.9"):
        cfg.build_spec(cfg.build_model())
    cfg = parse_config(BASE + "constraint.method = nm_prune\nconstraint.block = 4x1\nconstraint.nm_keep = 4\n")
    with pytest.raises(ConfigError, match="nm_keep"):
        cfg.build_spec(cfg.build_model())


def test_seed_env_override(monkeypatch):
    monkeypatch.setenv("MSU_SEED", "17")
    assert parse_config(BASE).seed == 17
    monkeypatch.setenv("MSU_SEED", "x")
    with pytest.raises(ConfigError):
        parse_config(BASE)


def test_missing_dataset_file(tmp_path):
    cfg = parse_config(BASE + f"data = idx\ndata.images = {tmp_path / 'nope.idx'}\n")
    with pytest.raises(FileNotFoundError):
        cfg.dataset()


def test_cli_pipeline(tmp_path, capsys):
    cfg = write(tmp_path, BASE + "constraint.exclude = none\n")
    ck, ck2, out = tmp_path / "dense.msu", tmp_path / "dense2.msu", tmp_path / "m.msu"
    assert main(["train-dense", "--config", str(cfg), "--out", str(ck)]) == 0
    assert main(["train-dense", "--config", str(cfg), "--out", str(ck2)]) == 0
    assert ck.read_bytes() == ck2.read_bytes()
    assert main(["compress", "--config", str(cfg), "--checkpoint", str(ck), "--out", str(out)]) == 0
    capsys.readouterr()
    report = json.loads((tmp_path / "m.msu.report.json").read_text())
    assert report["verified"] and report["measured_multiplies"] == report["predicted_multiplies"]
    assert main(["eval", "--model", str(out), "--data", str(cfg)]) == 0
    ev = json.loads(capsys.readouterr().out)
    assert ev["value"] == report["compressed_metric"]
    assert ev["value"] == ev["dense_path_value"]
    assert main(["ratio", "--model", str(out)]) == 0
    ratios = json.loads(capsys.readouterr().out)
    assert ratios["magnitudes_only"] == report["ratio_magnitudes_only"]
    assert main(["inspect", "--model", str(out)]) == 0
    assert "unify 2x2" in capsys.readouterr().out
    assert (tmp_path / "m.msu.history.csv").read_text().startswith("iteration,layer")


def test_cli_exit_codes(tmp_path, capsys):
    cfg = write(tmp_path, BASE)
    assert main(["eval", "--model", str(tmp_path / "none.msu"), "--data", str(cfg)]) == 2
    bad = write(tmp_path, BASE + "constraint.method = smash\n", "bad.cfg")
    assert main(["train-dense", "--config", str(bad)]) == 1
    corrupt = tmp_path / "c.msu"
    assert main(["train-dense", "--config", str(cfg), "--out", str(corrupt)]) == 0
    data = bytearray(corrupt.read_bytes())
    data[20] ^= 1
    corrupt.write_bytes(bytes(data))
    assert main(["ratio", "--model", str(corrupt)]) == 2
    assert "Checksum" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["compress", "--config", str(cfg)])
    assert exc.value.code == 1


def test_cli_bench_gemm(tmp_path, capsys):
    out = tmp_path / "bench.csv"
    assert main(["bench-gemm", "--out", str(out), "--cols", "4"]) == 0
    rows = out.read_text().splitlines()
    assert rows[0] == "shape,spec,naive_mults,micro_mults,reduction,wall_time"
    by_spec = {r.split(",")[1]: float(r.split(",")[4]) for r in rows[1:]}
    assert by_spec["unify 8x1 r=1"] == 8.0 and by_spec["unify 16x1 r=1"] == 16.0
    assert all(v == 1.0 for k, v in by_spec.items() if k.endswith("r=0"))


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "microunify", "nonsense"], capture_output=True, text=True,
                       env={**os.environ})
    assert r.returncode == 1 and "invalid choice" in r.stderr
