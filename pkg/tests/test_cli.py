import csv
import json

import pytest

from dca.cli import EXIT_CONFIG, EXIT_DATA, main

TINY = {
    "model": {"n_layers": 2, "n_heads": 2, "head_dim": 8, "mlp_dim": 32, "adapter_layers": 2,
              "adapter_len": 4, "general_len": 2, "causal_layers": 2},
    "train": {"max_steps": 4, "batch_size": 4},
    "data": {"n_train": 24, "n_test": 8},
    "pretrain": {"steps": 2, "batch_size": 4, "n_per_position": 50},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.fixture
def base(tmp_path, config):
    out = tmp_path / "base"
    assert main(["pretrain", "--config", str(config), "--out-dir", str(out), "--seed", "1"]) == 0
    return out / "base.ckpt"


def test_gen_data_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-data", "--task", "letter_concat", "--n", "1000", "--seed", "7",
                     "--out-dir", str(tmp_path / name)]) == 0
    a = (tmp_path / "a" / "letter_concat.jsonl").read_bytes()
    assert a == (tmp_path / "b" / "letter_concat.jsonl").read_bytes()
    assert len(a.splitlines()) == 1000
    resolved = json.loads((tmp_path / "a" / "config.json").read_text())
    assert resolved["model"]["max_seq_len"] == 96 and resolved["train"]["seed"] == 7


def test_seed_falls_back_to_env(tmp_path, monkeypatch):
    monkeypatch.setenv("DCA_SEED", "7")
    main(["gen-data", "--task", "date", "--n", "5", "--out-dir", str(tmp_path / "env")])
    main(["gen-data", "--task", "date", "--n", "5", "--seed", "7", "--out-dir", str(tmp_path / "flag")])
    assert (tmp_path / "env" / "date.jsonl").read_bytes() == (tmp_path / "flag" / "date.jsonl").read_bytes()


def test_train_alpha_runs_differ_but_share_data(tmp_path, config, base):
    runs = {}
    for alpha in ("0", "1"):
        out = tmp_path / f"run{alpha}"
        assert main(["train", "--config", str(config), "--base", str(base), "--alpha", alpha, "--seed", "3",
                     "--out-dir", str(out)]) == 0
        runs[alpha] = out
    s0 = json.loads((runs["0"] / "summary.json").read_text())
    s1 = json.loads((runs["1"] / "summary.json").read_text())
    assert s0["train_sha256"] == s1["train_sha256"]
    assert (runs["0"] / "metrics.jsonl").read_bytes() != (runs["1"] / "metrics.jsonl").read_bytes()
    for name in ("config.json", "metrics.jsonl", "adapter.ckpt", "summary.json", "train.jsonl", "test.jsonl"):
        assert (runs["0"] / name).exists()
    resolved = json.loads((runs["0"] / "config.json").read_text())
    assert resolved["model"]["alpha"] == 0.0 and "rope_base" in resolved["model"]

    # eval reproduces the accuracy recorded at the end of training
    ev = tmp_path / "ev"
    assert main(["eval", str(runs["0"] / "adapter.ckpt"), str(runs["0"] / "test.jsonl"), "--out-dir", str(ev)]) == 0
    assert json.loads((ev / "eval.json").read_text())["accuracy"] == s0["test"]["accuracy"]

    ins = tmp_path / "ins"
    assert main(["inspect", str(runs["1"] / "adapter.ckpt"), 'Take the second last letters of the words in "AB CD"'
                 ' and concatenate them', "--compare", 'Take the second last letters of the words in "EFG HI"'
                 ' and concatenate them', "--out-dir", str(ins)]) == 0
    doc = json.loads((ins / "trace.json").read_text())
    assert doc["col_labels"][-4:] == ["adap_0", "adap_1", "adap_2", "adap_3"]
    assert "mean" in json.loads((ins / "divergence.json").read_text())


def test_ablate_writes_csv(tmp_path, config, base):
    out = tmp_path / "abl"
    assert main(["ablate", "--config", str(config), "--base", str(base), "--H-values", "1", "4",
                 "--seeds", "0", "1", "--steps", "2", "--out-dir", str(out)]) == 0
    rows = list(csv.reader(open(out / "ablation.csv")))
    assert rows[0] == ["H", "alpha", "Lprime", "seed", "task", "accuracy"]
    assert len(rows) == 1 + 2  # H=4 equals M and is skipped
    assert (out / "ablation_summary.csv").exists()


def test_field_level_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"general_len": "two"}}))
    assert main(["gen-data", "--config", str(bad), "--out-dir", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "model.general_len" in capsys.readouterr().err
    bad.write_text(json.dumps({"train": {"batch_size": 0}}))
    assert main(["gen-data", "--config", str(bad), "--out-dir", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "batch_size" in capsys.readouterr().err
    bad.write_text(json.dumps({"model": {"unknown": 1}}))
    assert main(["gen-data", "--config", str(bad), "--out-dir", str(tmp_path / "o")]) == EXIT_CONFIG


def test_missing_files_exit_nonzero(tmp_path):
    assert main(["gen-data", "--config", str(tmp_path / "nope.json"), "--out-dir", str(tmp_path)]) == EXIT_DATA
    assert main(["eval", str(tmp_path / "nope.ckpt"), str(tmp_path / "nope.jsonl")]) == EXIT_DATA


def test_bad_env_seed_is_config_error(tmp_path, monkeypatch):
    monkeypatch.setenv("DCA_SEED", "abc")
    assert main(["gen-data", "--out-dir", str(tmp_path)]) == EXIT_CONFIG


def test_regime_preset_resolves(tmp_path):
    assert main(["gen-data", "--preset", "paper-4.1", "--n", "3", "--out-dir", str(tmp_path)]) == 0
    resolved = json.loads((tmp_path / "config.json").read_text())
    assert resolved["train"]["batch_size"] == 4 and resolved["train"]["epochs"] == 5
    assert resolved["model"]["adapter_len"] == 10 and resolved["model"]["general_len"] == 2
