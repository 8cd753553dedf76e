import json
import subprocess
import sys

import pytest

from mehpan import data as D
from mehpan.cli import main
from mehpan.models import load_checkpoint

SMALL_MODEL = ["--hidden", "4", "--aux-hidden", "2", "--embed", "4", "--attention-hidden", "3",
               "--max-diag-len", "12", "--max-med-len", "8", "--batch-size", "32"]


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def records(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    path = d / "data.jsonl"
    assert run("generate", "--n", 150, "--seed", 3, "--out", path, "--n-diag-codes", 40,
               "--n-med-codes", 40, "--max-diag-len", 12, "--max-med-len", 8) == 0
    return path


def listing(path):
    return sorted(p.name for p in path.iterdir())


# ---------------------------------------------------------------- generate


def test_generate_is_byte_identical(tmp_path):
    for name in ("a.jsonl", "b.jsonl"):
        assert run("generate", "--n", 1000, "--seed", 7, "--out", tmp_path / name) == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_generate_full_signal_counts(tmp_path, capsys):
    assert run("generate", "--n", 500, "--seed", 1, "--signal", 1.0, "--out", tmp_path / "a.jsonl") == 0
    out = dict(line.split(": ") for line in capsys.readouterr().out.splitlines())
    assert out["vascular (positive)"] == out["recent marker present"]
    data = D.read_records(tmp_path / "a.jsonl")
    assert int(out["vascular (positive)"]) == sum(p.label_binary for p in data)


def test_generate_default_ratio(tmp_path, capsys):
    assert run("generate", "--n", 10000, "--seed", 0, "--out", tmp_path / "a.jsonl") == 0
    out = dict(line.split(": ") for line in capsys.readouterr().out.splitlines())
    assert int(out["vascular (positive)"]) / 10000 == pytest.approx(0.193, abs=0.01)


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mehpan", "generate", "--n", "20",
                           "--out", str(tmp_path / "a.jsonl")], capture_output=True, text=True)
    assert proc.returncode == 0 and "patients: 20" in proc.stdout


# ---------------------------------------------------------------- train


def test_train_routes_reduce_flag(records, tmp_path):
    ckpt = tmp_path / "m.ckpt"
    assert run("train", "--data", records, "--out", ckpt, "--arch", "conv", "--reduce", "wsum",
               "--epochs", 1, *SMALL_MODEL) == 0
    cfg = load_checkpoint(ckpt).config
    assert (cfg.architecture, cfg.reduction_mode) == ("conv", "weighted_sum")
    assert {"m.ckpt", "m.ckpt.diag.vocab", "m.ckpt.med.vocab", "m.ckpt.log.jsonl"} <= set(listing(tmp_path))


def test_conv_without_reduce_defaults_to_wsum(records, tmp_path, capsys):
    ckpt = tmp_path / "m.ckpt"
    assert run("train", "--data", records, "--out", ckpt, "--arch", "conv", "--epochs", 0,
               *SMALL_MODEL) == 0
    assert "wsum" in capsys.readouterr().err
    assert load_checkpoint(ckpt).config.reduction_mode == "weighted_sum"


def test_rnn_with_reduce_rejected(records, tmp_path, capsys):
    code = run("train", "--data", records, "--out", tmp_path / "m.ckpt", "--arch", "rnn",
               "--reduce", "sum", "--epochs", 1, *SMALL_MODEL)
    assert code != 0
    assert "usage" in capsys.readouterr().err
    assert listing(tmp_path) == []


def test_training_log_contents(records, tmp_path):
    ckpt = tmp_path / "m.ckpt"
    assert run("train", "--data", records, "--out", ckpt, "--epochs", 2, *SMALL_MODEL) == 0
    rows = [json.loads(x) for x in (tmp_path / "m.ckpt.log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in rows] == [0, 1]
    assert all(r["seconds"] > 0 for r in rows)


def test_train_is_idempotent(records, tmp_path):
    for name in ("a.ckpt", "b.ckpt"):
        assert run("train", "--data", records, "--out", tmp_path / name, "--epochs", 1,
                   "--arch", "conv", "--reduce", "last", *SMALL_MODEL) == 0
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


# ---------------------------------------------------------------- predict


@pytest.fixture(scope="module")
def trained(records, tmp_path_factory):
    d = tmp_path_factory.mktemp("trained")
    ckpt = d / "m.ckpt"
    assert run("train", "--data", records, "--out", ckpt, "--epochs", 1,
               "--scores", d / "train_scores.jsonl", *SMALL_MODEL) == 0
    return d, ckpt


def test_predict_matches_training_scores(records, trained, tmp_path):
    d, ckpt = trained
    assert run("predict", "--data", records, "--checkpoint", ckpt, "--out", tmp_path / "s.jsonl") == 0
    assert (tmp_path / "s.jsonl").read_bytes() == (d / "train_scores.jsonl").read_bytes()


def test_predict_row_count_and_probabilities(records, trained, tmp_path):
    _, ckpt = trained
    assert run("predict", "--data", records, "--checkpoint", ckpt, "--out", tmp_path / "s.jsonl") == 0
    rows = [json.loads(x) for x in (tmp_path / "s.jsonl").read_text().splitlines()]
    assert len(rows) == len(D.read_records(records))
    for r in rows:
        assert 0 < r["p_binary"] < 1 and abs(sum(r["p_multi"]) - 1) < 1e-5


def test_predict_unseen_codes(trained, tmp_path):
    _, ckpt = trained
    p = D.PatientHistory("new", ["never-seen", "X999"], [0, 3], ["O", "E"], ["M-new"], [5], ["S"], 0)
    D.write_records(tmp_path / "new.jsonl", [p])
    assert run("predict", "--data", tmp_path / "new.jsonl", "--checkpoint", ckpt,
               "--out", tmp_path / "s.jsonl") == 0
    assert len((tmp_path / "s.jsonl").read_text().splitlines()) == 1


def test_predict_vocab_mismatch(records, trained, tmp_path):
    _, ckpt = trained
    D.Vocab(["a"]).save(tmp_path / "tiny.vocab")
    code = run("predict", "--data", records, "--checkpoint", ckpt, "--diag-vocab",
               tmp_path / "tiny.vocab", "--out", tmp_path / "s.jsonl")
    assert code != 0 and not (tmp_path / "s.jsonl").exists()


# ---------------------------------------------------------------- eval


@pytest.fixture(scope="module")
def evaluated(records, tmp_path_factory):
    d = tmp_path_factory.mktemp("eval")
    for prefix in ("a", "b"):
        assert run("eval", "--data", records, "--out", d / prefix, "--model", "conv:sum",
                   "--epochs", 1, "--splits", 3, *SMALL_MODEL) == 0
    return d


def test_eval_table_columns(evaluated):
    lines = (evaluated / "a.table.txt").read_text().splitlines()
    for col in ("Running time (/min)", "Precision", "Recall", "F1-measure", "AUC"):
        assert col in lines[0]
    names = [line.split(" | ")[0].strip() for line in lines[2:]]
    assert names == ["C-MeHPAN (sum)", "Majority class", "Logistic (bag of codes)"]


def test_eval_reports_identical(evaluated):
    a, b = evaluated / "a.jsonl", evaluated / "b.jsonl"
    assert a.read_bytes() == b.read_bytes()
    rows = [json.loads(x) for x in a.read_text().splitlines()]
    assert len(rows) == 3 * 4
    assert (evaluated / "a.timing.jsonl").exists()


# ---------------------------------------------------------------- failures and config


@pytest.mark.parametrize("args", [
    ["generate"],
    ["generate", "--out", "x.jsonl", "--n", "-3"],
    ["generate", "--out", "x.jsonl", "--signal", "2"],
    ["train", "--data", "missing.jsonl", "--out", "m.ckpt"],
    ["train", "--data", "DATA", "--out", "m.ckpt", "--arch", "cnn"],
    ["train", "--data", "DATA", "--out", "m.ckpt", "--arch", "conv", "--reduce", "max"],
    ["train", "--data", "DATA", "--out", "m.ckpt", "--conv-width", "4", "--arch", "conv"],
    ["eval", "--data", "DATA", "--out", "r", "--model", "transformer"],
    ["predict", "--data", "DATA", "--out", "s.jsonl", "--checkpoint", "nope.ckpt"],
    ["bogus"],
])
def test_invalid_invocations_leave_no_files(records, tmp_path, monkeypatch, capsys, args):
    monkeypatch.chdir(tmp_path)
    args = [str(records) if a == "DATA" else a for a in args]
    assert main(args) != 0
    assert capsys.readouterr().err
    assert listing(tmp_path) == []


def test_config_file_and_flag_override(tmp_path, capsys):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[common]\nseed = 5\n\n[generate]\nn = 40\nsignal = 1.0\n")
    assert run("generate", "--config", cfg, "--out", tmp_path / "a.jsonl") == 0
    assert "patients: 40" in capsys.readouterr().out
    assert run("generate", "--config", cfg, "--n", 30, "--out", tmp_path / "b.jsonl") == 0
    assert "patients: 30" in capsys.readouterr().out
    assert run("generate", "--n", 40, "--seed", 5, "--signal", 1, "--out", tmp_path / "c.jsonl") == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "c.jsonl").read_bytes()


def test_config_file_unknown_key(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[generate]\nbanana = 1\n")
    assert run("generate", "--config", cfg, "--out", tmp_path / "a.jsonl") == 2
    assert not (tmp_path / "a.jsonl").exists()
