"""Command-line entry point: ``generate``, ``train``, ``eval`` and ``predict``.

Settings come from flags and, optionally, a ``key = value`` config file with
one section per command (``[train]``, ``[eval]``, ...).  Flags win.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .data import (
    CARDIO,
    CEREBRO,
    NO_DISEASE,
    RecordError,
    SynthConfig,
    Vocab,
    build_vocab,
    generate_synthetic,
    has_recent_marker,
    read_records,
    split_ten_sets,
    write_records,
)
from .models import CheckpointError, ConfigError, MehpanModel, ModelConfig, load_checkpoint, save_checkpoint
from .training import (
    LogisticBaseline,
    MajorityBaseline,
    TrainConfig,
    auc,
    binary_metrics,
    evaluate_baseline,
    evaluate_protocol,
    format_table,
    predict,
    train,
)

REDUCE_FLAGS = {"sum": "sum", "wsum": "weighted_sum", "last": "last_step"}


class UsageError(Exception):
    pass


def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise ValueError(f"expected a positive integer, got {s}")
    return v


def _nonneg_int(s: str) -> int:
    v = int(s)
    if v < 0:
        raise ValueError(f"expected a nonnegative integer, got {s}")
    return v


def _unit_float(s: str) -> float:
    v = float(s)
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"expected a value in [0, 1], got {s}")
    return v


def _pos_float(s: str) -> float:
    v = float(s)
    if v <= 0:
        raise ValueError(f"expected a positive number, got {s}")
    return v


SHARED = [
    ("config", str, None, "config file with [command] sections"),
    ("seed", _nonneg_int, 0, "random seed"),
]

MODEL_OPTIONS = [
    ("epochs", _nonneg_int, 10, "training epochs"),
    ("batch-size", _positive_int, 64, "mini-batch size"),
    ("lr", _pos_float, 1e-3, "Adam learning rate"),
    ("hidden", _positive_int, 16, "hidden width of the code streams"),
    ("aux-hidden", _positive_int, 8, "hidden width of the kind/type streams"),
    ("embed", _positive_int, 16, "code embedding width"),
    ("attention-hidden", _positive_int, 16, "attention scorer width"),
    ("conv-width", _positive_int, 3, "convolution kernel width (odd)"),
    ("conv-layers", _positive_int, 2, "stacked GLU blocks per stream"),
    ("max-diag-len", _positive_int, 30, "diagnosis events kept per patient"),
    ("max-med-len", _positive_int, 20, "medication events kept per patient"),
]

COMMANDS = {
    "generate": [
        ("out", str, None, "output record file (required)"),
        ("n", _nonneg_int, 1000, "number of patients"),
        ("signal", _unit_float, 0.9, "planted signal strength"),
        ("n-diag-codes", _positive_int, 500, "background diagnosis codes"),
        ("n-med-codes", _positive_int, 1000, "medication codes"),
        ("max-diag-len", _positive_int, 30, "longest generated diagnosis history"),
        ("max-med-len", _positive_int, 20, "longest generated medication history"),
    ],
    "train": [
        ("out", str, None, "checkpoint path (required); vocab and log files sit beside it"),
        ("data", str, None, "record file (required)"),
        ("arch", str, "rnn", "rnn or conv"),
        ("reduce", str, None, "conv time reduction: sum, wsum or last"),
        ("scores", str, None, "also write end-of-training scores on the whole data file"),
        *MODEL_OPTIONS,
    ],
    "eval": [
        ("out", str, None, "report path prefix (required)"),
        ("data", str, None, "record file (required)"),
        ("model", str, None, "comma-separated models: rnn, conv:sum, conv:wsum, conv:last"),
        ("splits", _positive_int, 10, "number of 80/20 splits"),
        *MODEL_OPTIONS,
    ],
    "predict": [
        ("out", str, None, "score file (required)"),
        ("data", str, None, "record file (required)"),
        ("checkpoint", str, None, "checkpoint path (required)"),
        ("diag-vocab", str, None, "diagnosis vocab file (default: beside the checkpoint)"),
        ("med-vocab", str, None, "medication vocab file (default: beside the checkpoint)"),
    ],
}

REQUIRED = {
    "generate": ("out",),
    "train": ("out", "data"),
    "eval": ("out", "data"),
    "predict": ("out", "data", "checkpoint"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mehpan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, options in COMMANDS.items():
        p = sub.add_parser(name)
        for flag, typ, _, helptext in SHARED + options:
            p.add_argument(f"--{flag}", type=typ, default=None, help=helptext)
    return parser


def resolve(command: str, ns: argparse.Namespace) -> dict:
    """Merge defaults <- config file section <- flags, then check requirements."""
    options = SHARED + COMMANDS[command]
    values = {flag: default for flag, _, default, _ in options}
    if ns.config:
        cp = configparser.ConfigParser()
        try:
            if not cp.read(ns.config, encoding="utf-8"):
                raise UsageError(f"cannot read config file {ns.config}")
        except configparser.Error as exc:
            raise UsageError(f"bad config file: {exc}") from None
        types = {flag: typ for flag, typ, _, _ in options}
        for section in ("common", command):
            if not cp.has_section(section):
                continue
            for key, raw in cp.items(section):
                flag = key.replace("_", "-")
                if flag not in types or flag == "config":
                    if section == command:
                        raise UsageError(f"unknown key {key!r} in [{section}]")
                    continue
                try:
                    values[flag] = types[flag](raw)
                except ValueError as exc:
                    raise UsageError(f"[{section}] {key}: {exc}") from None
    for flag, *_ in options:
        v = getattr(ns, flag.replace("-", "_"))
        if v is not None:
            values[flag] = v
    missing = [f"--{f}" for f in REQUIRED[command] if values.get(f) is None]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join(missing)}")
    return values


def _model_config(v: dict, arch: str, reduce: str | None) -> ModelConfig:
    if arch not in ("rnn", "conv"):
        raise UsageError(f"--arch must be rnn or conv, got {arch!r}")
    if arch == "rnn" and reduce is not None:
        raise UsageError("--reduce applies only to --arch conv")
    if arch == "conv":
        if reduce is None:
            print("notice: --reduce not given for conv; using wsum (weighted sum)", file=sys.stderr)
            reduce = "wsum"
        if reduce not in REDUCE_FLAGS:
            raise UsageError(f"--reduce must be one of {sorted(REDUCE_FLAGS)}, got {reduce!r}")
    try:
        return ModelConfig(
            architecture=arch,
            reduction_mode=REDUCE_FLAGS[reduce] if arch == "conv" else None,
            diag_embed=v["embed"],
            med_embed=v["embed"],
            hidden=v["hidden"],
            aux_hidden=v["aux-hidden"],
            attention_hidden=v["attention-hidden"],
            conv_width=v["conv-width"],
            conv_layers=v["conv-layers"],
            max_diag_len=v["max-diag-len"],
            max_med_len=v["max-med-len"],
            seed=v["seed"],
        ).validate()
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def _train_config(v: dict) -> TrainConfig:
    return TrainConfig(epochs=v["epochs"], batch_size=v["batch-size"], learning_rate=v["lr"],
                       seed=v["seed"])


def _commit(staged: dict[Path, str | bytes]) -> None:
    """Write every output to a temp file first, then rename them all."""
    temps = {}
    try:
        for path, content in staged.items():
            tmp = path.with_name(f".{path.name}.partial")
            if isinstance(content, bytes):
                tmp.write_bytes(content)
            else:
                tmp.write_text(content, encoding="utf-8")
            temps[path] = tmp
        for path, tmp in temps.items():
            os.replace(tmp, path)
    finally:
        for tmp in temps.values():
            if tmp.exists():
                tmp.unlink()


# ---------------------------------------------------------------- commands


def cmd_generate(v: dict) -> None:
    cfg = SynthConfig(
        n_patients=v["n"],
        signal=v["signal"],
        n_diag_codes=v["n-diag-codes"],
        n_med_codes=v["n-med-codes"],
        max_diag_len=v["max-diag-len"],
        min_diag_len=min(SynthConfig.min_diag_len, v["max-diag-len"]),
        max_med_len=v["max-med-len"],
        seed=v["seed"],
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    data = generate_synthetic(cfg)
    write_records(v["out"], data)
    counts = {c: sum(p.label_multi == c for p in data) for c in (NO_DISEASE, CARDIO, CEREBRO)}
    markers = sum(has_recent_marker(p, cfg) for p in data)
    print(f"patients: {len(data)}")
    print(f"no_disease: {counts[NO_DISEASE]}")
    print(f"cardiovascular: {counts[CARDIO]}")
    print(f"cerebrovascular: {counts[CEREBRO]}")
    print(f"vascular (positive): {counts[CARDIO] + counts[CEREBRO]}")
    print(f"recent marker present: {markers}")


def _vocab_paths(checkpoint: Path) -> tuple[Path, Path]:
    return (checkpoint.with_name(checkpoint.name + ".diag.vocab"),
            checkpoint.with_name(checkpoint.name + ".med.vocab"))


def _scores_jsonl(patients, pb, pm) -> str:
    lines = []
    for p, b, m in zip(patients, pb, pm):
        row = {"patient_id": p.patient_id, "p_binary": float(b), "p_multi": [float(x) for x in m]}
        lines.append(json.dumps(row) + "\n")
    return "".join(lines)


def cmd_train(v: dict) -> None:
    model_cfg = _model_config(v, v["arch"], v["reduce"])
    train_cfg = _train_config(v)
    data = read_records(v["data"])
    if len(data) < 10:
        raise UsageError("training needs at least 10 records")
    train_set, test_set = split_ten_sets(data, v["seed"], n_sets=1)[0]
    if train_cfg.batch_size > len(train_set):
        raise UsageError(f"--batch-size {train_cfg.batch_size} exceeds {len(train_set)} training records")
    vocabs = build_vocab(train_set)
    model_cfg = dataclasses.replace(model_cfg, diag_vocab_size=len(vocabs[0]),
                                    med_vocab_size=len(vocabs[1]))
    model, history = train(MehpanModel(model_cfg), train_set, vocabs, train_cfg)

    out = Path(v["out"])
    diag_path, med_path = _vocab_paths(out)
    tmp_ckpt = out.with_name(f".{out.name}.ckpt")
    try:
        save_checkpoint(model, tmp_ckpt)
        staged: dict[Path, str | bytes] = {out: tmp_ckpt.read_bytes()}
    finally:
        if tmp_ckpt.exists():
            tmp_ckpt.unlink()
    for path, vocab in ((diag_path, vocabs[0]), (med_path, vocabs[1])):
        staged[path] = "".join(f"{vocab.token(i)}\t{i}\n" for i in range(len(vocab)))
    staged[out.with_name(out.name + ".log.jsonl")] = "".join(
        json.dumps(dataclasses.asdict(r)) + "\n" for r in history
    )
    if v["scores"]:
        pb, pm = predict(model, data, vocabs)
        staged[Path(v["scores"])] = _scores_jsonl(data, pb, pm)
    _commit(staged)

    pb, _ = predict(model, test_set, vocabs)
    labels = np.array([p.label_binary for p in test_set])
    m = binary_metrics(pb, labels)
    held_out_auc = auc(pb, labels) if 0 < labels.sum() < len(labels) else float("nan")
    for r in history:
        print(f"epoch {r.epoch}: loss {r.mean_loss:.5f} ({r.seconds:.2f}s)")
    print(f"held-out: precision {m.precision:.5f} recall {m.recall:.5f} "
          f"f1 {m.f1:.5f} auc {held_out_auc:.5f}")


def _parse_models(text: str | None) -> list[tuple[str, str | None]]:
    if not text:
        return [("rnn", None)]
    out = []
    for item in text.split(","):
        item = item.strip()
        arch, _, reduce = item.partition(":")
        out.append((arch, reduce or None))
    return out


def cmd_eval(v: dict) -> None:
    configs = [_model_config(v, arch, reduce) for arch, reduce in _parse_models(v["model"])]
    train_cfg = _train_config(v)
    data = read_records(v["data"])
    try:
        split_ten_sets(data, v["seed"], n_sets=1)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    reports = [evaluate_protocol(c, data, v["seed"], train_cfg, n_splits=v["splits"]) for c in configs]
    reports += [evaluate_baseline(b, data, v["seed"], n_splits=v["splits"])
                for b in (MajorityBaseline, LogisticBaseline)]
    prefix = v["out"]
    table = format_table(reports)
    _commit({
        Path(prefix + ".jsonl"): "".join(r.to_jsonl() for r in reports),
        Path(prefix + ".timing.jsonl"): "".join(
            json.dumps({"model": r.name, "split": row.split,
                        "running_time_seconds": row.running_time_seconds}) + "\n"
            for r in reports for row in [*r.rows, r.mean]
        ),
        Path(prefix + ".table.txt"): table,
    })
    print(table, end="")


def cmd_predict(v: dict) -> None:
    ckpt = Path(v["checkpoint"])
    default_diag, default_med = _vocab_paths(ckpt)
    vocabs = (Vocab.load(v["diag-vocab"] or default_diag), Vocab.load(v["med-vocab"] or default_med))
    model = load_checkpoint(ckpt)
    c = model.config
    if len(vocabs[0]) != c.diag_vocab_size or len(vocabs[1]) != c.med_vocab_size:
        raise ConfigError(
            f"vocab sizes {len(vocabs[0])}/{len(vocabs[1])} do not match checkpoint "
            f"{c.diag_vocab_size}/{c.med_vocab_size}"
        )
    data = read_records(v["data"])
    pb, pm = predict(model, data, vocabs)
    _commit({Path(v["out"]): _scores_jsonl(data, pb, pm)})
    print(f"scored {len(data)} patients")


HANDLERS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        values = resolve(ns.command, ns)
        HANDLERS[ns.command](values)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mehpan {ns.command}: error: {exc}", file=sys.stderr)
        return 2
    except (RecordError, CheckpointError, ConfigError, ValueError, OSError) as exc:
        print(f"mehpan {ns.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
