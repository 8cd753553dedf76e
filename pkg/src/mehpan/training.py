"""Adam, the training loop, metrics and the ten-split evaluation protocol."""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .autodiff import Tensor
from .data import PatientHistory, Vocab, build_vocab, make_batch, split_ten_sets
from .models import MehpanModel, ModelConfig, batch_loss

log = logging.getLogger(__name__)


class Adam:
    """Bias-corrected Adam over a fixed list of parameters."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        """Apply one update from the parameters' ``.grad`` and clear them."""
        self.step_count += 1
        t = self.step_count
        c1 = 1 - self.beta1**t
        c2 = 1 - self.beta2**t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if g.shape != p.shape:
                raise ad.ShapeError(f"gradient {g.shape} for parameter {p.shape}")
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
            p.grad = None


def adam_step(state: Adam, params=None, grads=None) -> None:
    if params is not None and grads is not None:
        for p, g in zip(params, grads):
            p.grad = g
    state.step()


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("need epochs >= 0, batch_size >= 1, learning_rate > 0")
        return self


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    seconds: float


def train(
    model: MehpanModel,
    train_data: Sequence[PatientHistory],
    vocabs: tuple[Vocab, Vocab],
    cfg: TrainConfig = TrainConfig(),
    on_epoch=None,
) -> tuple[MehpanModel, list[EpochRecord]]:
    """Seeded mini-batch Adam on the joint binary + three-class loss.

    ``on_epoch(record, model)`` is called after every epoch, outside the
    timed region, e.g. to track held-out AUC.
    """
    cfg.validate()
    if not train_data:
        raise ValueError("training data is empty")
    if cfg.batch_size > len(train_data):
        raise ValueError(f"batch size {cfg.batch_size} exceeds {len(train_data)} training patients")
    c = model.config
    full = make_batch(train_data, vocabs, c.max_diag_len, c.max_med_len)
    opt = Adam(model.parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    history = []
    n = len(full)
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        order = rng.permutation(n)
        total, count = 0.0, 0
        for lo in range(0, n, cfg.batch_size):
            batch = full.take(order[lo : lo + cfg.batch_size]).trimmed()
            value = batch_loss(model, batch)
            ad.backward(value)
            opt.step()
            total += float(value.data) * len(batch)
            count += len(batch)
        rec = EpochRecord(epoch, total / count, time.perf_counter() - start)
        log.debug("epoch %d loss %.5f (%.2fs)", rec.epoch, rec.mean_loss, rec.seconds)
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec, model)
    return model, history


def predict(
    model: MehpanModel,
    patients: Sequence[PatientHistory],
    vocabs: tuple[Vocab, Vocab],
    batch_size: int = 256,
) -> tuple[np.ndarray, np.ndarray]:
    """Binary probabilities ``[n]`` and three-class probabilities ``[n, 3]``."""
    c = model.config
    pb, pm = [], []
    with ad.no_grad():
        for lo in range(0, len(patients), batch_size):
            batch = make_batch(patients[lo : lo + batch_size], vocabs, c.max_diag_len, c.max_med_len)
            b, m = model(batch.trimmed())
            pb.append(b.data)
            pm.append(m.data)
    if not pb:
        return np.zeros(0, np.float32), np.zeros((0, 3), np.float32)
    return np.concatenate(pb), np.concatenate(pm)


# ---------------------------------------------------------------- metrics


@dataclass
class BinaryMetrics:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int


def binary_metrics(scores, labels, threshold: float = 0.5) -> BinaryMetrics:
    """Precision/recall/F1 for the positive (vascular) class; score >= threshold is positive."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pred = scores >= threshold
    tp = int(np.sum(pred & labels))
    fp = int(np.sum(pred & ~labels))
    fn = int(np.sum(~pred & labels))
    tn = int(np.sum(~pred & ~labels))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return BinaryMetrics(precision, recall, f1, tp, fp, tn, fn)


def auc(scores, labels) -> float:
    """Rank (Mann-Whitney) AUC with ties counted as one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative examples")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


# ---------------------------------------------------------------- baselines


class MajorityBaseline:
    """Always predicts the majority class with a constant score."""

    name = "Majority class"

    def fit(self, patients: Sequence[PatientHistory]) -> "MajorityBaseline":
        pos = np.mean([p.label_binary for p in patients])
        self.score = 1.0 if pos > 0.5 else 0.0
        return self

    def predict(self, patients: Sequence[PatientHistory]) -> np.ndarray:
        return np.full(len(patients), self.score)


class LogisticBaseline:
    """L2 logistic regression on binary bag-of-codes (diagnosis and medication)."""

    name = "Logistic (bag of codes)"

    def __init__(self, C: float = 1.0):
        self.C = C

    def _features(self, patients):
        from scipy.sparse import csr_matrix

        rows, cols = [], []
        n_diag = len(self.vocabs[0])
        for r, p in enumerate(patients):
            idx = set(self.vocabs[0].encode(p.diag_codes))
            idx |= {n_diag + i for i in self.vocabs[1].encode(p.med_codes)}
            rows.extend([r] * len(idx))
            cols.extend(sorted(idx))
        shape = (len(patients), n_diag + len(self.vocabs[1]))
        return csr_matrix((np.ones(len(rows)), (rows, cols)), shape=shape)

    def fit(self, patients: Sequence[PatientHistory]) -> "LogisticBaseline":
        from sklearn.linear_model import LogisticRegression

        self.vocabs = build_vocab(patients)
        y = np.array([p.label_binary for p in patients])
        self.clf = LogisticRegression(C=self.C, max_iter=1000)
        self.clf.fit(self._features(patients), y)
        return self

    def predict(self, patients: Sequence[PatientHistory]) -> np.ndarray:
        return self.clf.predict_proba(self._features(patients))[:, 1]


# ---------------------------------------------------------------- protocol

METRIC_FIELDS = ("precision", "recall", "f1", "auc")
COUNT_FIELDS = ("tp", "fp", "tn", "fn")


@dataclass
class SplitMetrics:
    split: int | str
    precision: float
    recall: float
    f1: float
    auc: float
    running_time_seconds: float
    tp: int
    fp: int
    tn: int
    fn: int

    def to_dict(self, timing: bool = True) -> dict:
        d = dataclasses.asdict(self)
        if not timing:
            del d["running_time_seconds"]
        return d


@dataclass
class MetricsReport:
    name: str
    rows: list[SplitMetrics]
    mean: SplitMetrics = field(init=False)

    def __post_init__(self):
        if not self.rows:
            raise ValueError("a report needs at least one split")
        self.mean = SplitMetrics(
            "mean",
            *(float(np.mean([getattr(r, f) for r in self.rows])) for f in METRIC_FIELDS),
            float(np.mean([r.running_time_seconds for r in self.rows])),
            # confusion counts summed over the splits
            *(int(sum(getattr(r, f) for r in self.rows)) for f in COUNT_FIELDS),
        )

    def to_jsonl(self, timing: bool = False) -> str:
        """One object per split plus the mean.  Timing is left out by default
        so that reruns with the same seeds are byte-identical."""
        lines = []
        for r in [*self.rows, self.mean]:
            lines.append(json.dumps({"model": self.name, **r.to_dict(timing)}) + "\n")
        return "".join(lines)


def score_split(name_split: int, scores: np.ndarray, labels: np.ndarray, seconds: float) -> SplitMetrics:
    m = binary_metrics(scores, labels)
    return SplitMetrics(name_split, m.precision, m.recall, m.f1, auc(scores, labels), seconds,
                        m.tp, m.fp, m.tn, m.fn)


def _run_split(args) -> SplitMetrics:
    k, train_set, test_set, model_cfg, train_cfg = args
    vocabs = build_vocab(train_set)
    cfg = dataclasses.replace(model_cfg, diag_vocab_size=len(vocabs[0]), med_vocab_size=len(vocabs[1]))
    model = MehpanModel(cfg)
    start = time.perf_counter()
    train(model, train_set, vocabs, train_cfg)
    seconds = time.perf_counter() - start
    scores, _ = predict(model, test_set, vocabs)
    labels = np.array([p.label_binary for p in test_set])
    return score_split(k, scores, labels, seconds)


def _run_baseline_split(args) -> SplitMetrics:
    k, train_set, test_set, baseline_cls = args
    start = time.perf_counter()
    model = baseline_cls().fit(train_set)
    seconds = time.perf_counter() - start
    labels = np.array([p.label_binary for p in test_set])
    return score_split(k, model.predict(test_set), labels, seconds)


def model_name(cfg: ModelConfig) -> str:
    if cfg.architecture == "rnn":
        return "R-MeHPAN"
    return f"C-MeHPAN ({cfg.reduction_mode})"


def _threads(threads: int | None) -> int:
    if threads is None:
        threads = int(os.environ.get("MEHPAN_THREADS", "1"))
    return max(1, threads)


def _map(fn, jobs, threads):
    if threads == 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, jobs))


def evaluate_protocol(
    model_cfg: ModelConfig,
    data: Sequence[PatientHistory],
    seed: int,
    train_cfg: TrainConfig | None = None,
    n_splits: int = 10,
    threads: int | None = None,
) -> MetricsReport:
    """Train and test on each stratified 80/20 split; vocabularies come from
    the training side only.  Running time is training wall time."""
    train_cfg = train_cfg or TrainConfig(seed=seed)
    splits = split_ten_sets(data, seed, n_sets=n_splits)
    jobs = [(k, tr, te, model_cfg, dataclasses.replace(train_cfg, seed=train_cfg.seed + k))
            for k, (tr, te) in enumerate(splits)]
    rows = _map(_run_split, jobs, _threads(threads))
    return MetricsReport(model_name(model_cfg), rows)


def evaluate_baseline(
    baseline_cls, data: Sequence[PatientHistory], seed: int, n_splits: int = 10,
    threads: int | None = None,
) -> MetricsReport:
    splits = split_ten_sets(data, seed, n_sets=n_splits)
    jobs = [(k, tr, te, baseline_cls) for k, (tr, te) in enumerate(splits)]
    return MetricsReport(baseline_cls.name, _map(_run_baseline_split, jobs, _threads(threads)))


TABLE_COLUMNS = ("Running time (/min)", "Precision", "Recall", "F1-measure", "AUC")


def format_table(reports: Sequence[MetricsReport]) -> str:
    """Aligned plain-text comparison of mean metrics, one row per model."""
    name_w = max([len("Model")] + [len(r.name) for r in reports])
    head = "Model".ljust(name_w) + " | " + " | ".join(TABLE_COLUMNS)
    lines = [head, "-" * len(head)]
    for r in reports:
        m = r.mean
        vals = (m.running_time_seconds / 60.0, m.precision, m.recall, m.f1, m.auc)
        cells = [f"{v:.5f}".rjust(len(col)) for v, col in zip(vals, TABLE_COLUMNS)]
        lines.append(r.name.ljust(name_w) + " | " + " | ".join(cells))
    return "\n".join(lines) + "\n"
