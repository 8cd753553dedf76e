"""Patient histories, duration features, vocabularies, batching and I/O.

Also holds the synthetic record generator used in place of real hospital
data.  Its class signal is a *recent* marker diagnosis: positives receive a
class-specific marker code dated shortly before their last visit, while any
patient may carry the same codes from long ago.  Code presence alone is
therefore a weak predictor and the duration channel carries the rest.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DIAG_KINDS = ("O", "I", "E")  # outpatient, inpatient, emergency
MED_TYPES = ("P", "J", "S")  # pill, injection, sap
PAD, UNK = 0, 1

NO_DISEASE, CARDIO, CEREBRO = 0, 1, 2
# class counts of the original cohort: 50,720 / 5,704 / 6,454 of 62,878
DEFAULT_CLASS_PROBS = (50720 / 62878, 5704 / 62878, 6454 / 62878)


class RecordError(ValueError):
    pass


@dataclass
class PatientHistory:
    patient_id: str
    diag_codes: list[str]
    diag_dates: list[int]
    diag_kinds: list[str]
    med_codes: list[str]
    med_periods: list[int]
    med_types: list[str]
    label_multi: int

    @property
    def label_binary(self) -> int:
        return int(self.label_multi != NO_DISEASE)

    @property
    def last_date(self) -> int:
        return self.diag_dates[-1]

    def validate(self) -> "PatientHistory":
        n = len(self.diag_codes)
        if n == 0:
            raise RecordError("diag_codes: diagnosis history is empty")
        if len(self.diag_dates) != n:
            raise RecordError(f"diag_dates: length {len(self.diag_dates)} != diag_codes length {n}")
        if len(self.diag_kinds) != n:
            raise RecordError(f"diag_kinds: length {len(self.diag_kinds)} != diag_codes length {n}")
        if any(b < a for a, b in zip(self.diag_dates, self.diag_dates[1:])):
            raise RecordError("diag_dates: dates must be nondecreasing")
        if any(k not in DIAG_KINDS for k in self.diag_kinds):
            raise RecordError(f"diag_kinds: values must be among {DIAG_KINDS}")
        m = len(self.med_codes)
        if len(self.med_periods) != m:
            raise RecordError(f"med_periods: length {len(self.med_periods)} != med_codes length {m}")
        if len(self.med_types) != m:
            raise RecordError(f"med_types: length {len(self.med_types)} != med_codes length {m}")
        if any(p < 0 for p in self.med_periods):
            raise RecordError("med_periods: periods must be nonnegative")
        if any(t not in MED_TYPES for t in self.med_types):
            raise RecordError(f"med_types: values must be among {MED_TYPES}")
        if self.label_multi not in (NO_DISEASE, CARDIO, CEREBRO):
            raise RecordError(f"label_multi: {self.label_multi!r} not in 0, 1, 2")
        return self

    def to_dict(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "diag_codes": list(self.diag_codes),
            "diag_dates": [int(d) for d in self.diag_dates],
            "diag_kinds": list(self.diag_kinds),
            "med_codes": list(self.med_codes),
            "med_periods": [int(p) for p in self.med_periods],
            "med_types": list(self.med_types),
            "label_multi": int(self.label_multi),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "PatientHistory":
        fields = ("patient_id", "diag_codes", "diag_dates", "diag_kinds",
                  "med_codes", "med_periods", "med_types", "label_multi")
        for name in fields:
            if name not in obj:
                raise RecordError(f"{name}: missing")
        for name in fields[1:7]:
            if not isinstance(obj[name], list):
                raise RecordError(f"{name}: expected an array")
        for name in ("diag_dates", "med_periods", "label_multi"):
            vals = obj[name] if isinstance(obj[name], list) else [obj[name]]
            if any(isinstance(v, bool) or not isinstance(v, int) for v in vals):
                raise RecordError(f"{name}: expected integers")
        for name in ("diag_codes", "med_codes", "diag_kinds", "med_types"):
            if any(not isinstance(v, str) for v in obj[name]):
                raise RecordError(f"{name}: expected strings")
        return cls(**{name: obj[name] for name in fields}).validate()


# ---------------------------------------------------------------- features


def compute_diag_duration(dates: Sequence[int], i: int) -> float:
    """max(log(T_last - T_i + 1), 1), natural log, T_last the final date."""
    return max(math.log(dates[-1] - dates[i] + 1), 1.0)


def compute_med_duration(period: int) -> float:
    """log(period + 1), natural log."""
    if period < 0:
        raise ValueError(f"medication period must be nonnegative, got {period}")
    return math.log(period + 1)


def diag_durations(dates: Sequence[int]) -> np.ndarray:
    d = np.asarray(dates, dtype=np.float64)
    return np.maximum(np.log(d[-1] - d + 1), 1.0)


def med_durations(periods: Sequence[int]) -> np.ndarray:
    p = np.asarray(periods, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("medication periods must be nonnegative")
    return np.log(p + 1)


# ---------------------------------------------------------------- vocabularies


class Vocab:
    """Frozen token -> index map; 0 is padding and 1 the unknown token."""

    PAD_TOKEN = "<pad>"
    UNK_TOKEN = "<unk>"

    def __init__(self, tokens: Iterable[str]):
        self._tokens = (self.PAD_TOKEN, self.UNK_TOKEN) + tuple(tokens)
        self._index = {tok: i for i, tok in enumerate(self._tokens)}
        if len(self._index) != len(self._tokens):
            raise ValueError("vocabulary tokens must be distinct")

    @classmethod
    def from_sequences(cls, seqs: Iterable[Sequence[str]]) -> "Vocab":
        seen: dict[str, None] = {}
        for seq in seqs:
            for tok in seq:
                seen.setdefault(tok, None)
        return cls(seen)

    def __len__(self) -> int:
        return len(self._tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self._tokens == other._tokens

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def index(self, token: str) -> int:
        return self._index.get(token, UNK)

    def token(self, index: int) -> str:
        return self._tokens[index]

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self._index.get(t, UNK) for t in tokens]

    def decode(self, indices: Sequence[int]) -> list[str]:
        return [self._tokens[i] for i in indices]

    def save(self, path) -> None:
        lines = [f"{tok}\t{i}\n" for i, tok in enumerate(self._tokens)]
        _atomic_write(path, "".join(lines))

    @classmethod
    def load(cls, path) -> "Vocab":
        tokens = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                tok, sep, idx = line.rpartition("\t")
                if not sep or not idx.isdigit() or int(idx) != len(tokens):
                    raise RecordError(f"{path}:{lineno}: expected 'token<TAB>{len(tokens)}'")
                tokens.append(tok)
        if tokens[:2] != [cls.PAD_TOKEN, cls.UNK_TOKEN]:
            raise RecordError(f"{path}: first entries must be {cls.PAD_TOKEN} and {cls.UNK_TOKEN}")
        return cls(tokens[2:])


def build_vocab(train: Sequence[PatientHistory]) -> tuple[Vocab, Vocab]:
    """Diagnosis and medication vocabularies in first-seen order."""
    if not train:
        raise ValueError("cannot build vocabularies from an empty training set")
    return (
        Vocab.from_sequences(p.diag_codes for p in train),
        Vocab.from_sequences(p.med_codes for p in train),
    )


KIND_VOCAB = Vocab(DIAG_KINDS)
TYPE_VOCAB = Vocab(MED_TYPES)
# kinds and types have no unknown slot in practice, but share the layout


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    diag_code_idx: np.ndarray  # [b, t] int64
    diag_kind_idx: np.ndarray
    diag_dur: np.ndarray  # [b, t, 1] float32
    diag_mask: np.ndarray  # [b, t] float32
    med_code_idx: np.ndarray
    med_type_idx: np.ndarray
    med_dur: np.ndarray
    med_mask: np.ndarray
    y_binary: np.ndarray  # [b] int64
    y_multi: np.ndarray

    def __len__(self) -> int:
        return len(self.y_multi)

    def take(self, rows) -> "Batch":
        return Batch(**{k: v[rows] for k, v in vars(self).items()})

    def trimmed(self) -> "Batch":
        """Drop trailing time steps that are padding for every row."""
        dl = max(int(self.diag_mask.sum(axis=1).max()), 1)
        ml = max(int(self.med_mask.sum(axis=1).max()), 1)
        out = {}
        for k, v in vars(self).items():
            if k.startswith("diag"):
                v = v[:, :dl]
            elif k.startswith("med"):
                v = v[:, :ml]
            out[k] = v
        return Batch(**out)

    def pad_to(self, diag_len: int, med_len: int) -> "Batch":
        """Append masked padding steps up to the given lengths."""
        out = {}
        for k, v in vars(self).items():
            target = diag_len if k.startswith("diag") else med_len if k.startswith("med") else None
            if target is not None:
                extra = target - v.shape[1]
                if extra < 0:
                    raise ValueError(f"{k} already longer than {target}")
                widths = [(0, 0), (0, extra)] + [(0, 0)] * (v.ndim - 2)
                v = np.pad(v, widths)
            out[k] = v
        return Batch(**out)


def make_batch(
    patients: Sequence[PatientHistory],
    vocabs: tuple[Vocab, Vocab],
    max_len: int,
    max_med_len: int | None = None,
) -> Batch:
    """Encode, truncate to the most recent events, and suffix-pad.

    Durations are computed on the full history before truncation, so T_last
    is always the patient's final visit.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    max_med_len = max_len if max_med_len is None else max_med_len
    if max_med_len < 1:
        raise ValueError("max_med_len must be >= 1")
    diag_vocab, med_vocab = vocabs
    b = len(patients)
    dci = np.zeros((b, max_len), dtype=np.int64)
    dki = np.zeros((b, max_len), dtype=np.int64)
    dd = np.zeros((b, max_len, 1), dtype=np.float32)
    dm = np.zeros((b, max_len), dtype=np.float32)
    mci = np.zeros((b, max_med_len), dtype=np.int64)
    mti = np.zeros((b, max_med_len), dtype=np.int64)
    md = np.zeros((b, max_med_len, 1), dtype=np.float32)
    mm = np.zeros((b, max_med_len), dtype=np.float32)
    yb = np.zeros(b, dtype=np.int64)
    ym = np.zeros(b, dtype=np.int64)
    for row, p in enumerate(patients):
        if not p.diag_codes:
            raise ValueError(f"patient {p.patient_id}: empty diagnosis history")
        dur = diag_durations(p.diag_dates)[-max_len:]
        n = len(dur)
        dci[row, :n] = diag_vocab.encode(p.diag_codes[-max_len:])
        dki[row, :n] = KIND_VOCAB.encode(p.diag_kinds[-max_len:])
        dd[row, :n, 0] = dur
        dm[row, :n] = 1
        if p.med_codes:
            mdur = med_durations(p.med_periods)[-max_med_len:]
            k = len(mdur)
            mci[row, :k] = med_vocab.encode(p.med_codes[-max_med_len:])
            mti[row, :k] = TYPE_VOCAB.encode(p.med_types[-max_med_len:])
            md[row, :k, 0] = mdur
            mm[row, :k] = 1
        yb[row] = p.label_binary
        ym[row] = p.label_multi
    return Batch(dci, dki, dd, dm, mci, mti, md, mm, yb, ym)


# ---------------------------------------------------------------- splits


def split_ten_sets(
    data: Sequence[PatientHistory], seed: int, n_sets: int = 10, test_fraction: float = 0.2
) -> list[tuple[list[PatientHistory], list[PatientHistory]]]:
    """Independent stratified 80/20 splits, one RNG stream per split.

    Stratification is over the three-way label; each class contributes
    ``round(0.2 * count)`` patients to the test side.
    """
    if len(data) < 10:
        raise ValueError(f"need at least 10 patients to split, got {len(data)}")
    labels = np.array([p.label_multi for p in data])
    classes, counts = np.unique(labels, return_counts=True)
    for c, n in zip(classes, counts):
        if n < 5:
            raise ValueError(f"class {c} has {n} members; at least 5 are needed to stratify")
    splits = []
    for k in range(n_sets):
        rng = np.random.default_rng([seed, k])
        test_rows = []
        for c in classes:
            rows = np.flatnonzero(labels == c)
            rng.shuffle(rows)
            test_rows.extend(rows[: int(round(test_fraction * len(rows)))])
        is_test = np.zeros(len(data), dtype=bool)
        is_test[test_rows] = True
        splits.append(
            ([p for p, t in zip(data, is_test) if not t], [p for p, t in zip(data, is_test) if t])
        )
    return splits


# ---------------------------------------------------------------- file I/O


def _atomic_write(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    try:
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def write_records(path, data: Sequence[PatientHistory]) -> None:
    lines = [json.dumps(p.validate().to_dict(), separators=(",", ":")) + "\n" for p in data]
    _atomic_write(path, "".join(lines))


def read_records(path) -> list[PatientHistory]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise RecordError(f"{path}:{lineno}: expected a JSON object")
            try:
                out.append(PatientHistory.from_dict(obj))
            except RecordError as exc:
                raise RecordError(f"{path}:{lineno}: {exc}") from None
    return out


# ---------------------------------------------------------------- synthetic data


@dataclass
class SynthConfig:
    n_patients: int = 1000
    n_diag_codes: int = 500
    n_med_codes: int = 1000
    markers_per_class: int = 5
    class_probs: tuple[float, float, float] = DEFAULT_CLASS_PROBS
    signal: float = 0.9
    min_diag_len: int = 8
    max_diag_len: int = 30
    max_med_len: int = 20
    empty_med_rate: float = 0.05
    stale_marker_rate: float = 0.5
    recent_window: int = 30  # days before the last visit
    stale_after: int = 365  # days before the last visit
    mean_visit_gap: int = 45
    mean_med_period: int = 30
    seed: int = 0

    def validate(self) -> "SynthConfig":
        if self.n_patients < 0:
            raise ValueError("n_patients must be >= 0")
        if len(self.class_probs) != 3 or any(p < 0 for p in self.class_probs):
            raise ValueError("class_probs must be three nonnegative numbers")
        if abs(sum(self.class_probs) - 1.0) > 1e-9:
            raise ValueError(f"class_probs sum to {sum(self.class_probs)!r}, not 1")
        if not 0.0 <= self.signal <= 1.0:
            raise ValueError("signal must lie in [0, 1]")
        if not 0.0 <= self.stale_marker_rate <= 1.0 or not 0.0 <= self.empty_med_rate <= 1.0:
            raise ValueError("rates must lie in [0, 1]")
        if not 1 <= self.min_diag_len <= self.max_diag_len:
            raise ValueError("need 1 <= min_diag_len <= max_diag_len")
        if self.max_med_len < 1 or self.markers_per_class < 1 or self.n_diag_codes < 1 or self.n_med_codes < 1:
            raise ValueError("lengths and code counts must be >= 1")
        if self.recent_window < 0 or self.stale_after <= self.recent_window:
            raise ValueError("need 0 <= recent_window < stale_after")
        if self.mean_visit_gap < 1 or self.mean_med_period < 1:
            raise ValueError("mean gaps must be >= 1 day")
        return self


def marker_codes(cfg: SynthConfig) -> dict[int, list[str]]:
    k = cfg.markers_per_class
    return {
        CARDIO: [f"I2{j:02d}" for j in range(k)],
        CEREBRO: [f"I6{j:02d}" for j in range(k)],
    }


def has_recent_marker(p: PatientHistory, cfg: SynthConfig) -> bool:
    """True when a marker code falls inside the recent window."""
    markers = {c for codes in marker_codes(cfg).values() for c in codes}
    return any(
        code in markers and p.last_date - date <= cfg.recent_window
        for code, date in zip(p.diag_codes, p.diag_dates)
    )


def generate_synthetic(cfg: SynthConfig) -> list[PatientHistory]:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    background = [f"D{j:04d}" for j in range(cfg.n_diag_codes)]
    meds = [f"M{j:04d}" for j in range(cfg.n_med_codes)]
    markers = marker_codes(cfg)
    all_markers = markers[CARDIO] + markers[CEREBRO]
    # skewed background frequencies, as with real code usage
    diag_p = rng.dirichlet(np.full(cfg.n_diag_codes, 0.5))
    med_p = rng.dirichlet(np.full(cfg.n_med_codes, 0.5))
    kind_p = (0.80, 0.15, 0.05)
    type_p = (0.80, 0.15, 0.05)

    out = []
    for pid in range(cfg.n_patients):
        label = int(rng.choice(3, p=cfg.class_probs))
        n = int(rng.integers(cfg.min_diag_len, cfg.max_diag_len + 1))
        gaps = rng.geometric(1.0 / cfg.mean_visit_gap, size=n - 1)
        dates = np.concatenate([[0], np.cumsum(gaps)]).astype(int)
        t_last = int(dates[-1])
        codes = [background[j] for j in rng.choice(cfg.n_diag_codes, size=n, p=diag_p)]
        kinds = [DIAG_KINDS[j] for j in rng.choice(3, size=n, p=kind_p)]
        events = list(zip(dates.tolist(), codes, kinds))

        # replace events rather than append, keeping the length distribution
        if rng.random() < cfg.stale_marker_rate:
            stale = [i for i, (d, _, _) in enumerate(events) if t_last - d >= cfg.stale_after]
            if stale:
                i = int(rng.choice(stale))
                events[i] = (events[i][0], all_markers[rng.integers(len(all_markers))], events[i][2])
        if label != NO_DISEASE and rng.random() < cfg.signal:
            date = t_last - int(rng.integers(0, cfg.recent_window + 1))
            code = markers[label][rng.integers(cfg.markers_per_class)]
            kind = DIAG_KINDS[int(rng.choice(3, p=kind_p))]
            slot = int(rng.integers(1, n)) if n > 1 else 0
            events.pop(slot)
            events.append((date, code, kind))
            events.sort(key=lambda e: e[0])
            if events[-1][0] != t_last:
                events[-1] = (t_last,) + events[-1][1:]

        if rng.random() < cfg.empty_med_rate:
            m = 0
        else:
            m = int(rng.integers(1, cfg.max_med_len + 1))
        med_codes = [meds[j] for j in rng.choice(cfg.n_med_codes, size=m, p=med_p)]
        periods = (rng.geometric(1.0 / cfg.mean_med_period, size=m) - 1).tolist()
        types = [MED_TYPES[j] for j in rng.choice(3, size=m, p=type_p)]

        out.append(
            PatientHistory(
                patient_id=f"P{pid:06d}",
                diag_codes=[e[1] for e in events],
                diag_dates=[int(e[0]) for e in events],
                diag_kinds=[e[2] for e in events],
                med_codes=med_codes,
                med_periods=[int(x) for x in periods],
                med_types=types,
                label_multi=label,
            ).validate()
        )
    return out
