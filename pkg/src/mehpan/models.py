"""Recurrent and convolutional attention models, their loss and checkpoints."""

from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Batch, KIND_VOCAB, TYPE_VOCAB
from .layers import (
    AttentionFFN,
    BiGRU,
    Dense,
    Embedding,
    GateAttention,
    GluConv,
    Module,
    attention_context,
    joint_embed,
    reduce_time,
)

ARCHITECTURES = ("rnn", "conv")
REDUCTIONS = ("sum", "weighted_sum", "last_step")
PROB_EPS = 1e-7


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    architecture: str = "rnn"
    reduction_mode: str | None = None
    diag_vocab_size: int = 2
    med_vocab_size: int = 2
    diag_embed: int = 16
    kind_embed: int = 4
    med_embed: int = 16
    type_embed: int = 4
    hidden: int = 16
    aux_hidden: int = 8
    conv_width: int = 3
    conv_layers: int = 2
    attention_hidden: int = 16
    dense_widths: tuple[int, int] = (32, 16)
    max_diag_len: int = 30
    max_med_len: int = 20
    loss_weights: tuple[float, float] = (1.0, 1.0)
    seed: int = 0

    def validate(self) -> "ModelConfig":
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}")
        if self.architecture == "conv":
            if self.reduction_mode not in REDUCTIONS:
                raise ConfigError(f"conv models need reduction_mode in {REDUCTIONS}")
        elif self.reduction_mode is not None:
            raise ConfigError("reduction_mode applies only to the conv architecture")
        widths = (self.diag_embed, self.kind_embed, self.med_embed, self.type_embed, self.hidden,
                  self.aux_hidden, self.conv_layers, self.attention_hidden, *self.dense_widths,
                  self.max_diag_len, self.max_med_len)
        if any(int(w) < 1 for w in widths):
            raise ConfigError("all widths and lengths must be >= 1")
        if len(self.dense_widths) != 2:
            raise ConfigError("the trunk has exactly two dense layers")
        if self.conv_width < 1 or self.conv_width % 2 == 0:
            raise ConfigError("conv_width must be odd")
        if self.diag_vocab_size < 2 or self.med_vocab_size < 2:
            raise ConfigError("vocabulary sizes must include padding and unknown slots")
        if len(self.loss_weights) != 2 or any(w < 0 for w in self.loss_weights):
            raise ConfigError("loss_weights must be two nonnegative numbers")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dense_widths"] = list(self.dense_widths)
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        d = dict(d)
        for key in ("dense_widths", "loss_weights"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d).validate()


class RecurrentStream(Module):
    """Embedding -> bidirectional GRU -> attention context for one input stream."""

    def __init__(self, vocab: int, embed: int, with_duration: bool, hidden: int, att: int, rng):
        self.with_duration = with_duration
        self.embedding = Embedding(vocab, embed, rng)
        d = embed + int(with_duration)
        self.gru = BiGRU(d, hidden, rng)
        self.attention = AttentionFFN(d, self.gru.out_dim, att, rng)
        self.out_dim = self.gru.out_dim

    def embed(self, idx, dur) -> Tensor:
        e = self.embedding(idx)
        return joint_embed(e, Tensor(dur, dtype=e.dtype)) if self.with_duration else e

    def __call__(self, idx, dur, mask) -> Tensor:
        x = self.embed(idx, dur)
        states = self.gru(x, mask)
        return attention_context(self.attention, x, states, mask, allow_empty=True)


class ConvStream(Module):
    """Embedding -> stacked GLU convolutions -> time reduction -> gated context."""

    def __init__(self, vocab, embed, with_duration, hidden, att, width, layers, reduction, rng):
        self.with_duration = with_duration
        self.reduction = reduction
        self.embedding = Embedding(vocab, embed, rng)
        d = embed + int(with_duration)
        self.convs = [GluConv(d if i == 0 else hidden, hidden, width, rng) for i in range(layers)]
        self.attention = GateAttention(d, hidden, att, rng)
        self.out_dim = hidden

    embed = RecurrentStream.embed

    def __call__(self, idx, dur, mask) -> Tensor:
        x = self.embed(idx, dur)
        h = x
        for conv in self.convs:
            # padded positions stay zero so deeper layers see true zero padding
            h = conv(h, mask)
        reduced = reduce_time(h, self.reduction, mask, allow_empty=True)
        reduced_emb = reduce_time(x, self.reduction, mask, allow_empty=True)
        return self.attention(reduced_emb, reduced)


class MehpanModel(Module):
    """Four streams (diagnosis code, kind, medication code, type), a two-layer
    trunk and independent binary and three-class heads."""

    def __init__(self, config: ModelConfig):
        self.config = config.validate()
        c = config
        rng = np.random.default_rng(c.seed)
        if c.architecture == "rnn":
            def stream(vocab, embed, dur, hidden):
                return RecurrentStream(vocab, embed, dur, hidden, c.attention_hidden, rng)
        else:
            def stream(vocab, embed, dur, hidden):
                return ConvStream(vocab, embed, dur, hidden, c.attention_hidden,
                                  c.conv_width, c.conv_layers, c.reduction_mode, rng)
        self.diag_code = stream(c.diag_vocab_size, c.diag_embed, True, c.hidden)
        self.diag_kind = stream(len(KIND_VOCAB), c.kind_embed, False, c.aux_hidden)
        self.med_code = stream(c.med_vocab_size, c.med_embed, True, c.hidden)
        self.med_type = stream(len(TYPE_VOCAB), c.type_embed, False, c.aux_hidden)
        width = sum(s.out_dim for s in self.streams())
        self.dense1 = Dense(width, c.dense_widths[0], rng, "tanh")
        self.dense2 = Dense(c.dense_widths[0], c.dense_widths[1], rng, "tanh")
        self.binary_head = Dense(c.dense_widths[1], 1, rng)
        self.multi_head = Dense(c.dense_widths[1], 3, rng)

    def streams(self):
        return (self.diag_code, self.diag_kind, self.med_code, self.med_type)

    @property
    def context_width(self) -> int:
        return sum(s.out_dim for s in self.streams())

    def contexts(self, batch: Batch) -> list[Tensor]:
        return [
            self.diag_code(batch.diag_code_idx, batch.diag_dur, batch.diag_mask),
            self.diag_kind(batch.diag_kind_idx, None, batch.diag_mask),
            self.med_code(batch.med_code_idx, batch.med_dur, batch.med_mask),
            self.med_type(batch.med_type_idx, None, batch.med_mask),
        ]

    def __call__(self, batch: Batch) -> tuple[Tensor, Tensor]:
        self._check_batch(batch)
        h = ad.concat(self.contexts(batch), axis=1)
        h = self.dense2(self.dense1(h))
        logit = self.binary_head(h)
        p_binary = ad.sigmoid(logit.reshape((logit.shape[0],)))
        p_multi = ad.softmax(self.multi_head(h), axis=1)
        return p_binary, p_multi

    def _check_batch(self, batch: Batch) -> None:
        c = self.config
        if batch.diag_code_idx.size and batch.diag_code_idx.max() >= c.diag_vocab_size:
            raise ConfigError("batch holds diagnosis indices beyond the model vocabulary")
        if batch.med_code_idx.size and batch.med_code_idx.max() >= c.med_vocab_size:
            raise ConfigError("batch holds medication indices beyond the model vocabulary")
        if batch.diag_mask.shape[1] > c.max_diag_len or batch.med_mask.shape[1] > c.max_med_len:
            # padding beyond the configured length is harmless; real steps are not
            if batch.diag_mask[:, c.max_diag_len:].any() or batch.med_mask[:, c.max_med_len:].any():
                raise ConfigError("batch sequences exceed the model's maximum lengths")


def forward_rnn(model: MehpanModel, batch: Batch) -> tuple[Tensor, Tensor]:
    if model.config.architecture != "rnn":
        raise ConfigError("forward_rnn needs an rnn model")
    return model(batch)


def forward_conv(model: MehpanModel, batch: Batch) -> tuple[Tensor, Tensor]:
    if model.config.architecture != "conv":
        raise ConfigError("forward_conv needs a conv model")
    return model(batch)


def loss(p_binary: Tensor, p_multi: Tensor, y_binary, y_multi, weights=(1.0, 1.0)) -> Tensor:
    """Weighted binary + three-class cross-entropy, averaged over the batch."""
    y_binary = np.asarray(y_binary)
    y_multi = np.asarray(y_multi)
    if np.any((y_binary != 0) & (y_binary != 1)):
        raise ValueError("binary labels must be 0 or 1")
    if np.any((y_multi < 0) | (y_multi > 2)):
        raise ValueError("multi-class labels must be 0, 1 or 2")
    if np.any(y_binary != (y_multi != 0)):
        raise ValueError("binary and multi-class labels disagree")
    n = len(y_binary)
    dt = p_binary.dtype
    pb = ad.clip(p_binary, PROB_EPS, 1 - PROB_EPS)
    yb = Tensor(y_binary.astype(dt))
    bce = -(yb * ad.log(pb) + (1.0 - yb) * ad.log(1.0 - pb)).sum() * (1.0 / n)
    pm = ad.clip(p_multi, PROB_EPS, 1 - PROB_EPS)
    onehot = np.zeros(p_multi.shape, dtype=dt)
    onehot[np.arange(n), y_multi] = 1
    ce = -(ad.log(pm) * Tensor(onehot)).sum() * (1.0 / n)
    wb, wm = weights
    return bce * float(wb) + ce * float(wm)


def batch_loss(model: MehpanModel, batch: Batch) -> Tensor:
    pb, pm = model(batch)
    return loss(pb, pm, batch.y_binary, batch.y_multi, model.config.loss_weights)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"MEHP"
FORMAT_VERSION = 1


def save_checkpoint(model: MehpanModel, path) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", FORMAT_VERSION))
    _write_str(buf, json.dumps(model.config.to_dict(), sort_keys=True))
    for name, p in model.named_parameters():
        _write_str(buf, name)
        buf.write(struct.pack("<I", p.ndim))
        buf.write(struct.pack(f"<{p.ndim}I", *p.shape))
        buf.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path, expect_architecture: str | None = None) -> MehpanModel:
    raw = Path(path).read_bytes()
    buf = io.BytesIO(raw)
    if _read(buf, 4) != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic bytes")
    (version,) = struct.unpack("<H", _read(buf, 2))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        config = ModelConfig.from_dict(json.loads(_read_str(buf)))
    except (json.JSONDecodeError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"bad embedded config: {exc}") from None
    if expect_architecture is not None and config.architecture != expect_architecture:
        raise ConfigError(
            f"checkpoint holds a {config.architecture} model, expected {expect_architecture}"
        )
    model = MehpanModel(config)
    params = dict(model.named_parameters())
    loaded: dict[str, np.ndarray] = {}
    while buf.tell() < len(raw):
        name = _read_str(buf)
        (rank,) = struct.unpack("<I", _read(buf, 4))
        shape = struct.unpack(f"<{rank}I", _read(buf, 4 * rank))
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(_read(buf, 4 * count), dtype="<f4").reshape(shape)
        if name not in params:
            raise CheckpointError(f"unexpected parameter {name!r}")
        if tuple(shape) != params[name].shape:
            raise CheckpointError(
                f"parameter {name!r} has shape {shape}, config implies {params[name].shape}"
            )
        loaded[name] = data.astype(np.float32)
    missing = set(params) - set(loaded)
    if missing:
        raise CheckpointError(f"checkpoint truncated: missing {sorted(missing)[:3]}")
    for name, data in loaded.items():
        params[name].data = data
    return model


def _write_str(buf, s: str) -> None:
    b = s.encode("utf-8")
    buf.write(struct.pack("<I", len(b)))
    buf.write(b)


def _read(buf, n: int) -> bytes:
    b = buf.read(n)
    if len(b) != n:
        raise CheckpointError("checkpoint truncated")
    return b


def _read_str(buf) -> str:
    (n,) = struct.unpack("<I", _read(buf, 4))
    try:
        return _read(buf, n).decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointError("checkpoint string is not UTF-8") from None
