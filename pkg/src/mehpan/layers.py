"""Trainable layers shared by the recurrent and convolutional models."""

from __future__ import annotations

import copy
from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


class Module:
    """Parameter container.  Attribute order fixes parameter names."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Deep copy with every parameter cast to ``dtype``."""
        clone = copy.deepcopy(self)
        for p in clone.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return clone


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(np.float32), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


class Embedding(Module):
    """Lookup table whose row 0 is the fixed all-zero padding vector."""

    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator):
        if vocab_size < 2 or dim < 1:
            raise ValueError("embedding needs vocab_size >= 2 and dim >= 1")
        self.vocab_size = vocab_size
        self.dim = dim
        w = (rng.uniform(-1.0, 1.0, size=(vocab_size, dim)) / np.sqrt(dim)).astype(np.float32)
        w[0] = 0
        self.weight = Tensor(w, requires_grad=True)

    def __call__(self, indices: np.ndarray) -> Tensor:
        return ad.embedding(self.weight, indices)


def embed_lookup(table: Embedding, indices: np.ndarray) -> Tensor:
    return table(indices)


def joint_embed(code_emb: Tensor, duration) -> Tensor:
    """Append the duration channel ``[b, t, 1]`` to a code embedding ``[b, t, d]``."""
    duration = ad.as_tensor(duration, dtype=code_emb.dtype)
    if duration.ndim == 2:
        duration = duration.reshape(duration.shape + (1,))
    if code_emb.shape[:2] != duration.shape[:2] or duration.shape[2] != 1:
        raise ShapeError(f"joint_embed: codes {code_emb.shape} vs durations {duration.shape}")
    return ad.concat([code_emb, duration], axis=2)


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, activation: str = "none"):
        if activation not in ("none", "relu", "tanh"):
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        self.W = _uniform(rng, (n_in, n_out), n_in)
        self.b = _zeros((n_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return dense(self.W, self.b, x, self.activation)


def dense(W: Tensor, b: Tensor, x: Tensor, activation: str = "none") -> Tensor:
    y = ad.matmul(x, W) + b
    if activation == "relu":
        return ad.relu(y)
    if activation == "tanh":
        return ad.tanh(y)
    if activation != "none":
        raise ValueError(f"unknown activation {activation!r}")
    return y


class GRUCell(Module):
    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator):
        if hidden < 1:
            raise ValueError("GRU hidden width must be >= 1")
        self.W_z = _uniform(rng, (n_in, hidden), n_in)
        self.W_r = _uniform(rng, (n_in, hidden), n_in)
        self.W_h = _uniform(rng, (n_in, hidden), n_in)
        self.U_z = _uniform(rng, (hidden, hidden), hidden)
        self.U_r = _uniform(rng, (hidden, hidden), hidden)
        self.U_h = _uniform(rng, (hidden, hidden), hidden)
        self.b_z = _zeros((hidden,))
        self.b_r = _zeros((hidden,))
        self.b_h = _zeros((hidden,))

    @property
    def hidden(self) -> int:
        return self.U_z.shape[0]

    @property
    def n_in(self) -> int:
        return self.W_z.shape[0]


def gru_step(cell: GRUCell, x_t: Tensor, h_prev: Tensor) -> Tensor:
    """One GRU update built from primitive ops.

    z = σ(x W_z + h U_z + b_z), r = σ(x W_r + h U_r + b_r),
    h~ = tanh(x W_h + (r ⊙ h) U_h + b_h), h' = (1 - z) ⊙ h + z ⊙ h~.
    """
    if x_t.ndim != 2 or x_t.shape[1] != cell.n_in:
        raise ShapeError(f"gru_step: input {x_t.shape} for cell with {cell.n_in} inputs")
    if h_prev.shape != (x_t.shape[0], cell.hidden):
        raise ShapeError(f"gru_step: hidden state {h_prev.shape}, expected ({x_t.shape[0]}, {cell.hidden})")
    z = ad.sigmoid(x_t @ cell.W_z + h_prev @ cell.U_z + cell.b_z)
    r = ad.sigmoid(x_t @ cell.W_r + h_prev @ cell.U_r + cell.b_r)
    cand = ad.tanh(x_t @ cell.W_h + (r * h_prev) @ cell.U_h + cell.b_h)
    return (1.0 - z) * h_prev + z * cand


def check_suffix_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeError(f"mask must be [batch, time], got {mask.shape}")
    if np.any(mask[:, 1:] > mask[:, :-1]):
        row = int(np.argwhere(mask[:, 1:] > mask[:, :-1])[0, 0])
        raise ValueError(f"padding must be a suffix (row {row} has a real step after padding)")
    return mask


def run_gru(cell: GRUCell, x: Tensor, mask: np.ndarray, reverse: bool = False) -> Tensor:
    return ad.gru_scan(
        x,
        mask,
        (cell.W_z, cell.W_r, cell.W_h),
        (cell.U_z, cell.U_r, cell.U_h),
        (cell.b_z, cell.b_r, cell.b_h),
        reverse=reverse,
    )


def bigru(cell_fwd: GRUCell, cell_bwd: GRUCell, x: Tensor, mask: np.ndarray) -> Tensor:
    """Bidirectional GRU over the unmasked prefix; output ``[b, t, 2*hidden]``."""
    mask = check_suffix_mask(mask)
    if x.ndim != 3 or mask.shape != x.shape[:2]:
        raise ShapeError(f"bigru: input {x.shape} vs mask {mask.shape}")
    fwd = run_gru(cell_fwd, x, mask)
    bwd = run_gru(cell_bwd, x, mask, reverse=True)
    return ad.concat([fwd, bwd], axis=2)


class BiGRU(Module):
    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator):
        self.fwd = GRUCell(n_in, hidden, rng)
        self.bwd = GRUCell(n_in, hidden, rng)

    @property
    def out_dim(self) -> int:
        return 2 * self.fwd.hidden

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        return bigru(self.fwd, self.bwd, x, mask)


class GluConv(Module):
    """Paired convolutions; the output is A ⊙ σ(B)."""

    def __init__(self, n_in: int, n_out: int, width: int, rng: np.random.Generator):
        if width % 2 == 0:
            raise ValueError(f"kernel width must be odd, got {width}")
        fan_in = width * n_in
        self.kernel_A = _uniform(rng, (width, n_in, n_out), fan_in)
        self.kernel_B = _uniform(rng, (width, n_in, n_out), fan_in)
        self.bias_A = _zeros((n_out,))
        self.bias_B = _zeros((n_out,))

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        return glu_conv(self, x, mask)


def glu_conv(block: GluConv, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """A ⊙ σ(B) with A, B the two convolution branches; masked steps are zeroed."""
    return ad.glu_conv1d(x, block.kernel_A, block.bias_A, block.kernel_B, block.bias_B, mask)


class AttentionFFN(Module):
    """Two-layer feedforward scorer with an input projection.

    ``project`` maps the embedded input (width ``d``) onto the state width
    ``h`` so the two can be multiplied elementwise.
    """

    def __init__(self, d: int, h: int, a: int, rng: np.random.Generator):
        self.P = _uniform(rng, (d, h), d)
        self.p = _zeros((h,))
        self.W1 = _uniform(rng, (h, a), h)
        self.b1 = _zeros((a,))
        self.w2 = _uniform(rng, (a, 1), a)
        self.b2 = _zeros((1,))

    def score(self, embedded: Tensor, states: Tensor) -> Tensor:
        """One logit per leading position: shape of ``states`` minus its last axis."""
        u = (embedded @ self.P + self.p) * states
        logit = ad.tanh(u @ self.W1 + self.b1) @ self.w2 + self.b2
        return logit.reshape(logit.shape[:-1])


def attention_weights(
    att: AttentionFFN, embedded: Tensor, states: Tensor, mask: np.ndarray, allow_empty: bool = False
) -> Tensor:
    mask = np.asarray(mask)
    if embedded.shape[:2] != states.shape[:2] or mask.shape != states.shape[:2]:
        raise ShapeError(
            f"attention: embedded {embedded.shape}, states {states.shape}, mask {mask.shape}"
        )
    if not allow_empty and np.any(mask.sum(axis=1) == 0):
        raise ValueError("attention over a sequence with every step masked")
    return ad.masked_softmax(att.score(embedded, states), mask, axis=1)


def attention_context(
    att: AttentionFFN, embedded: Tensor, states: Tensor, mask: np.ndarray, allow_empty: bool = False
) -> Tensor:
    """Attention-weighted sum of ``states`` over unmasked time steps.

    With ``allow_empty`` a fully masked row yields a zero context instead of
    raising.
    """
    w = attention_weights(att, embedded, states, mask, allow_empty)
    return (states * w.reshape(w.shape + (1,))).sum(axis=1)


def ramp_weights(mask: np.ndarray) -> np.ndarray:
    """w_t = t / (1 + 2 + ... + L) over the unmasked length L; zero beyond it."""
    mask = np.asarray(mask, dtype=np.float64)
    pos = np.cumsum(mask, axis=1) * mask
    total = pos.sum(axis=1, keepdims=True)
    return pos / np.where(total > 0, total, 1)


def uniform_weights(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    n = mask.sum(axis=1, keepdims=True)
    return mask / np.where(n > 0, n, 1)


def reduce_time(
    x: Tensor,
    mode: str,
    mask: np.ndarray,
    allow_empty: bool = False,
    weights_fn: Callable[[np.ndarray], np.ndarray] = ramp_weights,
) -> Tensor:
    """Collapse ``[b, t, f]`` to ``[b, f]`` by sum, weighted sum or last step."""
    mask = check_suffix_mask(mask)
    if x.ndim != 3 or mask.shape != x.shape[:2]:
        raise ShapeError(f"reduce_time: input {x.shape} vs mask {mask.shape}")
    lengths = mask.sum(axis=1).astype(int)
    if not allow_empty and np.any(lengths == 0):
        raise ValueError("reduce_time over a fully masked sequence")
    if mode == "sum":
        w = mask
    elif mode == "weighted_sum":
        w = weights_fn(mask)
    elif mode == "last_step":
        w = np.zeros(mask.shape)
        rows = np.nonzero(lengths)[0]
        w[rows, lengths[rows] - 1] = 1
    else:
        raise ValueError(f"unknown reduction mode {mode!r}")
    w = Tensor(np.asarray(w, dtype=x.dtype)[:, :, None])
    return (x * w).sum(axis=1)


class GateAttention(Module):
    """Scalar gate for a time-reduced conv representation.

    The reduced conv output ``r`` is multiplied elementwise with the projected,
    identically reduced embedded input; the two-layer scorer turns that into
    σ(logit) ∈ (0, 1), which scales ``r``.
    """

    def __init__(self, d: int, f: int, a: int, rng: np.random.Generator):
        self.ffn = AttentionFFN(d, f, a, rng)

    def __call__(self, reduced_emb: Tensor, reduced: Tensor) -> Tensor:
        gate = ad.sigmoid(self.ffn.score(reduced_emb, reduced))
        return reduced * gate.reshape(gate.shape + (1,))
