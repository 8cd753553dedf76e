"""Dense numpy tensors with reverse-mode automatic differentiation.

Every differentiable operation records a :class:`Node` that points back at
its inputs and carries the rule mapping the output gradient to input
gradients.  :func:`backward` gathers the nodes reachable from a scalar loss
into a :class:`Tape`, ordered by creation, and replays them in reverse.

Parameters and activations are float32.  Tensors built from float64 arrays
stay float64, which is what the finite-difference oracles in the tests use.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_seq = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    __slots__ = ("inputs", "backward_fn", "seq")

    def __init__(self, inputs: tuple, backward_fn: Callable, seq: int):
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.seq = seq


class Tensor:
    """An n-dimensional array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: Node | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _lift(a, b) -> tuple[Tensor, Tensor]:
    """Promote raw operands; python scalars follow the tensor's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    return a, b


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(tuple(inputs), backward_fn, next(_seq))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- tape


class Tape:
    """Nodes reachable from an output, in creation (topological) order."""

    def __init__(self, tensors: list[Tensor]):
        self.tensors = tensors

    @property
    def nodes(self) -> list[Node]:
        return [t.node for t in self.tensors]

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen: set[int] = set()
        found: list[Tensor] = []
        stack = [out]
        while stack:
            t = stack.pop()
            if t.node is None or id(t) in seen:
                continue
            seen.add(id(t))
            found.append(t)
            stack.extend(t.node.inputs)
        found.sort(key=lambda t: t.node.seq)
        return cls(found)

    def run_backward(self, out: Tensor, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(out): seed}
        for t in reversed(self.tensors):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            in_grads = t.node.backward_fn(g)
            for parent, pg in zip(t.node.inputs, in_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.node is None:
                    pg = pg.astype(parent.dtype, copy=False)
                    if parent.grad is None:
                        parent.grad = pg.copy()
                    else:
                        parent.grad += pg
                else:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that ``loss`` depends on.

    Gradients accumulate into existing ``.grad`` arrays, so callers zero them
    between steps.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    seed = np.ones_like(loss.data)
    if loss.node is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    Tape.from_output(loss).run_backward(loss, seed)


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = _lift(a, b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _lift(a, b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _lift(a, b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def grad_fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), grad_fn)


def div(a, b) -> Tensor:
    a, b = _lift(a, b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data

    def grad_fn(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    return _result(ad / bd, (a, b), grad_fn)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a`` of rank >= 1 and a matrix ``b``.

    Leading axes of ``a`` are treated as a batch, so ``[b, t, k] @ [k, n]``
    gives ``[b, t, n]``.
    """
    a, b = _lift(a, b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _result(ad @ bd, (a, b), grad_fn)


# ---------------------------------------------------------------- unary


def sigmoid(x: Tensor) -> Tensor:
    out = _sig(x.data)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0):
        raise DomainError("log of a nonpositive value")
    return _result(np.log(xd), (x,), lambda g: (g / xd,))


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return _result(np.maximum(xd, 0), (x,), lambda g: (g * (xd > 0),))


def maximum(x: Tensor, floor: float) -> Tensor:
    """Elementwise ``max(x, floor)``.

    The gradient passes where ``x >= floor``; ties count as passing.
    """
    xd = x.data
    keep = xd >= floor
    return _result(np.where(keep, xd, xd.dtype.type(floor)), (x,), lambda g: (g * keep,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return _result(np.clip(xd, lo, hi).astype(xd.dtype), (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------- reductions / shape


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), grad_fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from None
    return _result(out, (x,), lambda g: (g.reshape(old),))


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape

    def grad_fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(x.data[index]), (x,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise ShapeError(
                f"concat: {t.shape} does not match {ref} off axis {axis}"
            )
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, grad_fn)


# ---------------------------------------------------------------- softmax


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), grad_fn)


def masked_softmax(x: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax restricted to ``mask == 1``; masked entries get weight exactly 0.

    Rows with nothing unmasked come back all-zero.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError(f"masked_softmax: mask {mask.shape} vs input {x.shape}")
    xd = x.data
    top = np.where(mask, xd, -np.inf).max(axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0)
    e = np.where(mask, np.exp(np.where(mask, xd - top, 0)), 0).astype(xd.dtype)
    s = e.sum(axis=axis, keepdims=True)
    out = e / np.where(s > 0, s, 1)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), grad_fn)


# ---------------------------------------------------------------- sequence primitives


def embedding(weight: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows of ``weight``; row 0 is padding and never receives gradient."""
    idx = np.asarray(indices)
    vocab = weight.shape[0]
    bad = np.argwhere((idx < 0) | (idx >= vocab))
    if bad.size:
        pos = tuple(int(i) for i in bad[0])
        raise IndexError(
            f"embedding index {int(idx[pos])} at position {pos} outside vocabulary of {vocab}"
        )
    out = weight.data[idx]
    out[idx == 0] = 0

    def grad_fn(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, idx.ravel(), g.reshape(-1, g.shape[-1]))
        gw[0] = 0
        return (gw,)

    return _result(out, (weight,), grad_fn)


def _conv_forward(xp: np.ndarray, kd: np.ndarray, bias, t: int) -> np.ndarray:
    # one matmul per kernel tap
    out = xp[:, 0:t] @ kd[0]
    for k in range(1, kd.shape[0]):
        out += xp[:, k : k + t] @ kd[k]
    if bias is not None:
        out += bias
    return out


def _conv_backward(xp: np.ndarray, kd: np.ndarray, g: np.ndarray, dxp: np.ndarray) -> np.ndarray:
    """Accumulate the input gradient into ``dxp`` and return the kernel gradient."""
    b, t, cout = g.shape
    cin = kd.shape[1]
    g2 = g.reshape(b * t, cout)
    for k in range(kd.shape[0]):
        dxp[:, k : k + t] += g @ kd[k].T
    return np.stack([xp[:, k : k + t].reshape(b * t, cin).T @ g2 for k in range(kd.shape[0])])


def _check_conv(x: Tensor, kernel: Tensor) -> None:
    width, cin, _ = kernel.shape
    if width % 2 == 0:
        raise ValueError(f"conv1d kernel width must be odd, got {width}")
    if x.ndim != 3 or x.shape[2] != cin:
        raise ShapeError(f"conv1d: input {x.shape} does not match kernel {kernel.shape}")


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-length cross-correlation along time.

    ``x`` is ``[batch, time, in]``, ``kernel`` is ``[width, in, out]``.  The
    input is zero-padded by ``width // 2`` on both ends.
    """
    _check_conv(x, kernel)
    t = x.shape[1]
    pad = kernel.shape[0] // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0)))
    kd = kernel.data
    out = _conv_forward(xp, kd, None if bias is None else bias.data, t)

    def grad_fn(g):
        dxp = np.zeros_like(xp)
        grads = [None, _conv_backward(xp, kd, g, dxp)]
        grads[0] = dxp[:, pad : pad + t]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1)))
        return tuple(grads)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, inputs, grad_fn)


def glu_conv1d(
    x: Tensor,
    kernel_a: Tensor,
    bias_a: Tensor,
    kernel_b: Tensor,
    bias_b: Tensor,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Gated linear unit over two convolutions, ``A ⊙ σ(B)``, as one node.

    Same arithmetic as ``conv1d(x, kernel_a, bias_a) * sigmoid(conv1d(x,
    kernel_b, bias_b))``.  An optional ``[batch, time]`` mask zeroes the
    output at padded steps.
    """
    _check_conv(x, kernel_a)
    _check_conv(x, kernel_b)
    if kernel_a.shape != kernel_b.shape:
        raise ShapeError(f"GLU branches differ: {kernel_a.shape} vs {kernel_b.shape}")
    t = x.shape[1]
    pad = kernel_a.shape[0] // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0)))
    ka, kb = kernel_a.data, kernel_b.data
    a = _conv_forward(xp, ka, bias_a.data, t)
    gate = _sig(_conv_forward(xp, kb, bias_b.data, t))
    out = a * gate
    m = None
    if mask is not None:
        m = np.asarray(mask, dtype=out.dtype)[:, :, None]
        out = out * m

    def grad_fn(g):
        if m is not None:
            g = g * m
        ga = g * gate
        gb = g * a * gate * (1 - gate)
        dxp = np.zeros_like(xp)
        dka = _conv_backward(xp, ka, ga, dxp)
        dkb = _conv_backward(xp, kb, gb, dxp)
        return dxp[:, pad : pad + t], dka, ga.sum(axis=(0, 1)), dkb, gb.sum(axis=(0, 1))

    return _result(out, (x, kernel_a, bias_a, kernel_b, bias_b), grad_fn)


def gru_scan(
    x: Tensor,
    mask: np.ndarray,
    w: Sequence[Tensor],
    u: Sequence[Tensor],
    b: Sequence[Tensor],
    reverse: bool = False,
) -> Tensor:
    """Run a GRU over ``x`` ``[batch, time, in]`` as one fused tape node.

    ``w``, ``u``, ``b`` are the (update, reset, candidate) triplets.  The
    hidden state starts at zero, is frozen across steps where ``mask`` is 0,
    and the output there is zero.  With ``reverse`` the scan runs right to
    left.  Backpropagation through time is done by hand in the backward rule.
    """
    bsz, steps, _ = x.shape
    hidden = u[0].shape[0]
    dt = x.dtype
    m = np.asarray(mask, dtype=dt)[:, :, None]
    wcat = np.concatenate([p.data for p in w], axis=1)
    bcat = np.concatenate([p.data for p in b])
    uz, ur, uh = (p.data for p in u)
    proj = x.data @ wcat + bcat

    order = range(steps - 1, -1, -1) if reverse else range(steps)
    h = np.zeros((bsz, hidden), dtype=dt)
    out = np.zeros((bsz, steps, hidden), dtype=dt)
    saved = {}
    for t in order:
        pz, pr, ph = np.split(proj[:, t], 3, axis=1)
        z = _sig(pz + h @ uz)
        r = _sig(pr + h @ ur)
        rh = r * h
        hh = np.tanh(ph + rh @ uh)
        hn = h + z * (hh - h)
        mt = m[:, t]
        h_new = mt * hn + (1 - mt) * h
        saved[t] = (h, z, r, rh, hh)
        out[:, t] = mt[:, :] * h_new
        h = h_new

    def grad_fn(g):
        dproj = np.zeros_like(proj)
        duz = np.zeros_like(uz)
        dur = np.zeros_like(ur)
        duh = np.zeros_like(uh)
        dh = np.zeros((bsz, hidden), dtype=dt)
        for t in reversed(order):
            h_prev, z, r, rh, hh = saved[t]
            mt = m[:, t]
            dh = dh + mt * g[:, t]
            dhn = mt * dh
            dh_prev = (1 - mt) * dh + dhn * (1 - z)
            dz = dhn * (hh - h_prev)
            dph = dhn * z * (1 - hh * hh)
            duh += rh.T @ dph
            drh = dph @ uh.T
            dr = drh * h_prev
            dh_prev += drh * r
            dpr = dr * r * (1 - r)
            dpz = dz * z * (1 - z)
            dur += h_prev.T @ dpr
            duz += h_prev.T @ dpz
            dh_prev += dpr @ ur.T + dpz @ uz.T
            dproj[:, t] = np.concatenate([dpz, dpr, dph], axis=1)
            dh = dh_prev
        flat = dproj.reshape(-1, 3 * hidden)
        dw = x.data.reshape(-1, x.shape[2]).T @ flat
        db = flat.sum(axis=0)
        dx = dproj @ wcat.T
        dws = np.split(dw, 3, axis=1)
        dbs = np.split(db, 3)
        return (dx, *dws, duz, dur, duh, *dbs)

    return _result(out, (x, *w, *u, *b), grad_fn)


def _sig(v: np.ndarray) -> np.ndarray:
    # σ(v) = (1 + tanh(v/2)) / 2 never overflows
    return 0.5 * (np.tanh(0.5 * v) + 1.0)
