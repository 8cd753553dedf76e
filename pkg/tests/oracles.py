"""Independent reference computations used by the tests.

Finite differences only ever run the forward pass, so they check the
backward rules without sharing any code with them.
"""

import numpy as np

from mehpan import autodiff as ad

STEP = 1e-3
RTOL = 1e-3
ATOL = 1e-6


def numeric_grad(f, arrays, which, step=STEP):
    """Central differences of scalar ``f(*arrays)`` w.r.t. ``arrays[which]``."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[which]
    out = np.zeros_like(target)
    for idx in np.ndindex(target.shape):
        old = target[idx]
        target[idx] = old + step
        hi = f(*base)
        target[idx] = old - step
        lo = f(*base)
        target[idx] = old
        out[idx] = (hi - lo) / (2 * step)
    return out


def assert_grad_close(analytic, numeric, rtol=RTOL, atol=ATOL):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    err = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    bad = err > atol + rtol * scale
    assert not bad.any(), (
        f"{bad.sum()} gradient entries disagree; worst abs err {err.max():.3g}\n"
        f"analytic={analytic[bad][:5]} numeric={numeric[bad][:5]}"
    )


def check_gradients(fn, arrays, rtol=RTOL, atol=ATOL, step=STEP):
    """Tape gradients of ``fn(*tensors)`` against central differences, in float64."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    ad.backward(fn(*tensors))

    def scalar(*xs):
        with ad.no_grad():
            return float(fn(*[ad.Tensor(x) for x in xs]).data)

    for i, t in enumerate(tensors):
        analytic = t.grad if t.grad is not None else np.zeros_like(arrays[i])
        assert_grad_close(analytic, numeric_grad(scalar, arrays, i, step), rtol, atol)


def brute_force_auc(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pos, neg = scores[labels], scores[~labels]
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(pos) * len(neg))


def spot_check_model(model, batch, n_params=20, seed=0, rtol=1e-2, atol=1e-6, step=1e-3):
    """Compare float32 tape gradients of the model loss with float64 central
    differences on ``n_params`` randomly drawn parameter entries.

    Embedding entries are drawn from rows the batch actually uses (and never
    the padding row, which is excluded from updates by design).
    """
    from mehpan.models import batch_loss

    model.zero_grad()
    ad.backward(batch_loss(model, batch))
    named = list(model.named_parameters())
    oracle = model.astype(np.float64)
    oracle_params = dict(oracle.named_parameters())
    used = {
        "diag_code": np.unique(batch.diag_code_idx),
        "diag_kind": np.unique(batch.diag_kind_idx),
        "med_code": np.unique(batch.med_code_idx),
        "med_type": np.unique(batch.med_type_idx),
    }
    rng = np.random.default_rng(seed)
    picks = []
    while len(picks) < n_params:
        name, p = named[rng.integers(len(named))]
        if name.endswith("embedding.weight"):
            rows = used[name.split(".")[0]]
            rows = rows[rows > 0]
            if rows.size == 0:
                continue
            idx = (int(rng.choice(rows)), int(rng.integers(p.shape[1])))
        else:
            idx = tuple(int(rng.integers(s)) for s in p.shape)
        picks.append((name, idx))

    def loss_at(name, idx, delta):
        t = oracle_params[name]
        old = t.data[idx]
        t.data[idx] = old + delta
        with ad.no_grad():
            value = float(batch_loss(oracle, batch).data)
        t.data[idx] = old
        return value

    params = dict(named)
    analytic, numeric = [], []
    for name, idx in picks:
        g = params[name].grad
        analytic.append(0.0 if g is None else float(g[idx]))
        numeric.append((loss_at(name, idx, step) - loss_at(name, idx, -step)) / (2 * step))
    assert_grad_close(np.array(analytic), np.array(numeric), rtol=rtol, atol=atol)
    return picks, analytic, numeric
