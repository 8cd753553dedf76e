# %% [markdown]
# # The tape
#
# Every op records a node. `backward` walks the nodes in reverse creation
# order, so each gradient is finished before it is pushed further back.
# Below we check a few rules against central differences.

# %%
import numpy as np

from mehpan import autodiff as ad
from mehpan.autodiff import Tensor

rng = np.random.default_rng(0)

# %%
x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
w = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
y = ad.tanh(x @ w).sum()
ad.backward(y)
w.grad

# %% [markdown]
# Same number by finite differences (float64, step 1e-3):

# %%
def f(wv):
    return np.tanh(x.data @ wv).sum()

num = np.zeros_like(w.data)
for idx in np.ndindex(w.shape):
    e = np.zeros_like(w.data)
    e[idx] = 1e-3
    num[idx] = (f(w.data + e) - f(w.data - e)) / 2e-3
print(np.abs(num - w.grad).max())

# %% [markdown]
# ## Masked softmax
# Masked steps get exactly zero weight, and a fully masked row gives zeros
# instead of NaN.

# %%
logits = Tensor(rng.standard_normal((2, 4)))
mask = np.array([[1, 1, 1, 0], [0, 0, 0, 0]])
print(ad.masked_softmax(logits, mask, axis=1).data)

# %% [markdown]
# ## The fused GRU scan
# `gru_scan` runs a whole sequence as one node with hand-written backprop
# through time. On masked steps the hidden state is frozen, so pads at the
# end do not change anything.

# %%
from mehpan import layers as L

cell = L.GRUCell(3, 2, rng)
seq = Tensor(rng.standard_normal((1, 5, 3)).astype(np.float32))
short = L.run_gru(cell, Tensor(seq.data[:, :3]), np.ones((1, 3)))
padded = L.run_gru(cell, seq, np.array([[1, 1, 1, 0, 0]]))
print(short.data[0, -1], padded.data[0, 2])
