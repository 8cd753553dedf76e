# %% [markdown]
# # R-MeHPAN and C-MeHPAN forward passes
#
# Both models read four streams (diagnosis codes, diagnosis kinds,
# medication codes, medication types). The recurrent model uses a
# bidirectional GRU plus attention per stream. The convolutional one uses
# stacked GLU convolutions, a time reduction and a per-stream gate.

# %%
import time

import numpy as np

from mehpan import data as D
from mehpan.models import MehpanModel, ModelConfig

patients = D.generate_synthetic(D.SynthConfig(n_patients=300, seed=2))
vocabs = D.build_vocab(patients)
batch = D.make_batch(patients[:64], vocabs, 30, 20).trimmed()

def build(arch, red=None):
    return MehpanModel(ModelConfig(architecture=arch, reduction_mode=red,
                                   diag_vocab_size=len(vocabs[0]), med_vocab_size=len(vocabs[1])))

# %%
for arch, red in [("rnn", None), ("conv", "sum"), ("conv", "weighted_sum"), ("conv", "last_step")]:
    model = build(arch, red)
    t = time.perf_counter()
    pb, pm = model(batch)
    print(f"{arch:4} {str(red):12} p_binary[:3]={np.round(pb.data[:3], 3)} "
          f"rows sum {pm.data.sum(1).min():.6f} {1e3 * (time.perf_counter() - t):.0f} ms")

# %% [markdown]
# Extra padding leaves the outputs alone:

# %%
model = build("conv", "weighted_sum")
a = model(batch)[0].data
b = model(batch.pad_to(batch.diag_mask.shape[1] + 7, batch.med_mask.shape[1] + 3))[0].data
np.abs(a - b).max()

# %% [markdown]
# Parameter count per architecture:

# %%
for arch, red in [("rnn", None), ("conv", "weighted_sum")]:
    print(arch, sum(p.data.size for p in build(arch, red).parameters()))
