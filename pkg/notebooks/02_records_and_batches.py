# %% [markdown]
# # Synthetic patients, vocabularies and batches

# %%
import numpy as np

from mehpan import data as D

cfg = D.SynthConfig(n_patients=2000, seed=1)
patients = D.generate_synthetic(cfg)
p = patients[0]
p

# %% [markdown]
# Class balance follows the default ratios (about 19% vascular):

# %%
labels = np.array([q.label_multi for q in patients])
np.bincount(labels, minlength=3) / len(labels)

# %% [markdown]
# Positives carry a class marker code dated within the last month. Any
# patient can also carry a stale copy from more than a year back, which a
# bag-of-codes model cannot tell apart from a fresh one.

# %%
recent = np.array([D.has_recent_marker(q, cfg) for q in patients])
binary = labels > 0
print("recent marker | positive:", recent[binary].mean())
print("recent marker | negative:", recent[~binary].mean())

# %% [markdown]
# ## Durations
# Diagnoses are weighted by how long ago they happened, medications by
# prescription length.

# %%
print(p.diag_dates[-5:])
print(D.diag_durations(p.diag_dates)[-5:])
print(D.med_durations(p.med_periods)[:5])

# %% [markdown]
# ## Vocabularies and a padded batch
# Index 0 is padding and 1 is unknown. Vocabularies are built from training
# records only.

# %%
train, test = D.split_ten_sets(patients, seed=1, n_sets=1)[0]
vocabs = D.build_vocab(train)
batch = D.make_batch(test[:4], vocabs, max_len=30, max_med_len=20).trimmed()
print(batch.diag_code_idx)
print(batch.diag_mask)
