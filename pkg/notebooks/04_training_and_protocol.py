# %% [markdown]
# # Training and the ten-split protocol
#
# A small run. The acceptance suite does the same at 10,000 patients.

# %%
from mehpan import data as D
from mehpan.models import MehpanModel, ModelConfig
from mehpan.training import (
    LogisticBaseline, MajorityBaseline, TrainConfig, auc, evaluate_baseline, evaluate_protocol,
    format_table, predict, train,
)

patients = D.generate_synthetic(D.SynthConfig(n_patients=2000, signal=0.9, seed=0))
train_set, test_set = D.split_ten_sets(patients, seed=0, n_sets=1)[0]
vocabs = D.build_vocab(train_set)
labels = [p.label_binary for p in test_set]

# %%
cfg = ModelConfig(architecture="conv", reduction_mode="weighted_sum",
                  diag_vocab_size=len(vocabs[0]), med_vocab_size=len(vocabs[1]))
model, history = train(
    MehpanModel(cfg), train_set, vocabs, TrainConfig(epochs=5, learning_rate=3e-3),
    on_epoch=lambda rec, m: print(rec.epoch, round(rec.mean_loss, 4),
                                  round(auc(predict(m, test_set, vocabs)[0], labels), 4)),
)

# %%
print("logistic", auc(LogisticBaseline().fit(train_set).predict(test_set), labels))

# %% [markdown]
# ## Protocol
# Ten stratified 80/20 splits. Vocabularies come from each training side.
# Only three splits here to keep it quick.

# %%
small = patients[:800]
reports = [
    evaluate_protocol(ModelConfig(architecture="conv", reduction_mode=r), small, seed=0,
                      train_cfg=TrainConfig(epochs=3, learning_rate=3e-3), n_splits=3)
    for r in ("sum", "weighted_sum", "last_step")
]
reports += [evaluate_baseline(b, small, seed=0, n_splits=3) for b in (MajorityBaseline, LogisticBaseline)]
print(format_table(reports))
