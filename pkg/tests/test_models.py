import math

import numpy as np
import pytest

from mehpan import autodiff as ad
from mehpan import data as D
from mehpan.autodiff import Tensor
from mehpan.models import (
    CheckpointError, ConfigError, MehpanModel, ModelConfig, batch_loss, forward_conv,
    forward_rnn, load_checkpoint, loss, save_checkpoint,
)
from oracles import check_gradients, spot_check_model

SMALL = dict(diag_embed=6, kind_embed=3, med_embed=5, type_embed=2, hidden=5, aux_hidden=3,
             attention_hidden=4, dense_widths=(7, 5), max_diag_len=12, max_med_len=8)


@pytest.fixture(scope="module")
def corpus():
    data = D.generate_synthetic(D.SynthConfig(n_patients=40, n_diag_codes=30, n_med_codes=30,
                                              min_diag_len=2, max_diag_len=12, max_med_len=8,
                                              empty_med_rate=0.2, seed=1))
    vocabs = D.build_vocab(data)
    return data, vocabs


def make_model(vocabs, arch="rnn", reduction=None, seed=0, **kw):
    cfg = ModelConfig(architecture=arch, reduction_mode=reduction,
                      diag_vocab_size=len(vocabs[0]), med_vocab_size=len(vocabs[1]),
                      seed=seed, **{**SMALL, **kw})
    return MehpanModel(cfg)


def batch_of(corpus, rows=None, **kw):
    data, vocabs = corpus
    pats = data if rows is None else [data[i] for i in rows]
    return D.make_batch(pats, vocabs, kw.get("max_len", 12), kw.get("max_med_len", 8)).trimmed()


ARCHS = [("rnn", None), ("conv", "sum"), ("conv", "weighted_sum"), ("conv", "last_step")]


# ---------------------------------------------------------------- config


def test_reduction_mode_only_for_conv():
    with pytest.raises(ConfigError):
        ModelConfig(architecture="rnn", reduction_mode="sum").validate()
    with pytest.raises(ConfigError):
        ModelConfig(architecture="conv").validate()


@pytest.mark.parametrize("field", ["hidden", "diag_embed", "attention_hidden", "conv_layers"])
def test_widths_must_be_positive(field):
    with pytest.raises(ConfigError):
        ModelConfig(**{field: 0}).validate()


def test_config_dict_roundtrip():
    cfg = ModelConfig(architecture="conv", reduction_mode="sum", dense_widths=(9, 4))
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("arch,red", ARCHS)
def test_parameter_names_unique_and_context_width(corpus, arch, red):
    model = make_model(corpus[1], arch, red)
    names = [n for n, _ in model.named_parameters()]
    assert len(names) == len(set(names))
    assert model.context_width == model.dense1.W.shape[0]
    expect = 2 * (2 * SMALL["hidden"] + 2 * SMALL["aux_hidden"]) if arch == "rnn" else \
        2 * SMALL["hidden"] + 2 * SMALL["aux_hidden"]
    assert model.context_width == expect


# ---------------------------------------------------------------- forward contracts


@pytest.mark.parametrize("arch,red", ARCHS)
def test_output_shapes_and_ranges(corpus, arch, red):
    model = make_model(corpus[1], arch, red)
    pb, pm = model(batch_of(corpus))
    n = len(corpus[0])
    assert pb.shape == (n,) and pm.shape == (n, 3)
    assert np.all((pb.data > 0) & (pb.data < 1))
    np.testing.assert_allclose(pm.data.sum(axis=1), 1.0, atol=1e-6)


def test_forward_entry_points_check_architecture(corpus):
    rnn = make_model(corpus[1])
    conv = make_model(corpus[1], "conv", "sum")
    b = batch_of(corpus, range(4))
    forward_rnn(rnn, b)
    forward_conv(conv, b)
    with pytest.raises(ConfigError):
        forward_conv(rnn, b)
    with pytest.raises(ConfigError):
        forward_rnn(conv, b)


def test_vocab_mismatch_rejected(corpus):
    model = make_model((D.Vocab(["a"]), corpus[1][1]))
    with pytest.raises(ConfigError):
        model(batch_of(corpus))


@pytest.mark.parametrize("arch,red", ARCHS)
def test_duplicated_patient_gives_identical_rows(corpus, arch, red):
    model = make_model(corpus[1], arch, red)
    pb, pm = model(batch_of(corpus, [3, 3, 7]))
    assert pb.data[0] == pb.data[1]
    np.testing.assert_array_equal(pm.data[0], pm.data[1])


@pytest.mark.parametrize("arch,red", ARCHS)
def test_permutation_equivariance(corpus, arch, red):
    model = make_model(corpus[1], arch, red)
    rows = list(range(10))
    perm = np.random.default_rng(0).permutation(10)
    pb, pm = model(batch_of(corpus, rows))
    qb, qm = model(batch_of(corpus, [rows[i] for i in perm]))
    np.testing.assert_allclose(qb.data, pb.data[perm], atol=1e-6)
    np.testing.assert_allclose(qm.data, pm.data[perm], atol=1e-6)


@pytest.mark.parametrize("arch,red", ARCHS)
def test_padding_invariance(corpus, arch, red):
    model = make_model(corpus[1], arch, red, max_diag_len=20, max_med_len=15)
    b = batch_of(corpus)
    pb, pm = model(b)
    padded = b.pad_to(b.diag_mask.shape[1] + 5, b.med_mask.shape[1] + 4)
    qb, qm = model(padded)
    np.testing.assert_allclose(qb.data, pb.data, atol=1e-6)
    np.testing.assert_allclose(qm.data, pm.data, atol=1e-6)


def test_single_step_reductions_agree(corpus):
    data, vocabs = corpus
    single = [D.PatientHistory(
        patient_id=p.patient_id, diag_codes=p.diag_codes[-1:], diag_dates=p.diag_dates[-1:],
        diag_kinds=p.diag_kinds[-1:], med_codes=p.med_codes[-1:], med_periods=p.med_periods[-1:],
        med_types=p.med_types[-1:], label_multi=p.label_multi) for p in data]
    b = D.make_batch(single, vocabs, 1, 1)
    outs = [make_model(vocabs, "conv", red, seed=3)(b) for red in ("sum", "weighted_sum", "last_step")]
    for pb, pm in outs[1:]:
        np.testing.assert_array_equal(pb.data, outs[0][0].data)
        np.testing.assert_array_equal(pm.data, outs[0][1].data)


def test_conv_forward_deterministic(corpus):
    b = batch_of(corpus)
    a = make_model(corpus[1], "conv", "weighted_sum", seed=4)(b)
    c = make_model(corpus[1], "conv", "weighted_sum", seed=4)(b)
    assert a[0].data.tobytes() == c[0].data.tobytes()
    assert a[1].data.tobytes() == c[1].data.tobytes()


@pytest.mark.parametrize("arch,red", ARCHS)
def test_empty_medication_history_gives_zero_med_context(corpus, arch, red):
    data, vocabs = corpus
    p = data[0]
    empty = D.PatientHistory(p.patient_id, p.diag_codes, p.diag_dates, p.diag_kinds, [], [], [],
                             p.label_multi)
    model = make_model(vocabs, arch, red)
    b = D.make_batch([empty, data[1]], vocabs, 12, 8)
    ctx = model.contexts(b)
    assert np.all(ctx[2].data[0] == 0) and np.all(ctx[3].data[0] == 0)
    pb, pm = model(b)
    assert np.all(np.isfinite(pb.data)) and np.all(np.isfinite(pm.data))


# ---------------------------------------------------------------- loss


def test_loss_perfect_predictions():
    pb = Tensor(np.array([1.0, 0.0]))
    pm = Tensor(np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]))
    value = float(loss(pb, pm, [1, 0], [1, 0]).data)
    assert value == pytest.approx(-2 * math.log(1 - 1e-7), abs=1e-5)
    assert value < 1e-5


def test_loss_uninformative_predictions():
    pb = Tensor(np.full(4, 0.5))
    pm = Tensor(np.full((4, 3), 1 / 3))
    value = float(loss(pb, pm, [1, 0, 1, 0], [2, 0, 1, 0]).data)
    assert value == pytest.approx(1.79176, abs=1e-4)


def test_loss_binary_only_weights():
    rng = np.random.default_rng(0)
    p = rng.uniform(0.05, 0.95, 6)
    y = np.array([1, 0, 1, 1, 0, 0])
    pm = Tensor(rng.dirichlet(np.ones(3), 6))
    bce = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    value = float(loss(Tensor(p), pm, y, y * 2, weights=(1, 0)).data)
    assert value == pytest.approx(bce, abs=1e-12)


@pytest.mark.parametrize("yb,ym", [([1, 0], [0, 0]), ([0, 0], [0, 2]), ([1, 1], [1, 3]), ([2, 0], [1, 0])])
def test_loss_rejects_bad_labels(yb, ym):
    with pytest.raises(ValueError):
        loss(Tensor(np.full(2, 0.5)), Tensor(np.full((2, 3), 1 / 3)), yb, ym)


def test_loss_gradient():
    rng = np.random.default_rng(1)
    logits_b = rng.normal(size=5)
    logits_m = rng.normal(size=(5, 3))
    yb, ym = np.array([1, 0, 1, 0, 1]), np.array([2, 0, 1, 0, 1])
    check_gradients(lambda a, m: loss(ad.sigmoid(a), ad.softmax(m, axis=1), yb, ym, (0.7, 1.3)),
                    [logits_b, logits_m])


# ---------------------------------------------------------------- end-to-end gradients


@pytest.mark.parametrize("arch,red", ARCHS)
def test_end_to_end_gradient_spot_check(corpus, arch, red):
    model = make_model(corpus[1], arch, red, seed=2)
    spot_check_model(model, batch_of(corpus, range(12)), n_params=20, seed=5)


def test_padding_row_receives_no_update(corpus):
    model = make_model(corpus[1])
    ad.backward(batch_loss(model, batch_of(corpus)))
    assert np.all(model.diag_code.embedding.weight.grad[0] == 0)


# ---------------------------------------------------------------- checkpoints


@pytest.mark.parametrize("arch,red", [("rnn", None), ("conv", "last_step")])
def test_checkpoint_roundtrip_bitwise(corpus, tmp_path, arch, red):
    model = make_model(corpus[1], arch, red, seed=6)
    save_checkpoint(model, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.config == model.config
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), back.named_parameters()):
        assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()
    b = batch_of(corpus)
    assert model(b)[0].data.tobytes() == back(b)[0].data.tobytes()
    assert model(b)[1].data.tobytes() == back(b)[1].data.tobytes()


def test_checkpoint_header(corpus, tmp_path):
    save_checkpoint(make_model(corpus[1]), tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw[:4] == b"MEHP" and raw[4:6] == (1).to_bytes(2, "little")


def test_truncated_checkpoint(corpus, tmp_path):
    save_checkpoint(make_model(corpus[1]), tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    for cut in (3, 10, len(raw) // 2, len(raw) - 1):
        (tmp_path / "t.ckpt").write_bytes(raw[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "t.ckpt")


def test_bad_magic_and_version(corpus, tmp_path):
    save_checkpoint(make_model(corpus[1]), tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "a.ckpt").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "b.ckpt").write_bytes(raw[:4] + (9).to_bytes(2, "little") + raw[6:])
    for name in ("a.ckpt", "b.ckpt"):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / name)


def test_rnn_checkpoint_loaded_as_conv(corpus, tmp_path):
    save_checkpoint(make_model(corpus[1]), tmp_path / "m.ckpt")
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "m.ckpt", expect_architecture="conv")


@pytest.mark.parametrize("arch,red", [("rnn", None), ("conv", "sum")])
def test_parameters_and_outputs_are_float32(corpus, arch, red):
    model = make_model(corpus[1], arch, red)
    assert {p.dtype for p in model.parameters()} == {np.dtype(np.float32)}
    pb, pm = model(batch_of(corpus))
    assert pb.dtype == np.float32 and pm.dtype == np.float32
