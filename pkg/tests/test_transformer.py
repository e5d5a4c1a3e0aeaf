import numpy as np
import pytest

from ckd import tensor as T
from ckd.errors import ConfigError, DataError
from ckd.transformer import (
    BOS,
    EOS,
    PAD,
    ModelConfig,
    analytic_param_count,
    count_params,
    forward,
    greedy_decode,
    init_model,
    param_shapes,
)

CFG = ModelConfig(enc_layers=2, dec_layers=2, d_model=16, n_heads=4, d_ff=32, vocab_size=11, max_len=10, dropout=0.1)


@pytest.fixture(scope="module")
def model():
    return init_model(CFG, seed=3)


def ids(rng, b, t, lengths):
    x = rng.integers(3, CFG.vocab_size, size=(b, t))
    for r, n in enumerate(lengths):
        x[r, n:] = PAD
    return x


def test_init_is_deterministic():
    a, b = init_model(CFG, seed=5), init_model(CFG, seed=5)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(pa.data, pb.data)
    c = init_model(CFG, seed=6)
    assert not np.array_equal(a.params["enc.0.ffn.fc1.weight"].data, c.params["enc.0.ffn.fc1.weight"].data)


@pytest.mark.parametrize("cfg", [CFG, ModelConfig.teacher(), ModelConfig.student(), ModelConfig(enc_layers=3, dec_layers=1)])
def test_param_count_matches_closed_form(cfg):
    assert count_params(init_model(cfg)) == analytic_param_count(cfg) == sum(
        int(np.prod(s)) for s in param_shapes(cfg).values())


def test_student_smaller_than_teacher():
    teacher = ModelConfig(enc_layers=6, dec_layers=6, d_model=64, n_heads=4, d_ff=128, vocab_size=32)
    student = ModelConfig(enc_layers=2, dec_layers=2, d_model=64, n_heads=4, d_ff=128, vocab_size=32)
    assert analytic_param_count(student) < 0.6 * analytic_param_count(teacher)


def test_wider_ffn_adds_parameters():
    small = ModelConfig(d_ff=64)
    big = ModelConfig(d_ff=128)
    assert analytic_param_count(big) > analytic_param_count(small)


@pytest.mark.parametrize("field,kw", [
    ("enc_layers", {"enc_layers": 0}),
    ("dec_layers", {"dec_layers": 0}),
    ("n_heads", {"d_model": 10, "n_heads": 4}),
    ("dropout", {"dropout": 1.0}),
])
def test_config_validation_names_field(field, kw):
    with pytest.raises(ConfigError, match=field):
        ModelConfig(**kw)


def test_forward_shapes(model):
    rng = np.random.default_rng(0)
    src, tgt = ids(rng, 3, 7, [7, 4, 2]), ids(rng, 3, 5, [5, 5, 3])
    tr = forward(model, src, tgt)
    assert tr.logits.shape == (3, 5, CFG.vocab_size)
    assert len(tr.enc_hiddens) == 2 and len(tr.dec_hiddens) == 2
    assert all(h.shape == (3, 7, 16) for h in tr.enc_hiddens)
    assert all(a.shape == (3, 4, 7, 7) for a in tr.enc_self_attn)


def test_eval_is_deterministic(model):
    rng = np.random.default_rng(1)
    src, tgt = ids(rng, 2, 6, [6, 3]), ids(rng, 2, 4, [4, 2])
    np.testing.assert_array_equal(forward(model, src, tgt).logits.data, forward(model, src, tgt).logits.data)


def test_train_mode_dropout_is_seeded(model):
    rng = np.random.default_rng(1)
    src, tgt = ids(rng, 2, 6, [6, 3]), ids(rng, 2, 4, [4, 2])
    a = forward(model, src, tgt, mode="train", rng=np.random.default_rng(7)).logits.data
    b = forward(model, src, tgt, mode="train", rng=np.random.default_rng(7)).logits.data
    c = forward(model, src, tgt).logits.data
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)
    with pytest.raises(ValueError):
        forward(model, src, tgt, mode="train")


def test_extra_padding_does_not_change_real_positions(model):
    rng = np.random.default_rng(2)
    src, tgt = ids(rng, 2, 5, [5, 3]), ids(rng, 2, 4, [4, 2])
    base = forward(model, src, tgt).logits.data
    wide_src = np.concatenate([src, np.zeros((2, 4), dtype=src.dtype)], axis=1)
    wide = forward(model, wide_src, tgt).logits.data
    np.testing.assert_allclose(wide, base, atol=1e-5)


def test_pad_content_is_ignored_under_mask(model):
    rng = np.random.default_rng(3)
    src, tgt = ids(rng, 2, 6, [6, 2]), ids(rng, 2, 4, [4, 4])
    mask = src == PAD
    junk = src.copy()
    junk[mask] = 7
    a = forward(model, src, tgt, src_mask=mask).logits.data
    b = forward(model, junk, tgt, src_mask=mask).logits.data
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_decoder_is_causal(model):
    rng = np.random.default_rng(4)
    src, tgt = ids(rng, 1, 5, [5]), ids(rng, 1, 6, [6])
    base = forward(model, src, tgt).logits.data
    changed = tgt.copy()
    changed[0, 4:] = 5 if changed[0, 4] != 5 else 6
    out = forward(model, src, changed).logits.data
    np.testing.assert_allclose(out[0, :4], base[0, :4], atol=1e-6)
    assert not np.allclose(out[0, 4:], base[0, 4:])


def test_attention_rows_and_masked_keys(model):
    rng = np.random.default_rng(5)
    src, tgt = ids(rng, 3, 7, [7, 4, 1]), ids(rng, 3, 3, [3, 3, 3])
    tr = forward(model, src, tgt)
    for a in tr.enc_self_attn:
        np.testing.assert_allclose(a.data.sum(-1), 1.0, atol=1e-5)
        keys = np.broadcast_to(tr.src_mask[:, None, None, :], a.shape)
        assert a.data[keys].max() < 1e-6
    for a in tr.dec_self_attn:
        upper = np.triu(np.ones((3, 3), bool), k=1)
        assert a.data[..., upper].max() < 1e-6


def test_gradients_reach_every_parameter(model):
    rng = np.random.default_rng(6)
    src, tgt = ids(rng, 2, 5, [5, 3]), ids(rng, 2, 4, [4, 3])
    model.zero_grad()
    T.backward(forward(model, src, tgt).logits.mean())
    missing = [n for n, p in model.named_parameters() if p.grad is None]
    assert missing == []
    model.zero_grad()


def test_bad_ids_and_lengths(model):
    with pytest.raises(DataError):
        forward(model, np.array([[3, CFG.vocab_size]]), np.array([[BOS]]))
    with pytest.raises(DataError):
        forward(model, np.full((1, CFG.max_len + 1), 3), np.array([[BOS]]))
    with pytest.raises(DataError):
        forward(model, np.array([3, 4]), np.array([[BOS]]))


def test_greedy_decode_contract(model):
    rng = np.random.default_rng(7)
    src = ids(rng, 4, 6, [6, 5, 2, 1])
    outs = greedy_decode(model, src, max_len=5)
    assert len(outs) == 4
    for row in outs:
        assert len(row) <= 5
        assert EOS not in row and PAD not in row
    assert greedy_decode(model, src, max_len=5) == outs


def test_float64_copy_keeps_values(model):
    m64 = model.astype(np.float64)
    rng = np.random.default_rng(8)
    src, tgt = ids(rng, 2, 4, [4, 2]), ids(rng, 2, 3, [3, 3])
    np.testing.assert_allclose(forward(m64, src, tgt).logits.data, forward(model, src, tgt).logits.data, atol=1e-4)
    assert forward(m64, src, tgt).logits.dtype == np.float64
