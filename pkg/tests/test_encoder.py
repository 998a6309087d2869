"""Encoder semantics: init statistics, masking, batching, and an independent
straight-line reimplementation oracle at micro scale."""

import numpy as np
import pytest

from rwpcl import encoder, gradcheck, numcore
from rwpcl.encoder import EncoderConfig, forward, init, predict_proba
from rwpcl.errors import ConfigError, InputError
from rwpcl.textprep import Batch


def _cfg(**kw):
    base = dict(vocab_size=17, max_len=8, num_classes=3, layers=2, model_dim=8,
                heads=2, ff_dim=16)
    base.update(kw)
    return EncoderConfig(**base)


def _batch(ids):
    ids = np.asarray(ids)
    return Batch(ids=ids, mask=(ids != 0).astype(np.float32),
                 labels=np.zeros(len(ids), dtype=np.int64))


def test_config_validation():
    with pytest.raises(ConfigError):
        _cfg(model_dim=6, heads=4)
    with pytest.raises(ConfigError):
        _cfg(layers=0)


def test_init_deterministic():
    a = init(_cfg(), seed=5)
    b = init(_cfg(), seed=5)
    assert sorted(a) == sorted(b)
    for name in a:
        assert np.array_equal(a[name].data, b[name].data)


def test_init_norm_scales_are_one():
    params = init(_cfg(), seed=0)
    for name, t in params.items():
        if name.endswith(".gamma"):
            assert np.all(t.data == 1.0)
        if name.endswith((".beta", ".bias", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2")):
            assert np.all(t.data == 0.0)


def test_init_glorot_std_within_10_percent():
    cfg = _cfg(vocab_size=200, model_dim=64)  # 200*64 = 12800 elements
    params = init(cfg, seed=1)
    w = params["embed.token"].data
    limit = encoder.glorot_limit(w.shape)
    expected_std = limit / np.sqrt(3.0)  # uniform(-limit, limit)
    assert abs(w.std() - expected_std) / expected_std < 0.10


def test_forward_batch_permutation_invariance():
    cfg = _cfg()
    params = init(cfg, seed=2)
    ids = np.array([[2, 5, 7, 3, 0, 0, 0, 0],
                    [2, 9, 11, 6, 3, 0, 0, 0],
                    [2, 4, 3, 0, 0, 0, 0, 0]])
    cls, logits = forward(cfg, params, _batch(ids))
    perm = [2, 0, 1]
    cls_p, logits_p = forward(cfg, params, _batch(ids[perm]))
    assert np.allclose(cls_p.data, cls.data[perm], atol=1e-6)
    assert np.allclose(logits_p.data, logits.data[perm], atol=1e-6)


def test_forward_extra_padding_leaves_cls_unchanged():
    cfg = _cfg()
    params = init(cfg, seed=3)
    short = np.array([[2, 5, 7, 3]])
    long = np.array([[2, 5, 7, 3, 0, 0, 0, 0]])
    cls_short, _ = forward(cfg, params, _batch(short))
    cls_long, _ = forward(cfg, params, _batch(long))
    assert np.allclose(cls_short.data, cls_long.data, atol=1e-5)


def test_forward_rejects_out_of_range_ids():
    cfg = _cfg()
    params = init(cfg, seed=0)
    ids = np.array([[2, 3, 0, 0, 0, 0, 0, 0], [2, 17, 3, 0, 0, 0, 0, 0]])
    with pytest.raises(InputError, match="example 1"):
        forward(cfg, params, _batch(ids))


def test_forward_rejects_overlong_sequence():
    cfg = _cfg(max_len=4)
    params = init(cfg, seed=0)
    with pytest.raises(InputError, match="max_len"):
        forward(cfg, params, _batch(np.array([[2, 5, 6, 7, 3]])))


def test_attention_rows_sum_to_one_and_ignore_pads():
    cfg = _cfg()
    params = init(cfg, seed=4)
    ids = np.array([[2, 5, 7, 3, 0, 0, 0, 0]])
    sink = []
    forward(cfg, params, _batch(ids), attn_sink=sink)
    assert len(sink) == cfg.layers
    pad = ids[0] == 0
    for probs in sink:  # [b, heads, t, t]
        rows = probs[0, :, ~pad, :]       # queries at real positions
        assert np.allclose(rows.sum(axis=-1), 1.0, atol=1e-6)
        assert np.all(rows[..., pad] < 1e-6)  # no weight on padded keys


def test_forward_is_pure_and_bit_identical():
    cfg = _cfg()
    params = init(cfg, seed=6)
    batch = _batch(np.array([[2, 5, 7, 3, 0, 0, 0, 0]]))
    a = forward(cfg, params, batch)[1].data
    b = forward(cfg, params, batch)[1].data
    assert np.array_equal(a, b)


def test_predict_proba_rows_on_simplex():
    cfg = _cfg()
    params = init(cfg, seed=7)
    probs = predict_proba(cfg, params, _batch(np.array([[2, 4, 3, 0, 0, 0, 0, 0]])))
    assert np.all(probs >= 0)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)


def test_predict_proba_shift_invariance():
    logits = np.random.default_rng(8).standard_normal((5, 3)).astype(np.float32)
    a = numcore.softmax_rows(numcore.Tensor(logits)).data
    b = numcore.softmax_rows(numcore.Tensor(logits + 7.0)).data
    assert np.allclose(a, b, atol=1e-6)


def test_predict_proba_argmax_matches_logits():
    cfg = _cfg()
    params = init(cfg, seed=9)
    rng = np.random.default_rng(10)
    for _ in range(100):
        n = int(rng.integers(1, 5))
        t = int(rng.integers(2, cfg.max_len + 1))
        ids = np.full((n, t), 0)
        for row in range(n):
            k = int(rng.integers(2, t + 1))
            ids[row, 0] = 2
            ids[row, 1:k - 1] = rng.integers(4, cfg.vocab_size, size=k - 2)
            ids[row, k - 1] = 3
        batch = _batch(ids)
        _, logits = forward(cfg, params, batch)
        probs = predict_proba(cfg, params, batch)
        assert np.array_equal(probs.argmax(axis=1), logits.data.argmax(axis=1))


def _layernorm_np(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def test_micro_encoder_matches_straight_line_oracle():
    # independent plain-numpy reimplementation of the 1-layer 1-head d=4 path
    cfg = EncoderConfig(vocab_size=9, max_len=4, num_classes=2, layers=1,
                        model_dim=4, heads=1, ff_dim=6)
    params = init(cfg, seed=11)
    ids = np.array([[2, 5, 7, 3], [2, 8, 4, 3]])
    batch = _batch(ids)
    _, logits = forward(cfg, params, batch)

    p = {k: t.data.astype(np.float64) for k, t in params.items()}
    x = p["embed.token"][ids] + p["embed.position"][:4]
    h = _layernorm_np(x, p["layer00.norm1.gamma"], p["layer00.norm1.beta"])
    q = h @ p["layer00.attn.wq"] + p["layer00.attn.bq"]
    k = h @ p["layer00.attn.wk"] + p["layer00.attn.bk"]
    v = h @ p["layer00.attn.wv"] + p["layer00.attn.bv"]
    scores = q @ k.transpose(0, 2, 1) / np.sqrt(4.0)
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    probs = e / e.sum(axis=-1, keepdims=True)
    ctx = probs @ v
    x = x + ctx @ p["layer00.attn.wo"] + p["layer00.attn.bo"]
    h = _layernorm_np(x, p["layer00.norm2.gamma"], p["layer00.norm2.beta"])
    x = x + np.maximum(h @ p["layer00.ffn.w1"] + p["layer00.ffn.b1"], 0.0) @ p["layer00.ffn.w2"] \
        + p["layer00.ffn.b2"]
    x = _layernorm_np(x, p["final_norm.gamma"], p["final_norm.beta"])
    expected = x[:, 0, :] @ p["classifier.weight"] + p["classifier.bias"]
    assert np.allclose(logits.data, expected, atol=1e-5)


def test_micro_encoder_gradient_check():
    assert gradcheck.check_micro_encoder(seed=12) < 1e-4
