from __future__ import annotations

import numpy as np
import pytest

from abrlab import nn
from abrlab.nn import (
    AdamW,
    Affine,
    CausalSelfAttention,
    Dropout,
    Embedding,
    LayerNorm,
    NnError,
    TransformerBlock,
    cosine_lr,
    cross_entropy,
    grad_check,
    mse,
)


def test_affine_identity_and_bias():
    rng = np.random.default_rng(0)
    layer = Affine(3, 3, rng, dtype=np.float64)
    layer.w.value = np.eye(3)
    layer.b.value = np.zeros(3)
    x = rng.normal(size=(4, 3))
    assert np.allclose(layer.forward(x), x)
    layer.b.value = np.array([1.0, 2.0, 3.0])
    out = layer.forward(np.zeros((2, 3)))
    assert np.allclose(out, np.tile(layer.b.value, (2, 1)))
    with pytest.raises(NnError):
        layer.forward(np.zeros((2, 4)))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_affine_ce_gradients(seed):
    rng = np.random.default_rng(seed)
    layer = Affine(4, 3, rng, dtype=np.float64)
    x = rng.normal(size=(5, 4))
    targets = np.zeros((5, 3))
    targets[np.arange(5), rng.integers(0, 3, 5)] = 1.0

    def fn():
        for p in layer.params():
            p.grad[...] = 0.0
        loss, dlogits = cross_entropy(layer.forward(x), targets)
        layer.backward(dlogits)
        return loss

    assert grad_check(fn, layer.params()) < 1e-4


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_layernorm_gradients(seed):
    rng = np.random.default_rng(seed)
    ln = LayerNorm(5, dtype=np.float64)
    ln.g.value = rng.normal(1.0, 0.2, size=5)
    ln.b.value = rng.normal(0.0, 0.2, size=5)
    x = rng.normal(size=(4, 5))
    proj = rng.normal(size=(4, 5))

    def fn():
        for p in ln.params():
            p.grad[...] = 0.0
        out = ln.forward(x)
        ln.backward(proj)
        return float((out * proj).sum())

    assert grad_check(fn, ln.params()) < 1e-4


def test_layernorm_normalizes():
    rng = np.random.default_rng(3)
    ln = LayerNorm(16, dtype=np.float64)
    x = rng.normal(2.0, 7.0, size=(10, 16))
    ln.forward(x)
    xhat = ln._xhat
    assert np.all(np.abs(xhat.mean(axis=-1)) < 1e-5)
    assert np.all(np.abs(xhat.var(axis=-1) - 1.0) < 1e-4)


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("heads", [1, 2])
def test_attention_block_gradients(seed, heads):
    rng = np.random.default_rng(seed)
    attn = CausalSelfAttention(4, heads, rng, dropout=0.0, dtype=np.float64)
    x = rng.normal(size=(2, 3, 4))
    proj = rng.normal(size=(2, 3, 4))

    def fn():
        for p in attn.params():
            p.grad[...] = 0.0
        out = attn.forward(x)
        attn.backward(proj)
        return float((out * proj).sum())

    assert grad_check(fn, attn.params()) < 1e-3


def test_attention_single_token_is_value_projection():
    rng = np.random.default_rng(1)
    attn = CausalSelfAttention(6, 1, rng, dtype=np.float64)
    x = rng.normal(size=(1, 6))
    out = attn.forward(x)
    manual = attn.wo.forward(attn.wv.forward(x[None]))[0]
    assert np.allclose(out, manual, atol=1e-12)


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(2)
    attn = CausalSelfAttention(8, 2, rng, dtype=np.float64)
    x = rng.normal(size=(2, 5, 8))
    attn.forward(x)
    att = attn._cache[3]
    assert np.allclose(att.sum(axis=-1), 1.0, atol=1e-6)


def test_attention_causality_exact():
    rng = np.random.default_rng(4)
    attn = CausalSelfAttention(8, 1, rng, dtype=np.float64)
    x = rng.normal(size=(5, 8))
    base = attn.forward(x)
    for j in range(1, 5):
        perturbed = x.copy()
        perturbed[j] += rng.normal(size=8)
        out = attn.forward(perturbed)
        assert np.array_equal(out[:j], base[:j])


def test_embedding_forward_backward():
    rng = np.random.default_rng(5)
    emb = Embedding(7, 3, rng, dtype=np.float64)
    idx = np.array([1, 1, 4])
    out = emb.forward(idx)
    assert out.shape == (3, 3)
    dy = np.ones((3, 3))
    emb.backward(dy)
    assert np.allclose(emb.table.grad[1], 2.0)
    assert np.allclose(emb.table.grad[4], 1.0)
    assert np.allclose(emb.table.grad[0], 0.0)
    with pytest.raises(NnError):
        emb.forward(np.array([9]))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_embedding_gradients(seed):
    rng = np.random.default_rng(seed)
    emb = Embedding(4, 3, rng, dtype=np.float64)
    idx = np.array([0, 2, 2, 3])
    proj = rng.normal(size=(4, 3))

    def fn():
        emb.table.grad[...] = 0.0
        out = emb.forward(idx)
        emb.backward(proj)
        return float((out * proj).sum())

    assert grad_check(fn, emb.params()) < 1e-4


def test_dropout_semantics():
    rng = np.random.default_rng(6)
    x = np.ones((100, 100))
    assert np.array_equal(Dropout(0.0).forward(x, True, rng), x)
    drop = Dropout(0.3)
    assert np.array_equal(drop.forward(x, False, rng), x)  # inference: identity
    kept = drop.forward(x, True, rng)
    assert abs(kept.mean() - 1.0) < 0.02  # inverted scaling preserves expectation
    zero_frac = float((kept == 0).mean())
    assert abs(zero_frac - 0.3) < 0.02


def test_dropout_gradients_with_frozen_mask():
    drop = Dropout(0.4)
    x = np.random.default_rng(7).normal(size=(5, 5))
    param = nn.Param("x", x.copy())
    proj = np.random.default_rng(8).normal(size=(5, 5))

    def fn():
        param.grad[...] = 0.0
        out = drop.forward(param.value, True, np.random.default_rng(99))
        param.grad += drop.backward(proj)
        return float((out * proj).sum())

    assert grad_check(fn, [param]) < 1e-4


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_transformer_block_gradients(seed):
    rng = np.random.default_rng(seed)
    block = TransformerBlock(4, 1, rng, dropout=0.0, mlp_ratio=2, dtype=np.float64)
    x = rng.normal(size=(2, 3, 4))
    proj = rng.normal(size=(2, 3, 4))

    def fn():
        for p in block.params():
            p.grad[...] = 0.0
        out = block.forward(x)
        block.backward(proj)
        return float((out * proj).sum())

    assert grad_check(fn, block.params()) < 1e-3


def test_cross_entropy_uniform_and_validation():
    logits = np.zeros((3, 6))
    targets = np.zeros((3, 6))
    targets[:, 2] = 1.0
    loss, dlogits = cross_entropy(logits, targets)
    assert loss == pytest.approx(np.log(6.0), abs=1e-9)
    assert dlogits.shape == logits.shape
    with pytest.raises(NnError):
        cross_entropy(logits, targets * 2.0)
    with pytest.raises(NnError):
        cross_entropy(logits, np.zeros((3, 5)))


def test_mse_zero_and_gradients():
    pred = np.array([[1.0, 2.0]])
    loss, dpred = mse(pred, pred.copy())
    assert loss == 0.0 and np.all(dpred == 0.0)
    rng = np.random.default_rng(0)
    layer = Affine(3, 2, rng, dtype=np.float64)
    x = rng.normal(size=(4, 3))
    target = rng.normal(size=(4, 2))

    def fn():
        for p in layer.params():
            p.grad[...] = 0.0
        loss, dpred = mse(layer.forward(x), target)
        layer.backward(dpred)
        return loss

    assert grad_check(fn, layer.params()) < 1e-4


def test_adamw_zero_grad_identity():
    p = nn.Param("p", np.array([1.0, -2.0], dtype=np.float32))
    opt = AdamW([p], lr=0.1, weight_decay=0.0)
    before = p.value.copy()
    opt.step()
    assert np.array_equal(p.value, before)


def test_adamw_decoupled_decay():
    p = nn.Param("p", np.array([2.0], dtype=np.float64))
    opt = AdamW([p], lr=0.1, weight_decay=0.5)
    opt.step()
    assert p.value[0] == pytest.approx(2.0 * (1 - 0.1 * 0.5), abs=1e-12)
    opt.step()
    assert p.value[0] == pytest.approx(2.0 * (1 - 0.1 * 0.5) ** 2, abs=1e-12)


def test_adamw_quadratic_convergence():
    p = nn.Param("x", np.array([1.0], dtype=np.float64))
    opt = AdamW([p], lr=0.01)
    for _ in range(500):
        opt.zero_grad()
        p.grad[...] = 2.0 * p.value
        opt.step()
    assert abs(p.value[0]) < 0.05


def test_adamw_rejects_nonfinite():
    p = nn.Param("p", np.array([1.0]))
    opt = AdamW([p])
    p.grad[...] = np.nan
    with pytest.raises(NnError):
        opt.step()


def test_cosine_lr_schedule():
    assert cosine_lr(0, 100) == pytest.approx(0.001, abs=1e-12)
    assert cosine_lr(100, 100) == pytest.approx(0.0, abs=1e-12)
    assert cosine_lr(50, 100) == pytest.approx(0.0005, abs=1e-12)
    with pytest.raises(NnError):
        cosine_lr(101, 100)
    with pytest.raises(NnError):
        cosine_lr(-1, 100)


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(11)
    arrays = {
        "a.w": rng.normal(size=(3, 4)).astype(np.float32),
        "a.b": rng.normal(size=4).astype(np.float32),
    }
    path = tmp_path / "ckpt.npz"
    nn.save_checkpoint(path, arrays, {"kind": "test"})
    loaded, meta = nn.load_checkpoint(path)
    assert meta["kind"] == "test"
    for name, arr in arrays.items():
        assert np.array_equal(loaded[name], arr)
        assert loaded[name].dtype == arr.dtype
