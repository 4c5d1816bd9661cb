"""Sparse Hopfield attention layer tests."""

import numpy as np
import numpy.testing as npt
import pytest

from sparsehop.entmax import AlphaParam, entmax_rows
from sparsehop.hopfield_layers import (GshWeights, PoolingPrototypes,
                                       dropout_mask, entmax_attention,
                                       gsh_forward, gsh_layer_forward,
                                       gsh_pooling_forward)
from sparsehop.hopfield_memory import MemoryBank, RetrievalConfig, \
    retrieval_step
from sparsehop.tensor_autodiff import Tape, Tensor, mean, mul, zero_grad


def _weights(rng, d_in, d_k, d_v, **kw):
    return GshWeights.create(rng, d_in, d_k, d_v, **kw)


def test_gsh_forward_shapes_and_rows():
    rng = np.random.default_rng(0)
    w = _weights(rng, 6, 4, 4, heads=2)
    r = Tensor(rng.normal(size=(5, 6)))
    y = Tensor(rng.normal(size=(9, 6)))
    out = gsh_forward(r, y, w)
    assert out.shape == (5, 4)
    assert np.all(np.isfinite(out.data))


def test_self_attention_when_r_equals_y():
    rng = np.random.default_rng(1)
    w = _weights(rng, 4, 4, 4)
    y = Tensor(rng.normal(size=(7, 4)))
    out1 = gsh_forward(y, y, w)
    out2 = gsh_forward(Tensor(y.data.copy()), y, w)
    npt.assert_allclose(out1.data, out2.data, atol=1e-15)


def test_identity_gsh_equals_retrieval_step():
    # single head, identity projections, beta matched: the layer output on
    # a one-row query must be one update of the memory dynamics
    rng = np.random.default_rng(2)
    for trial in range(20):
        d, m = 5, 9
        bank = MemoryBank(rng.normal(size=(d, m)))
        x = rng.normal(size=d)
        for alpha in (1.0, 1.5, 2.0):
            cfg = RetrievalConfig(alpha=alpha, beta=2.0)
            eye = np.eye(d)
            w = GshWeights(eye, eye, eye, heads=1, beta=cfg.beta,
                           alpha_param=AlphaParam(alpha))
            got = gsh_forward(x[None, :], bank.xi.T, w).data[0]
            want = retrieval_step(bank, x, cfg)
            npt.assert_allclose(got, want, atol=1e-12)


def test_pooling_uses_prototype_queries():
    rng = np.random.default_rng(3)
    w = _weights(rng, 6, 4, 4)
    protos = PoolingPrototypes.create(rng, 3, 4)
    y = Tensor(rng.normal(size=(11, 6)))
    out = gsh_pooling_forward(protos, y, w)
    assert out.shape == (3, 4)
    # prototype rows already live in key space: attention scores are
    # C x n_y, never n_y x n_y
    k = y.data @ w.w_k.data
    scores = w.beta * (protos.q.data @ k.T)
    p, _ = entmax_rows(scores, w.alpha_param.value)
    npt.assert_allclose(out.data, p @ (k @ w.w_v.data), atol=1e-12)


def test_layer_forward_attends_to_stored_patterns():
    rng = np.random.default_rng(4)
    w = _weights(rng, 6, 4, 4)
    r = Tensor(rng.normal(size=(2, 6)))
    stored_k = Tensor(rng.normal(size=(8, 4)))
    stored_v = Tensor(rng.normal(size=(8, 4)))
    out = gsh_layer_forward(r, stored_k, stored_v, w)
    assert out.shape == (2, 4)
    q = r.data @ w.w_q.data
    p, _ = entmax_rows(w.beta * (q @ stored_k.data.T),
                       w.alpha_param.value)
    npt.assert_allclose(out.data, p @ stored_v.data, atol=1e-12)


def test_attention_rows_are_distributions():
    rng = np.random.default_rng(5)
    scores = Tensor(rng.normal(size=(3, 4, 6)) * 2)
    p = entmax_attention(scores, AlphaParam(1.5)).data
    assert np.all(p >= 0)
    npt.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-10)


def test_score_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    h = 1e-6
    scores = rng.normal(size=(4, 5))
    g = rng.normal(size=(4, 5))
    for alpha in (1.3, 1.5, 2.0):
        t = Tensor(scores.copy(), requires_grad=True)
        with Tape() as tape:
            out = entmax_attention(t, AlphaParam(alpha))
            tape.backward(mean(mul(out, Tensor._wrap(g))))
        fd = np.zeros_like(scores)
        denom = g.size
        for i in range(scores.shape[0]):
            for j in range(scores.shape[1]):
                zp, zm = scores.copy(), scores.copy()
                zp[i, j] += h
                zm[i, j] -= h
                pp, _ = entmax_rows(zp, alpha)
                pm, _ = entmax_rows(zm, alpha)
                fd[i, j] = ((pp - pm) * g).sum() / (2 * h) / denom
        npt.assert_allclose(t.grad, fd, atol=5e-6)


def test_learnable_alpha_gets_a_gradient():
    rng = np.random.default_rng(7)
    a = Tensor(np.array(0.1), requires_grad=True)
    alpha_param = AlphaParam(a=a)
    scores = Tensor(rng.normal(size=(6, 5)), requires_grad=True)
    g = rng.normal(size=(6, 5))
    with Tape() as tape:
        out = entmax_attention(scores, alpha_param)
        tape.backward(mean(mul(out, Tensor._wrap(g))))
    assert a.grad is not None and a.grad.shape == ()

    # central difference through the sigmoid reparameterization
    h = 1e-5
    got = float(a.grad)
    zero_grad([a, scores])
    vals = []
    for da in (h, -h):
        p, _ = entmax_rows(scores.data,
                           AlphaParam(a=Tensor(a.data + da)).value)
        vals.append((p * g).mean())
    npt.assert_allclose(got, (vals[0] - vals[1]) / (2 * h), rtol=2e-3,
                        atol=1e-8)


def test_dropout_mask_statistics():
    rng = np.random.default_rng(8)
    mask = dropout_mask((2000,), 0.25, rng)
    zeros = (mask == 0).mean()
    assert abs(zeros - 0.25) < 0.05
    survivors = mask[mask > 0]
    npt.assert_allclose(survivors, 1.0 / 0.75, atol=1e-12)


def test_dropout_active_only_with_rng():
    rng = np.random.default_rng(9)
    w = _weights(rng, 4, 4, 4, dropout=0.5)
    y = Tensor(rng.normal(size=(6, 4)))
    eval_out = gsh_forward(y, y, w)       # rng omitted: inference mode
    eval_out2 = gsh_forward(y, y, w)
    npt.assert_allclose(eval_out.data, eval_out2.data, atol=1e-15)
    train_out = gsh_forward(y, y, w, rng=np.random.default_rng(0))
    assert not np.allclose(train_out.data, eval_out.data)


def test_weight_validation():
    rng = np.random.default_rng(10)
    with pytest.raises(ValueError):
        GshWeights(np.zeros((4, 4)), np.zeros((4, 3)), np.zeros((4, 4)))
    with pytest.raises(ValueError):
        GshWeights.create(rng, 4, 4, 4, heads=3)
    with pytest.raises(ValueError):
        GshWeights.create(rng, 4, 4, 4, beta=-1.0)
    with pytest.raises(ValueError):
        GshWeights.create(rng, 4, 4, 4,
                          alpha_param=AlphaParam(2.5))
    w = _weights(rng, 4, 4, 4)
    with pytest.raises(ValueError):
        gsh_forward(Tensor(np.zeros((2, 5))), Tensor(np.zeros((3, 4))), w)


def test_default_beta_is_inverse_sqrt_head_dim():
    rng = np.random.default_rng(11)
    w = _weights(rng, 8, 8, 8, heads=2)
    npt.assert_allclose(w.beta, 1.0 / np.sqrt(4.0))
