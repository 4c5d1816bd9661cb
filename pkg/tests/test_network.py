"""Network structure tests: shapes, pooling cost law, batching."""

import numpy as np
import numpy.testing as npt
import pytest

import sparsehop.bishop_network as bn
from sparsehop.bishop_network import (BiShopModuleParams, Model,
                                      NetworkConfig, bishop_module,
                                      build_network, column_block, decoder,
                                      encoder, encoder_lengths,
                                      network_forward, row_block)
from sparsehop.tabular_embedding import fit
from sparsehop.tensor_autodiff import Tensor

TINY = dict(g=4, g_shared=2, l=2, c=3, h=2, r=2, s=3, d_model=8, d_ff=12,
            heads=2, dropout=0.2, alpha_mode="fixed", alpha=1.5)


def _tiny_cfg(**kw):
    args = dict(TINY)
    args.update(kw)
    return NetworkConfig(**args)


def _tiny_model(rows, draft, task="classification", out_dim=2, **kw):
    cfg = _tiny_cfg(task=task, out_dim=out_dim, **kw)
    schema, bins, tables = fit(rows, draft, g=cfg.g, g_shared=cfg.g_shared,
                               l=cfg.l, d_model=cfg.d_model, seed=0)
    net = build_network(np.random.default_rng(1), cfg, schema.n)
    classes = [str(i) for i in range(out_dim)] \
        if task == "classification" else None
    return Model(cfg, schema, bins, tables, net, classes=classes)


def _toy_rows(n=30, seed=0):
    rng = np.random.default_rng(seed)
    return [{"a": float(rng.normal()), "b": float(rng.normal()),
             "c": ["x", "y"][i % 2]} for i in range(n)]


DRAFT = [("a", "numerical"), ("b", "numerical"), ("c", "categorical")]


def test_config_validation():
    with pytest.raises(ValueError):
        NetworkConfig(h=0)
    with pytest.raises(ValueError):
        NetworkConfig(alpha_mode="frozen")
    with pytest.raises(ValueError):
        NetworkConfig(task="ranking")
    with pytest.raises(ValueError):
        NetworkConfig(out_dim=0)


def test_patch_count_is_ceiling():
    rng = np.random.default_rng(0)
    assert NetworkConfig(g=32, l=8).p == 4
    for _ in range(50):
        g = int(rng.integers(1, 65))
        l = int(rng.integers(1, 17))
        assert NetworkConfig(g=g, l=l).p == -(-g // l)


def test_encoder_lengths_recurrence():
    assert encoder_lengths(4, 2, 2) == [4, 2, 1]
    assert encoder_lengths(5, 4, 3) == [5, 2, 1, 1]
    rng = np.random.default_rng(1)
    for _ in range(30):
        p = int(rng.integers(1, 40))
        r = int(rng.integers(2, 6))
        h = int(rng.integers(1, 5))
        lengths = encoder_lengths(p, r, h)
        assert lengths[0] == p and len(lengths) == h + 1
        for a, b in zip(lengths, lengths[1:]):
            assert b == max(-(-a // r), 1)


def test_blocks_preserve_shape():
    rng = np.random.default_rng(2)
    cfg = _tiny_cfg()
    m = BiShopModuleParams.create(np.random.default_rng(0), cfg, length=4)
    x = rng.normal(size=(5, 4, cfg.d_model))
    for block in (column_block, row_block, bishop_module):
        out = block(x, m)
        assert out.shape == x.shape
        assert np.all(np.isfinite(out.data))


def test_row_block_scores_never_n_by_n(monkeypatch):
    # the pooling design bounds attention cost: score matrices inside a
    # module are (len, len), (C, N) and (N, C) shaped, never (N, N)
    n = 13
    cfg = _tiny_cfg()
    m = BiShopModuleParams.create(np.random.default_rng(0), cfg, length=2)
    seen = []
    real = bn.entmax_attention

    def spy(scores, alpha_param):
        seen.append(scores.shape[-2:])
        return real(scores, alpha_param)

    monkeypatch.setattr(bn, "entmax_attention", spy)
    x = np.random.default_rng(3).normal(size=(n, 2, cfg.d_model))
    bishop_module(x, m)
    assert (cfg.c, n) in seen and (n, cfg.c) in seen
    assert (n, n) not in seen


def test_encoder_levels_follow_length_schedule():
    cfg = _tiny_cfg()
    enc = bn.EncoderParams.create(np.random.default_rng(0), cfg)
    n, p = 5, cfg.p
    x = np.random.default_rng(4).normal(size=(n, p, cfg.d_model))
    levels = encoder(x, enc)
    lengths = encoder_lengths(p, cfg.r, cfg.h)
    assert len(levels) == cfg.h + 1
    for level, length in zip(levels, lengths):
        assert level.shape == (n, length, cfg.d_model)


def test_decoder_output_always_n_s_d():
    cfg = _tiny_cfg()
    rng0 = np.random.default_rng(0)
    enc = bn.EncoderParams.create(rng0, cfg)
    for n in (2, 5):
        dec = bn.DecoderParams.create(np.random.default_rng(1), cfg, n)
        x = np.random.default_rng(5).normal(size=(n, cfg.p, cfg.d_model))
        out = decoder(encoder(x, enc), dec)
        assert out.shape == (n, cfg.s, cfg.d_model)


def test_forward_shapes_and_empty_batch():
    model = _tiny_model(_toy_rows(), DRAFT)
    data = (_toy_rows(4), None)
    num = np.array([[r["a"], r["b"]] for r in _toy_rows(4)])
    cat = np.array([[model.schema.cat_index("c", r["c"])]
                    for r in _toy_rows(4)])
    out = network_forward((num, cat), model)
    assert out.shape == (4, 2)
    empty = network_forward((num[:0], cat[:0]), model)
    assert empty.shape == (0, 2)


def test_forward_accepts_raw_rows():
    model = _tiny_model(_toy_rows(), DRAFT)
    rows = _toy_rows(3)
    out1 = network_forward(rows, model)
    num = np.array([[r["a"], r["b"]] for r in rows])
    cat = np.array([[model.schema.cat_index("c", r["c"])] for r in rows])
    out2 = network_forward((num, cat), model)
    npt.assert_allclose(out1.data, out2.data, atol=1e-14)


def test_forward_rows_are_batch_independent():
    # scoring a batch must equal scoring each row alone (inference mode)
    model = _tiny_model(_toy_rows(), DRAFT)
    rows = _toy_rows(5, seed=9)
    batch = network_forward(rows, model).data
    for i, row in enumerate(rows):
        single = network_forward([row], model).data
        npt.assert_allclose(batch[i], single[0], atol=1e-10)


def test_forward_deterministic_in_inference_mode():
    model = _tiny_model(_toy_rows(), DRAFT)
    rows = _toy_rows(3)
    out1 = network_forward(rows, model).data
    out2 = network_forward(rows, model).data
    npt.assert_array_equal(out1, out2)


def test_dropout_only_with_rng():
    model = _tiny_model(_toy_rows(), DRAFT)
    rows = _toy_rows(3)
    eval_out = network_forward(rows, model).data
    train_out = network_forward(rows, model,
                                rng=np.random.default_rng(0)).data
    assert not np.allclose(train_out, eval_out)


def test_regression_head_width():
    model = _tiny_model(_toy_rows(), DRAFT, task="regression", out_dim=1)
    out = network_forward(_toy_rows(3), model)
    assert out.shape == (3, 1)


def test_param_names_unique_and_learnable_alpha_counted():
    cfg = _tiny_cfg(alpha_mode="learnable")
    net = build_network(np.random.default_rng(0), cfg, 4)
    names = [n for n, _ in net.named_params()]
    assert len(names) == len(set(names))
    n_alphas = sum(name.endswith("alpha") for name in names)
    # 3 attention sub-layers per module, H encoder + H+1 decoder modules,
    # plus H cross-attentions
    assert n_alphas == 3 * (2 * cfg.h + 1) + cfg.h
    assert len(net.alphas()) == n_alphas
    fixed = build_network(np.random.default_rng(0),
                          _tiny_cfg(alpha_mode="fixed"), 4)
    assert not any(n.endswith("alpha") for n, _ in fixed.named_params())


def test_build_network_rejects_no_features():
    with pytest.raises(ValueError):
        build_network(np.random.default_rng(0), _tiny_cfg(), 0)
