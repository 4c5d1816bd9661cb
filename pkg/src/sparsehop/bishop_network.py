"""Bi-directional sparse Hopfield network over patched tabular embeddings.

Input rows become (batch, N, len, D) tensors. Each BiSHop module first runs
a column block (self-attention over the len patch positions within each
feature) and then a row block (pooling the N features into C prototypes per
position and re-expanding, so score matrices are C x N and N x C, never
N x N). The encoder stacks H modules with patch merging between levels; the
decoder grows a learnable positional state of S slots per feature,
cross-attending to every encoder level; a flatten-MLP predictor emits
logits or a regression scalar.

All attention sub-layers carry their own sparsity parameter. Batch-level
work rides the stacked-matmul autodiff ops, so one forward is a fixed
number of tape nodes regardless of batch size.
"""

import numpy as np

from .entmax import AlphaParam
from .tabular_embedding import _ple_matrix, encode_rows
from .tensor_autodiff import (Tensor, add, concat, gather_rows, layer_norm,
                              matmul, relu, reshape, scale, slice_axis,
                              tile_leading, transpose)
from .hopfield_layers import GshWeights, _maybe_dropout, entmax_attention

__all__ = [
    "NetworkConfig", "Mlp", "BiShopModuleParams", "EncoderParams",
    "DecoderParams", "PredictorParams", "NetworkParams", "Model",
    "column_block", "row_block", "bishop_module", "encoder", "decoder",
    "network_forward", "build_network", "encoder_lengths",
]


class NetworkConfig:
    """Structural hyperparameters of one network instance."""

    def __init__(self, g=32, g_shared=8, l=8, c=10, h=3, r=4, s=24,
                 d_model=512, d_ff=256, heads=4, dropout=0.2,
                 alpha_mode="learnable", alpha=1.5, beta=None,
                 task="classification", out_dim=2):
        if h < 1 or c < 1 or s < 1 or r < 1:
            raise ValueError(f"H={h}, C={c}, S={s}, r={r} must be >= 1")
        if alpha_mode not in ("learnable", "fixed"):
            raise ValueError(f"unknown alpha mode {alpha_mode!r}")
        if task not in ("classification", "regression"):
            raise ValueError(f"unknown task {task!r}")
        if out_dim < 1:
            raise ValueError("output dimension must be >= 1")
        self.g, self.g_shared, self.l = int(g), int(g_shared), int(l)
        self.c, self.h, self.r, self.s = int(c), int(h), int(r), int(s)
        self.d_model, self.d_ff = int(d_model), int(d_ff)
        self.heads = int(heads)
        self.dropout = float(dropout)
        self.alpha_mode = alpha_mode
        self.alpha = float(alpha)
        self.beta = beta if beta is None else float(beta)
        self.task = task
        self.out_dim = int(out_dim)

    @property
    def p(self):
        return -(-self.g // self.l)

    def to_dict(self):
        return {k: getattr(self, k) for k in (
            "g", "g_shared", "l", "c", "h", "r", "s", "d_model", "d_ff",
            "heads", "dropout", "alpha_mode", "alpha", "beta", "task",
            "out_dim")}


def encoder_lengths(p, r, h):
    """Patch lengths per encoder level: ceiling division, floor 1."""
    lengths = [p]
    for _ in range(h):
        lengths.append(max(-(-lengths[-1] // r), 1))
    return lengths


def _new_alpha(cfg):
    if cfg.alpha_mode == "learnable":
        return AlphaParam(a=Tensor(np.array(0.0), requires_grad=True))
    return AlphaParam(cfg.alpha)


def _linear_init(rng, rows, cols):
    lim = 1.0 / np.sqrt(rows)
    return Tensor(rng.uniform(-lim, lim, size=(rows, cols)),
                  requires_grad=True)


def _bias_init(rng, fan_in, size):
    """Bias drawn like the matching weight rows, never zeros: an exactly
    zero bias leaves degenerate instances (all-zero patches from values at
    a column's training minimum) sitting on the relu kink at zero, where
    the loss has no derivative and finite-difference checks diverge."""
    lim = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-lim, lim, size=size), requires_grad=True)


class Mlp:
    """Two-layer position-wise MLP with relu and optional inner dropout."""

    __slots__ = ("w1", "b1", "w2", "b2", "dropout")

    def __init__(self, w1, b1, w2, b2, dropout=0.0):
        self.w1, self.b1, self.w2, self.b2 = w1, b1, w2, b2
        self.dropout = float(dropout)

    @classmethod
    def create(cls, rng, d_in, d_hidden, d_out, dropout=0.0):
        return cls(_linear_init(rng, d_in, d_hidden),
                   _bias_init(rng, d_in, d_hidden),
                   _linear_init(rng, d_hidden, d_out),
                   _bias_init(rng, d_hidden, d_out), dropout)

    def apply(self, x, rng=None):
        shape = x.shape
        flat = reshape(x, (-1, shape[-1]))
        n = flat.shape[0]
        hidden = relu(add(matmul(flat, self.w1), tile_leading(self.b1, n)))
        hidden = _maybe_dropout(hidden, self.dropout, rng)
        out = add(matmul(hidden, self.w2), tile_leading(self.b2, n))
        return reshape(out, shape[:-1] + (out.shape[-1],))

    def params(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def named_params(self, prefix=""):
        return list(zip((f"{prefix}w1", f"{prefix}b1",
                         f"{prefix}w2", f"{prefix}b2"), self.params()))


def _ln_params(d):
    return (Tensor(np.ones(d), requires_grad=True),
            Tensor(np.zeros(d), requires_grad=True))


def _proj(x, w):
    """(B, len, D_in) @ (D_in, D_out) via a 2-D reshape round trip."""
    b, n, _ = x.shape
    return reshape(matmul(reshape(x, (b * n, x.shape[-1])), w),
                   (b, n, w.shape[1]))


def _heads_split(x, heads):
    b, n, d = x.shape
    return reshape(transpose(reshape(x, (b, n, heads, d // heads)),
                             (0, 2, 1, 3)), (b * heads, n, d // heads))


def _heads_merge(x, heads):
    bh, n, dh = x.shape
    return reshape(transpose(reshape(x, (bh // heads, heads, n, dh)),
                             (0, 2, 1, 3)), (bh // heads, n, heads * dh))


def _batched_attend(q, k, v, w, rng):
    """Stacked multi-head entmax attention on (B, len, D) tensors."""
    qh = _heads_split(q, w.heads)
    kh = _heads_split(k, w.heads)
    vh = _heads_split(v, w.heads)
    scores = scale(matmul(qh, transpose(kh, (0, 2, 1))), w.beta)
    attn = entmax_attention(scores, w.alpha_param)
    out = _heads_merge(matmul(attn, vh), w.heads)
    return _maybe_dropout(out, w.dropout, rng)


def _batched_gsh(r, y, w, rng=None):
    q = _proj(r, w.w_q)
    k = _proj(y, w.w_k)
    v = _proj(k, w.w_v)
    return _batched_attend(q, k, v, w, rng)


def _batched_pool(protos, y, w, rng=None):
    k = _proj(y, w.w_k)
    v = _proj(k, w.w_v)
    return _batched_attend(protos, k, v, w, rng)


class BiShopModuleParams:
    """One module: column block (within-feature) + row block (across
    features). protos holds the C pooling prototypes per patch position,
    laid out position-major as (len, C, D)."""

    def __init__(self, col_attn, col_mlp, col_ln, protos, pool_attn,
                 expand_attn, row_mlp, row_ln, length, c):
        self.col_attn = col_attn
        self.col_mlp = col_mlp
        self.col_ln1, self.col_ln2 = col_ln
        self.protos = protos
        self.pool_attn = pool_attn
        self.expand_attn = expand_attn
        self.row_mlp = row_mlp
        self.row_ln1, self.row_ln2 = row_ln
        self.length = int(length)
        self.c = int(c)

    @classmethod
    def create(cls, rng, cfg, length):
        d = cfg.d_model
        make_attn = lambda: GshWeights.create(
            rng, d, d, d, heads=cfg.heads, beta=cfg.beta,
            alpha_param=_new_alpha(cfg), dropout=cfg.dropout)
        col_attn = make_attn()
        col_mlp = Mlp.create(rng, d, cfg.d_ff, d, cfg.dropout)
        col_ln = (_ln_params(d), _ln_params(d))
        lim = 1.0 / np.sqrt(d)
        protos = Tensor(rng.uniform(-lim, lim, size=(length, cfg.c, d)),
                        requires_grad=True)
        pool_attn = make_attn()
        expand_attn = make_attn()
        row_mlp = Mlp.create(rng, d, cfg.d_ff, d, cfg.dropout)
        row_ln = (_ln_params(d), _ln_params(d))
        return cls(col_attn, col_mlp, col_ln, protos, pool_attn,
                   expand_attn, row_mlp, row_ln, length, cfg.c)

    def params(self):
        return [t for _, t in self.named_params()]

    def named_params(self, prefix=""):
        def ln(tag, pair):
            return [(f"{prefix}{tag}.gain", pair[0]),
                    (f"{prefix}{tag}.bias", pair[1])]
        out = self.col_attn.named_params(f"{prefix}col_attn.")
        out += self.col_mlp.named_params(f"{prefix}col_mlp.")
        out += ln("col_ln1", self.col_ln1) + ln("col_ln2", self.col_ln2)
        out += [(f"{prefix}protos", self.protos)]
        out += self.pool_attn.named_params(f"{prefix}pool_attn.")
        out += self.expand_attn.named_params(f"{prefix}expand_attn.")
        out += self.row_mlp.named_params(f"{prefix}row_mlp.")
        out += ln("row_ln1", self.row_ln1) + ln("row_ln2", self.row_ln2)
        return out


def _residual_stage(x, sub_out, ln1, ln2, mlp, rng):
    """LayerNorm(x + sub_out), then LayerNorm(h + MLP(h))."""
    h = layer_norm(add(x, sub_out), *ln1)
    return layer_norm(add(h, mlp.apply(h, rng)), *ln2)


def _column_core(x, m, rng):
    """x: (b, N, len, D); self-attention over len within each feature."""
    b, n, length, d = x.shape
    flat = reshape(x, (b * n, length, d))
    attended = _batched_gsh(flat, flat, m.col_attn, rng)
    out = _residual_stage(flat, attended, (m.col_ln1[0], m.col_ln1[1]),
                          (m.col_ln2[0], m.col_ln2[1]), m.col_mlp, rng)
    return reshape(out, (b, n, length, d))


def _row_core(x, m, rng):
    """x: (b, N, len, D); pool features to C prototypes per position and
    re-expand; residuals reuse the block input per the module equations."""
    b, n, length, d = x.shape
    pos_major = reshape(transpose(x, (0, 2, 1, 3)), (b * length, n, d))
    protos = reshape(tile_leading(m.protos, b), (b * length, m.c, d))
    pooled = _batched_pool(protos, pos_major, m.pool_attn, rng)
    expanded = _batched_gsh(pos_major, pooled, m.expand_attn, rng)
    out = _residual_stage(pos_major, expanded,
                          (m.row_ln1[0], m.row_ln1[1]),
                          (m.row_ln2[0], m.row_ln2[1]), m.row_mlp, rng)
    return transpose(reshape(out, (b, length, n, d)), (0, 2, 1, 3))


def _module_core(x, m, rng):
    return _row_core(_column_core(x, m, rng), m, rng)


def _check_instance(x, m):
    if x.data.ndim != 3:
        raise ValueError(f"expected an (N, len, D) tensor, got {x.shape}")
    if x.shape[1] != m.length or x.shape[2] != m.col_attn.w_q.shape[0]:
        raise ValueError(f"input {x.shape} does not match module "
                         f"(len={m.length}, D={m.col_attn.w_q.shape[0]})")


def _as_t(x):
    return x if isinstance(x, Tensor) else Tensor._wrap(
        np.asarray(x, dtype=np.float64))


def column_block(x, m, rng=None):
    """Single-instance column block: (N, len, D) -> (N, len, D)."""
    x = _as_t(x)
    _check_instance(x, m)
    x4 = reshape(x, (1,) + x.shape)
    return reshape(_column_core(x4, m, rng), x.shape)


def row_block(x, m, rng=None):
    """Single-instance row block: (N, len, D) -> (N, len, D)."""
    x = _as_t(x)
    _check_instance(x, m)
    x4 = reshape(x, (1,) + x.shape)
    return reshape(_row_core(x4, m, rng), x.shape)


def bishop_module(x, m, rng=None):
    """Column block then row block, shape preserving."""
    x = _as_t(x)
    _check_instance(x, m)
    x4 = reshape(x, (1,) + x.shape)
    return reshape(_module_core(x4, m, rng), x.shape)


class EncoderParams:
    """H modules with a learnable r*D -> D merge map between levels."""

    def __init__(self, modules, merges, r, lengths):
        self.modules = list(modules)
        self.merges = list(merges)
        self.r = int(r)
        self.lengths = list(lengths)

    @classmethod
    def create(cls, rng, cfg):
        lengths = encoder_lengths(cfg.p, cfg.r, cfg.h)
        modules, merges = [], []
        for h in range(1, cfg.h + 1):
            merges.append((_linear_init(rng, cfg.r * cfg.d_model,
                                        cfg.d_model),
                           _bias_init(rng, cfg.r * cfg.d_model,
                                      cfg.d_model)))
            modules.append(BiShopModuleParams.create(rng, cfg, lengths[h]))
        return cls(modules, merges, cfg.r, lengths)

    def params(self):
        return [t for _, t in self.named_params()]

    def named_params(self, prefix="enc."):
        out = []
        for i, ((w, b), m) in enumerate(zip(self.merges, self.modules)):
            out += [(f"{prefix}merge{i}.w", w), (f"{prefix}merge{i}.b", b)]
            out += m.named_params(f"{prefix}mod{i}.")
        return out


def _merge_patches(x, merge, r, target_len):
    """(b, N, len, D) -> (b, N, target_len, D): group r adjacent patch
    vectors (zero-padded at the end) through the level's linear map."""
    b, n, length, d = x.shape
    pad = target_len * r - length
    if pad:
        x = concat([x, Tensor._wrap(np.zeros((b, n, pad, d)))], axis=2)
    grouped = reshape(x, (b * n * target_len, r * d))
    w, bias = merge
    merged = add(matmul(grouped, w),
                 tile_leading(bias, grouped.shape[0]))
    return reshape(merged, (b, n, target_len, d))


def encoder(x_patch, enc, rng=None):
    """All encoder levels, coarsest last: [X^0 .. X^H], X^0 = the input."""
    x = _as_t(x_patch)
    single = x.data.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    levels = [x]
    for h, (module, merge) in enumerate(zip(enc.modules, enc.merges),
                                        start=1):
        merged = _merge_patches(levels[-1], merge, enc.r, enc.lengths[h])
        levels.append(_module_core(merged, module, rng))
    if single:
        return [reshape(t, t.shape[1:]) for t in levels]
    return levels


class DecoderParams:
    """Learnable positional state plus per-level module, cross-attention,
    and residual-MLP parameters."""

    def __init__(self, e_pos, modules, cross, mlps, lns):
        self.e_pos = e_pos
        self.modules = list(modules)
        self.cross = list(cross)
        self.mlps = list(mlps)
        self.lns = list(lns)

    @classmethod
    def create(cls, rng, cfg, n_features):
        d = cfg.d_model
        lim = 1.0 / np.sqrt(d)
        e_pos = Tensor(rng.uniform(-lim, lim,
                                   size=(n_features, cfg.s, d)),
                       requires_grad=True)
        modules = [BiShopModuleParams.create(rng, cfg, cfg.s)
                   for _ in range(cfg.h + 1)]
        cross = [GshWeights.create(rng, d, d, d, heads=cfg.heads,
                                   beta=cfg.beta,
                                   alpha_param=_new_alpha(cfg),
                                   dropout=cfg.dropout)
                 for _ in range(cfg.h)]
        mlps = [Mlp.create(rng, d, cfg.d_ff, d, cfg.dropout)
                for _ in range(cfg.h)]
        lns = [(_ln_params(d), _ln_params(d)) for _ in range(cfg.h)]
        # The predictor flattens n*s unit-variance vectors, so one Adam step
        # at rate lr moves its hidden pre-activations by roughly
        # lr * 0.8 * n * s * d * gain (every weight coordinate steps by
        # +/-lr with signs aligned to the inputs). A 1/(n*s) gain on the
        # network's final norm keeps that swing at the lr*d scale for any
        # layout; the gain is learnable and recovers during training.
        lns[-1][1][0].data[:] = 1.0 / (n_features * cfg.s)
        return cls(e_pos, modules, cross, mlps, lns)

    def params(self):
        return [t for _, t in self.named_params()]

    def named_params(self, prefix="dec."):
        out = [(f"{prefix}e_pos", self.e_pos)]
        out += self.modules[0].named_params(f"{prefix}mod0.")
        for h in range(len(self.cross)):
            out += self.modules[h + 1].named_params(f"{prefix}mod{h + 1}.")
            out += self.cross[h].named_params(f"{prefix}cross{h}.")
            out += self.mlps[h].named_params(f"{prefix}mlp{h}.")
            out += [(f"{prefix}ln{h}a.gain", self.lns[h][0][0]),
                    (f"{prefix}ln{h}a.bias", self.lns[h][0][1]),
                    (f"{prefix}ln{h}b.gain", self.lns[h][1][0]),
                    (f"{prefix}ln{h}b.bias", self.lns[h][1][1])]
        return out


def decoder(levels, dec, rng=None):
    """Cross-attend the positional state to every encoder level.

    The level-0 module runs on E^pos alone, so the first two module
    applications are batch-independent and computed once; batch coupling
    starts at the first cross-attention.
    """
    if len(levels) != len(dec.cross) + 1:
        raise ValueError(f"decoder built for {len(dec.cross)} levels, "
                         f"encoder produced {len(levels) - 1}")
    levels = [_as_t(t) for t in levels]
    single = levels[0].data.ndim == 3
    if single:
        levels = [reshape(t, (1,) + t.shape) for t in levels]
    b = levels[0].shape[0]
    n, s, d = dec.e_pos.shape
    state = _module_core(reshape(dec.e_pos, (1, n, s, d)), dec.modules[0],
                         rng)
    for h in range(1, len(dec.cross) + 1):
        pos = _module_core(state, dec.modules[h], rng)
        if pos.shape[0] == 1 and b > 1:
            pos = reshape(tile_leading(reshape(pos, (n, s, d)), b),
                          (b, n, s, d))
        enc_h = levels[h]
        queries = reshape(pos, (b * n, s, d))
        keys = reshape(enc_h, (b * n, enc_h.shape[2], d))
        attended = _batched_gsh(queries, keys, dec.cross[h - 1], rng)
        merged = _residual_stage(queries, attended, dec.lns[h - 1][0],
                                 dec.lns[h - 1][1], dec.mlps[h - 1], rng)
        state = reshape(merged, (b, n, s, d))
    if single:
        return reshape(state, state.shape[1:])
    return state


class PredictorParams:
    """Flatten N*S*D and map through one hidden layer to the output."""

    def __init__(self, mlp, flat_dim):
        self.mlp = mlp
        self.flat_dim = int(flat_dim)

    @classmethod
    def create(cls, rng, cfg, n_features):
        flat = n_features * cfg.s * cfg.d_model
        return cls(Mlp.create(rng, flat, cfg.d_ff, cfg.out_dim,
                              cfg.dropout), flat)

    def params(self):
        return self.mlp.params()

    def named_params(self, prefix="pred."):
        return self.mlp.named_params(prefix)

    def apply(self, x, rng=None):
        b = x.shape[0]
        flat = reshape(x, (b, self.flat_dim))
        return self.mlp.apply(flat, rng)


class NetworkParams:
    """Encoder + decoder + predictor parameter bundle."""

    def __init__(self, enc, dec, predictor):
        self.enc = enc
        self.dec = dec
        self.predictor = predictor

    def params(self):
        return self.enc.params() + self.dec.params() \
            + self.predictor.params()

    def named_params(self):
        return (self.enc.named_params() + self.dec.named_params()
                + self.predictor.named_params())

    def alphas(self):
        """Current alpha value of every attention sub-layer, in parameter
        order (reported for inspection, e.g. after training)."""
        out = []
        for m in self.enc.modules + self.dec.modules:
            out += [m.col_attn.alpha_param.value,
                    m.pool_attn.alpha_param.value,
                    m.expand_attn.alpha_param.value]
        out += [c.alpha_param.value for c in self.dec.cross]
        return out


def build_network(rng, cfg, n_features):
    """Fresh network parameters for a schema with n_features columns."""
    if n_features < 1:
        raise ValueError("need at least one feature")
    enc = EncoderParams.create(rng, cfg)
    dec = DecoderParams.create(rng, cfg, n_features)
    predictor = PredictorParams.create(rng, cfg, n_features)
    return NetworkParams(enc, dec, predictor)


class Model:
    """Everything needed to score rows: fitted embedding artifacts, the
    network, its config, and (for classification) the label vocabulary."""

    def __init__(self, config, schema, bins, tables, net, classes=None):
        self.config = config
        self.schema = schema
        self.bins = bins
        self.tables = tables
        self.net = net
        self.classes = list(classes) if classes is not None else None

    def params(self):
        return self.tables.params() + self.net.params()

    def named_params(self):
        return self.tables.named_params() + self.net.named_params()


def _embed_batch(num, cat, model):
    schema, bins, tables = model.schema, model.bins, model.tables
    b = num.shape[0]
    blocks = []
    if schema.n_num:
        blocks.append(Tensor._wrap(_ple_matrix(num, bins.boundaries)))
    if schema.n_cat:
        feats = []
        for i in range(schema.n_cat):
            individual = gather_rows(tables.e_ind[i], cat[:, i])
            shared = reshape(tile_leading(
                slice_axis(tables.e_shared, 0, i, i + 1), b),
                (b, tables.g_shared))
            feats.append(reshape(concat([shared, individual], axis=1),
                                 (b, 1, tables.g)))
        blocks.append(concat(feats, axis=1) if len(feats) > 1 else feats[0])
    emb = concat(blocks, axis=1) if len(blocks) > 1 else blocks[0]
    pad = tables.p * tables.l - tables.g
    if pad:
        emb = concat([emb, Tensor._wrap(np.zeros(
            (b, schema.n, pad)))], axis=2)
    flat = reshape(emb, (b * schema.n * tables.p, tables.l))
    lifted = add(matmul(flat, tables.patch_w),
                 tile_leading(tables.patch_b, flat.shape[0]))
    return reshape(lifted, (b, schema.n, tables.p, tables.d_model))


def network_forward(rows, model, rng=None):
    """Score a batch: embed, patch, encode, decode, predict.

    rows is either a sequence of raw row mappings or a pre-encoded
    (numeric matrix, categorical index matrix) pair. Returns (b, out_dim)
    logits for classification or (b, 1) values for regression.
    """
    if isinstance(rows, tuple):
        num, cat = rows
    else:
        num, cat = encode_rows(rows, model.schema, model.bins)
    num = np.asarray(num, dtype=np.float64)
    cat = np.asarray(cat, dtype=np.intp)
    if num.shape[0] == 0:
        return Tensor._wrap(np.zeros((0, model.config.out_dim)))
    x = _embed_batch(num, cat, model)
    levels = encoder(x, model.net.enc, rng)
    state = decoder(levels, model.net.dec, rng)
    return model.net.predictor.apply(state, rng)
