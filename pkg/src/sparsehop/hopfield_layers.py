"""Sparse Hopfield attention layers.

The GSH family replaces softmax attention with row-wise alpha-entmax:

    GSH(R, Y) = entmax_rows(beta * (R W_Q)(Y W_K)^T, alpha) @ (Y W_K) W_V

Three configurations share the weight container: gsh_forward attends
queries against a key source Y (self-attention is R = Y), gsh_pooling_forward
swaps the query side for learnable prototypes with W_Q fixed to identity,
and gsh_layer_forward attends against learnable stored key/value patterns
decoupled from the input. All forwards record on the active autodiff tape;
the alpha pre-parameter receives its gradient by central finite differences
inside the entmax op's backward rule.
"""

import numpy as np

from .entmax import AlphaParam, entmax_rows, entmax_rows_grad
from .tensor_autodiff import (Tensor, record_op, matmul, mul, scale,
                              reshape, transpose)

__all__ = [
    "GshWeights", "PoolingPrototypes", "entmax_attention", "gsh_forward",
    "gsh_pooling_forward", "gsh_layer_forward", "alpha_backward",
    "dropout_mask",
]

ALPHA_FD_STEP = 1e-4


def _t(x):
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


class GshWeights:
    """Projection weights and scalar knobs for one GSH layer.

    w_q, w_k: D_in x D_k; w_v: D_k x D_v (the value projection applies to
    the projected keys, so values are (Y W_K) W_V). heads must divide both
    D_k and D_v; queries and keys split along D_k, values along D_v. beta
    defaults to 1/sqrt(D_k / heads). One alpha per layer.
    """

    __slots__ = ("w_q", "w_k", "w_v", "heads", "beta", "alpha_param",
                 "dropout")

    def __init__(self, w_q, w_k, w_v, heads=1, beta=None, alpha_param=None,
                 dropout=0.0):
        self.w_q, self.w_k, self.w_v = _t(w_q), _t(w_k), _t(w_v)
        if self.w_q.data.ndim != 2 or self.w_q.shape != self.w_k.shape:
            raise ValueError(f"W_Q and W_K must share a D_in x D_k shape, "
                             f"got {self.w_q.shape} and {self.w_k.shape}")
        d_k = self.w_q.shape[1]
        if self.w_v.data.ndim != 2 or self.w_v.shape[0] != d_k:
            raise ValueError(f"W_V must be D_k x D_v with D_k={d_k}, "
                             f"got {self.w_v.shape}")
        d_v = self.w_v.shape[1]
        if heads < 1 or d_k % heads or d_v % heads:
            raise ValueError(f"heads={heads} must divide D_k={d_k} and "
                             f"D_v={d_v}")
        self.heads = int(heads)
        self.beta = float(beta) if beta is not None \
            else 1.0 / np.sqrt(d_k / self.heads)
        if self.beta <= 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if alpha_param is None:
            alpha_param = AlphaParam(1.5)
        if not 1.0 <= alpha_param.value <= 2.0:
            raise ValueError(f"alpha must lie in [1, 2], got "
                             f"{alpha_param.value}")
        self.alpha_param = alpha_param
        if not 0.0 <= dropout < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {dropout}")
        self.dropout = float(dropout)

    @classmethod
    def create(cls, rng, d_in, d_k, d_v, heads=1, beta=None,
               alpha_param=None, dropout=0.0):
        """Fresh learnable weights, uniform on +-1/sqrt(fan_in)."""
        def init(rows, cols):
            lim = 1.0 / np.sqrt(rows)
            return Tensor(rng.uniform(-lim, lim, size=(rows, cols)),
                          requires_grad=True)
        return cls(init(d_in, d_k), init(d_in, d_k), init(d_k, d_v),
                   heads=heads, beta=beta, alpha_param=alpha_param,
                   dropout=dropout)

    def params(self):
        return [t for _, t in self.named_params()]

    def named_params(self, prefix=""):
        out = [(f"{prefix}w_q", self.w_q), (f"{prefix}w_k", self.w_k),
               (f"{prefix}w_v", self.w_v)]
        if self.alpha_param.learnable:
            out.append((f"{prefix}alpha", self.alpha_param.a))
        return out


class PoolingPrototypes:
    """C x D_k learnable prototype queries for the pooling configuration."""

    __slots__ = ("q",)

    def __init__(self, q):
        self.q = _t(q)
        if self.q.data.ndim != 2 or self.q.shape[0] < 1:
            raise ValueError(f"prototypes must be C x D_k with C >= 1, "
                             f"got shape {self.q.shape}")

    @classmethod
    def create(cls, rng, c, d_k):
        lim = 1.0 / np.sqrt(d_k)
        return cls(Tensor(rng.uniform(-lim, lim, size=(c, d_k)),
                          requires_grad=True))

    def params(self):
        return [self.q]

    def named_params(self, prefix=""):
        return [(f"{prefix}q", self.q)]


def _fd_step(alpha, h):
    """Clip the alpha finite-difference step so both evaluation points stay
    strictly inside (1, 2); near the ends the true derivative is damped by
    the sigmoid chain anyway."""
    return min(h, 0.5 * (alpha - 1.0), 0.5 * (2.0 - alpha))


def _rows(z):
    return z.reshape(-1, z.shape[-1])


def alpha_backward(w, scores, g_attn, h=ALPHA_FD_STEP):
    """Gradient of the loss w.r.t. the layer's alpha pre-parameter a.

    scores are the already-scaled attention logits, g_attn the upstream
    gradient on the attention weights (same shape). d attn / d alpha is
    taken by central finite differences (two extra entmax evaluations),
    then chained through alpha = 1 + sigmoid(a).
    """
    alpha = w.alpha_param.value
    if not 1.0 < alpha < 2.0:
        raise ValueError(f"alpha gradient needs alpha strictly inside "
                         f"(1, 2), got {alpha}")
    scores = np.asarray(scores, dtype=np.float64)
    g_attn = np.asarray(g_attn, dtype=np.float64)
    eff = _fd_step(alpha, h)
    p_hi, _ = entmax_rows(_rows(scores), alpha + eff)
    p_lo, _ = entmax_rows(_rows(scores), alpha - eff)
    d_alpha = float((_rows(g_attn) * (p_hi - p_lo)).sum() / (2.0 * eff))
    return d_alpha * (alpha - 1.0) * (2.0 - alpha)


def entmax_attention(scores, alpha_param):
    """Row-wise entmax over the last axis of a (possibly stacked) score
    tensor, as a tape-recorded op.

    The score gradient uses the exact entmax Jacobian. When the alpha
    pre-parameter is a learnable tensor, it joins the op's inputs and gets
    the finite-difference gradient of alpha_backward.
    """
    scores = _t(scores)
    alpha = alpha_param.value
    flat = _rows(scores.data)
    p, tau = entmax_rows(flat, alpha)
    p = p.reshape(scores.data.shape)
    inputs = [scores]
    learnable = alpha_param.learnable and isinstance(alpha_param.a, Tensor)
    if learnable:
        inputs.append(alpha_param.a)

    def backward(g, needs):
        g_scores = entmax_rows_grad(p, g, alpha) if needs[0] else None
        if learnable and needs[1]:
            eff = _fd_step(alpha, ALPHA_FD_STEP)
            # warm start both probes from the forward thresholds: the
            # solutions at alpha +/- eff sit within O(eff) of them
            p_hi, _ = entmax_rows(flat, alpha + eff, tau0=tau)
            p_lo, _ = entmax_rows(flat, alpha - eff, tau0=tau)
            d_alpha = (_rows(g) * (p_hi - p_lo)).sum() / (2.0 * eff)
            g_a = np.asarray(d_alpha * (alpha - 1.0) * (2.0 - alpha))
            return g_scores, g_a.reshape(alpha_param.a.data.shape)
        return (g_scores,) if not learnable else (g_scores, None)

    return record_op(p, inputs, backward)


def dropout_mask(shape, rate, rng):
    """Inverted-dropout mask: zeros with probability rate, survivors scaled
    by 1/(1-rate) so the expectation is the identity."""
    return (rng.random(shape) >= rate) / (1.0 - rate)


def _maybe_dropout(t, rate, rng):
    if rng is None or rate == 0.0:
        return t
    return mul(t, Tensor._wrap(dropout_mask(t.shape, rate, rng)))


def _split_heads(t, heads):
    n, d = t.shape
    return transpose(reshape(t, (n, heads, d // heads)), (1, 0, 2))


def _merge_heads(t):
    heads, n, dh = t.shape
    return reshape(transpose(t, (1, 0, 2)), (n, heads * dh))


def _attend(q, k, v, w, rng):
    """Shared head-split attention core: entmax(beta q k^T) v per head."""
    qh = _split_heads(q, w.heads)
    kh = _split_heads(k, w.heads)
    vh = _split_heads(v, w.heads)
    scores = scale(matmul(qh, transpose(kh, (0, 2, 1))), w.beta)
    attn = entmax_attention(scores, w.alpha_param)
    out = _merge_heads(matmul(attn, vh))
    return _maybe_dropout(out, w.dropout, rng)


def _check_rows(name, t, dim, what="D_in"):
    if t.data.ndim != 2 or t.shape[1] != dim:
        raise ValueError(f"{name} must be rows of width {what}={dim}, "
                         f"got shape {t.shape}")


def gsh_forward(r, y, w, rng=None):
    """Attention of query rows R against key source Y (R = Y gives
    self-attention). Returns n_q x D_v; pass rng to enable dropout."""
    r, y = _t(r), _t(y)
    d_in = w.w_q.shape[0]
    _check_rows("R", r, d_in)
    _check_rows("Y", y, d_in)
    q = matmul(r, w.w_q)
    k = matmul(y, w.w_k)
    v = matmul(k, w.w_v)
    return _attend(q, k, v, w, rng)


def gsh_pooling_forward(prototypes, y, w, rng=None):
    """gsh_forward with the query side replaced by C prototype rows that
    already live in key space (W_Q fixed to identity). Returns C x D_v."""
    y = _t(y)
    d_k = w.w_k.shape[1]
    _check_rows("Y", y, w.w_k.shape[0])
    _check_rows("prototypes", prototypes.q, d_k, what="D_k")
    k = matmul(y, w.w_k)
    v = matmul(k, w.w_v)
    return _attend(prototypes.q, k, v, w, rng)


def gsh_layer_forward(r, stored_k, stored_v, w, rng=None):
    """Attention of projected queries against learnable stored patterns.

    stored_k: n_s x D_k keys, stored_v: n_s x D_v values; only w.w_q, beta,
    alpha, heads and dropout participate. Returns n_q x D_v.
    """
    r, stored_k, stored_v = _t(r), _t(stored_k), _t(stored_v)
    _check_rows("R", r, w.w_q.shape[0])
    _check_rows("stored_K", stored_k, w.w_q.shape[1], what="D_k")
    if stored_v.data.ndim != 2 or stored_v.shape[0] != stored_k.shape[0]:
        raise ValueError(f"stored_V must pair rows with stored_K "
                         f"({stored_k.shape[0]}), got shape {stored_v.shape}")
    if stored_v.shape[1] % w.heads:
        raise ValueError(f"heads={w.heads} must divide stored value width "
                         f"{stored_v.shape[1]}")
    q = matmul(r, w.w_q)
    return _attend(q, stored_k, stored_v, w, rng)
