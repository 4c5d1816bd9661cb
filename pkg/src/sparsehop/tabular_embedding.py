"""Tabular rows to patched embeddings.

A raw row becomes an N x G cell matrix: each numerical feature is encoded
piecewise-linearly against its fitted quantile bins, each categorical
feature as the concatenation of a per-feature shared vector and a
per-category individual vector. The matrix is then transposed, the G axis
split into P = ceil(G/L) patches of length L (zero-padded at the end), and
a shared linear map lifts each patch to D_model, giving N x P x D_model.

Vocabularies and bins are fitted on the training split only. The tables
and the patch projection are learnable tensors; encoding records on the
active autodiff tape so gradients reach them.
"""

import numpy as np

from .tensor_autodiff import (Tensor, add, concat, gather_rows, matmul,
                              reshape, tile_leading, transpose)

__all__ = [
    "TabularSchema", "QuantileBins", "EmbeddingTables", "fit", "ple_encode",
    "categorical_encode", "embed_row", "patch_embed", "encode_rows",
]


class TabularSchema:
    """Ordered column descriptors plus fitted categorical vocabularies.

    Embedding order is numerical features first, then categorical, each in
    first-appearance order. Every vocabulary reserves its last index for
    values unseen at fit time.
    """

    def __init__(self, columns, vocabs):
        names = [name for name, _ in columns]
        if len(set(names)) != len(names):
            raise ValueError("column names must be unique")
        if not columns:
            raise ValueError("schema needs at least one column")
        for name, kind in columns:
            if kind not in ("numerical", "categorical"):
                raise ValueError(f"column {name!r} has unknown kind {kind!r}")
        self.columns = [(str(n), str(k)) for n, k in columns]
        self.numeric_names = [n for n, k in self.columns if k == "numerical"]
        self.categorical_names = [n for n, k in self.columns
                                  if k == "categorical"]
        self.vocabs = {n: dict(vocabs[n]) for n in self.categorical_names}
        self.n_num = len(self.numeric_names)
        self.n_cat = len(self.categorical_names)
        self.n = self.n_num + self.n_cat

    def unknown_index(self, name):
        return len(self.vocabs[name])

    def cat_index(self, name, value):
        return self.vocabs[name].get(str(value), self.unknown_index(name))


class QuantileBins:
    """Per-numerical-column boundaries b_{j,0..G}, row-aligned with the
    schema's numeric_names. Fitted by linear-interpolation quantiles at
    fractions g/G, so b_{j,0} is the training minimum."""

    def __init__(self, boundaries, names):
        b = np.array(boundaries, dtype=np.float64)
        if b.ndim != 2 or b.shape[0] != len(names):
            raise ValueError(f"need one boundary row per numerical column, "
                             f"got shape {b.shape} for {len(names)} columns")
        if np.any(np.diff(b, axis=1) < 0):
            raise ValueError("bin boundaries must be non-decreasing")
        self.boundaries = b
        self.names = list(names)
        self.g = b.shape[1] - 1

    def for_column(self, name):
        return self.boundaries[self.names.index(name)]


class EmbeddingTables:
    """Learnable embedding state: the shared categorical table
    (N_cat x G_shared), one individual table per categorical feature
    (vocab+1 x G_ind), and the patch projection (L x D_model plus bias)."""

    def __init__(self, e_shared, e_ind, patch_w, patch_b, g, g_shared, l,
                 d_model):
        if not 0 <= g_shared < g:
            raise ValueError(f"need 0 <= G_shared < G, got G_shared="
                             f"{g_shared}, G={g}")
        self.e_shared = e_shared
        self.e_ind = list(e_ind)
        self.patch_w = patch_w
        self.patch_b = patch_b
        self.g = int(g)
        self.g_shared = int(g_shared)
        self.g_ind = self.g - self.g_shared
        self.l = int(l)
        self.p = -(-self.g // self.l)
        self.d_model = int(d_model)

    def params(self):
        return [self.e_shared, *self.e_ind, self.patch_w, self.patch_b]

    def named_params(self, prefix="embed."):
        out = [(f"{prefix}e_shared", self.e_shared)]
        out += [(f"{prefix}e_ind{i}", t) for i, t in enumerate(self.e_ind)]
        out += [(f"{prefix}patch_w", self.patch_w),
                (f"{prefix}patch_b", self.patch_b)]
        return out


def fit(rows, schema_draft, g=32, g_shared=8, l=8, d_model=512, seed=0):
    """Fit schema, bins, and fresh tables from training rows.

    rows: sequence of mappings column name -> raw value. schema_draft:
    ordered (name, kind) pairs with kind in {numerical, categorical}.
    Vocabularies and quantiles come from these rows only; tables draw
    uniform(-1/sqrt(G), 1/sqrt(G)) from the seed.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("cannot fit on an empty training set")
    if g < 1 or l < 1 or d_model < 1:
        raise ValueError(f"G={g}, L={l}, D_model={d_model} must be >= 1")
    draft = [(n, k) for n, k in schema_draft]
    vocabs = {}
    for name, kind in draft:
        if kind == "categorical":
            seen = sorted({str(r[name]) for r in rows})
            vocabs[name] = {v: i for i, v in enumerate(seen)}
    schema = TabularSchema(draft, vocabs)

    boundaries = np.empty((schema.n_num, g + 1))
    for j, name in enumerate(schema.numeric_names):
        vals = np.array([float(r[name]) for r in rows])
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"non-finite value in numerical column "
                             f"{name!r}")
        boundaries[j] = np.quantile(vals, np.linspace(0.0, 1.0, g + 1),
                                    method="linear")
    bins = QuantileBins(boundaries, schema.numeric_names)

    rng = np.random.default_rng(seed)
    lim = 1.0 / np.sqrt(g)
    g_ind = g - g_shared
    if g_ind < 1:
        raise ValueError(f"G_shared={g_shared} must be smaller than G={g}")
    e_shared = Tensor(rng.uniform(-lim, lim, size=(schema.n_cat, g_shared)),
                      requires_grad=True)
    e_ind = [Tensor(rng.uniform(-lim, lim,
                                size=(len(vocabs[name]) + 1, g_ind)),
                    requires_grad=True)
             for name in schema.categorical_names]
    patch_w = Tensor(rng.uniform(-1.0 / np.sqrt(l), 1.0 / np.sqrt(l),
                                 size=(l, d_model)), requires_grad=True)
    # A nonzero bias keeps the all-zero patches produced by values at a
    # column's training minimum off the relu kink downstream.
    patch_b = Tensor(rng.uniform(-1.0 / np.sqrt(l), 1.0 / np.sqrt(l),
                                 size=d_model), requires_grad=True)
    tables = EmbeddingTables(e_shared, e_ind, patch_w, patch_b, g, g_shared,
                             l, d_model)
    return schema, bins, tables


def ple_encode(x, boundaries):
    """Piecewise-linear encoding of one scalar against one boundary row.

    Coordinate g is the clamped progress of x through bin (b_{g-1}, b_g]:
    0 below, 1 past, linear inside. Zero-width bins emit 0.
    """
    x = float(x)
    if not np.isfinite(x):
        raise ValueError(f"cannot encode non-finite value {x}")
    b = np.asarray(boundaries, dtype=np.float64)
    return _ple_matrix(np.array([x]), b[None, :])[0]


def _ple_matrix(x, boundaries):
    """Vectorized PLE: x (..., J) against boundaries (J, G+1) -> (..., J, G).

    The three formula branches collapse to a clamp of the interior ratio;
    zero-width bins override to 0.
    """
    lo = boundaries[..., :-1]
    hi = boundaries[..., 1:]
    width = hi - lo
    safe = np.where(width > 0, width, 1.0)
    e = np.clip((x[..., None] - lo) / safe, 0.0, 1.0)
    return np.where(width > 0, e, 0.0)


def categorical_encode(x_cat, schema, tables):
    """Encode one row's categorical indices to an N_cat x G matrix.

    Row i concatenates the feature's shared vector with the individual
    vector of its category; out-of-vocabulary indices land in the reserved
    final slot. Accepts raw values (mapped through the vocabularies) or
    pre-mapped integer indices.
    """
    idx = _cat_indices(x_cat, schema)
    if schema.n_cat == 0:
        return Tensor._wrap(np.zeros((0, tables.g)))
    parts = [gather_rows(tables.e_ind[i], idx[i:i + 1])
             for i in range(schema.n_cat)]
    individual = concat(parts, axis=0)
    return concat([tables.e_shared, individual], axis=1)


def _cat_indices(x_cat, schema):
    if isinstance(x_cat, dict):
        idx = [schema.cat_index(n, x_cat[n]) for n in schema.categorical_names]
    else:
        idx = list(np.asarray(x_cat).reshape(-1))
    if len(idx) != schema.n_cat:
        raise ValueError(f"expected {schema.n_cat} categorical values, "
                         f"got {len(idx)}")
    out = []
    for i, name in enumerate(schema.categorical_names):
        j = int(idx[i])
        if not 0 <= j <= schema.unknown_index(name):
            j = schema.unknown_index(name)
        out.append(j)
    return out


def embed_row(x, schema, bins, tables):
    """One raw row to its N x G cell matrix (numerical rows first)."""
    for name, _ in schema.columns:
        if name not in x:
            raise ValueError(f"row is missing column {name!r}")
    num = np.array([float(x[name]) for name in schema.numeric_names])
    if num.size and not np.all(np.isfinite(num)):
        raise ValueError("non-finite numerical value in row")
    num_block = Tensor._wrap(_ple_matrix(num, bins.boundaries))
    cat_block = categorical_encode({n: x[n] for n in schema.categorical_names},
                                   schema, tables)
    if schema.n_cat == 0:
        return num_block
    if schema.n_num == 0:
        return cat_block
    return concat([num_block, cat_block], axis=0)


def patch_embed(emb_t, tables):
    """Patch the transposed cell matrix (G x N) into N x P x D_model.

    Per feature, the G-length column splits into P chunks of length L (the
    last zero-padded), and the shared linear map lifts each chunk.
    """
    emb_t = emb_t if isinstance(emb_t, Tensor) else Tensor._wrap(
        np.asarray(emb_t, dtype=np.float64))
    g, n = emb_t.shape
    if g != tables.g:
        raise ValueError(f"expected G={tables.g} rows, got {g}")
    per_feature = transpose(emb_t)
    pad = tables.p * tables.l - g
    if pad:
        per_feature = concat([per_feature,
                              Tensor._wrap(np.zeros((n, pad)))], axis=1)
    chunks = reshape(per_feature, (n * tables.p, tables.l))
    lifted = add(matmul(chunks, tables.patch_w),
                 tile_leading(tables.patch_b, n * tables.p))
    return reshape(lifted, (n, tables.p, tables.d_model))


def encode_rows(rows, schema, bins):
    """Dataset-level raw encoding: (numeric matrix, categorical index
    matrix) for a sequence of rows, ready for batched embedding."""
    num = np.empty((len(rows), schema.n_num))
    cat = np.empty((len(rows), schema.n_cat), dtype=np.intp)
    for i, r in enumerate(rows):
        for j, name in enumerate(schema.numeric_names):
            num[i, j] = float(r[name])
        for j, name in enumerate(schema.categorical_names):
            cat[i, j] = schema.cat_index(name, r[name])
    if num.size and not np.all(np.isfinite(num)):
        raise ValueError("non-finite numerical value in rows")
    return num, cat
