"""Tabular embedding tests: PLE bins, vocabularies, patching."""

import numpy as np
import numpy.testing as npt
import pytest

from sparsehop.tabular_embedding import (QuantileBins, TabularSchema,
                                         categorical_encode, embed_row,
                                         encode_rows, fit, patch_embed,
                                         ple_encode)


def _toy_rows(n=40, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n):
        rows.append({"a": float(rng.normal()), "b": float(rng.uniform(0, 10)),
                     "color": ["red", "green", "blue"][i % 3]})
    return rows


DRAFT = [("a", "numerical"), ("b", "numerical"), ("color", "categorical")]


def test_ple_is_monotone_staircase():
    b = np.array([0.0, 1.0, 2.0, 4.0])
    npt.assert_allclose(ple_encode(-1.0, b), [0.0, 0.0, 0.0])
    npt.assert_allclose(ple_encode(0.5, b), [0.5, 0.0, 0.0])
    npt.assert_allclose(ple_encode(1.0, b), [1.0, 0.0, 0.0])
    npt.assert_allclose(ple_encode(3.0, b), [1.0, 1.0, 0.5])
    npt.assert_allclose(ple_encode(99.0, b), [1.0, 1.0, 1.0])


def test_ple_handles_zero_width_bins():
    b = np.array([0.0, 1.0, 1.0, 2.0])
    e = ple_encode(1.5, b)
    npt.assert_allclose(e, [1.0, 0.0, 0.5])


def test_ple_monotone_in_the_value():
    rng = np.random.default_rng(1)
    b = np.sort(rng.normal(size=9))
    xs = np.sort(rng.normal(size=30) * 2)
    encs = np.stack([ple_encode(x, b) for x in xs])
    assert np.all(np.diff(encs, axis=0) >= -1e-15)
    assert np.all(encs >= 0) and np.all(encs <= 1)


def test_fit_quantile_boundaries():
    rows = _toy_rows()
    schema, bins, tables = fit(rows, DRAFT, g=4, g_shared=2, l=2, d_model=8,
                               seed=0)
    vals = np.array([r["a"] for r in rows])
    npt.assert_allclose(bins.for_column("a"),
                        np.quantile(vals, [0, 0.25, 0.5, 0.75, 1.0]))
    assert bins.g == 4
    # the training minimum encodes to all zeros, the maximum to all ones
    lo = ple_encode(vals.min(), bins.for_column("a"))
    hi = ple_encode(vals.max(), bins.for_column("a"))
    npt.assert_allclose(lo, np.zeros(4), atol=1e-15)
    npt.assert_allclose(hi, np.ones(4), atol=1e-15)


def test_fit_builds_vocabs_and_tables():
    schema, bins, tables = fit(_toy_rows(), DRAFT, g=4, g_shared=1, l=2,
                               d_model=8, seed=0)
    assert schema.vocabs["color"] == {"blue": 0, "green": 1, "red": 2}
    assert tables.e_shared.shape == (1, 1)
    # vocab of 3 plus the reserved unknown slot, width G - G_shared
    assert tables.e_ind[0].shape == (4, 3)
    assert tables.patch_w.shape == (2, 8)
    assert tables.p == 2


def test_unknown_category_hits_reserved_row():
    schema, bins, tables = fit(_toy_rows(), DRAFT, g=4, g_shared=2, l=2,
                               d_model=8, seed=0)
    enc_known = categorical_encode({"color": "red"}, schema, tables).data
    enc_unknown = categorical_encode({"color": "mauve"}, schema,
                                     tables).data
    assert enc_known.shape == (1, 4)
    npt.assert_allclose(enc_unknown[0, 2:],
                        tables.e_ind[0].data[3], atol=1e-15)
    assert not np.allclose(enc_unknown, enc_known)


def test_embed_row_stacks_numerical_then_categorical():
    schema, bins, tables = fit(_toy_rows(), DRAFT, g=4, g_shared=2, l=2,
                               d_model=8, seed=0)
    row = {"a": 0.0, "b": 5.0, "color": "green"}
    cell = embed_row(row, schema, bins, tables)
    assert cell.shape == (3, 4)
    npt.assert_allclose(cell.data[0], ple_encode(0.0, bins.for_column("a")))
    with pytest.raises(ValueError):
        embed_row({"a": 1.0, "color": "red"}, schema, bins, tables)
    with pytest.raises(ValueError):
        embed_row({"a": np.nan, "b": 1.0, "color": "red"}, schema, bins,
                  tables)


def test_patch_embed_shapes_and_padding():
    schema, bins, tables = fit(_toy_rows(), DRAFT, g=5, g_shared=2, l=2,
                               d_model=8, seed=0)
    # G=5, L=2 -> P=3 patches, one padded coordinate
    assert tables.p == 3
    cell = embed_row({"a": 0.0, "b": 5.0, "color": "red"}, schema, bins,
                     tables)
    out = patch_embed(cell.data.T, tables)
    assert out.shape == (3, 3, 8)
    # the padded tail contributes only through the bias: a feature whose
    # last chunk is (x, 0) must match the direct affine map
    chunk = np.array([cell.data[0, 4], 0.0])
    want = chunk @ tables.patch_w.data + tables.patch_b.data
    npt.assert_allclose(out.data[0, 2], want, atol=1e-12)


def test_encode_rows_matrix_layout():
    rows = _toy_rows(6)
    schema, bins, _ = fit(rows, DRAFT, g=4, g_shared=2, l=2, d_model=8,
                          seed=0)
    num, cat = encode_rows(rows, schema, bins)
    assert num.shape == (6, 2) and cat.shape == (6, 1)
    assert cat.dtype == np.intp
    npt.assert_allclose(num[:, 0], [r["a"] for r in rows])


def test_schema_validation():
    with pytest.raises(ValueError):
        TabularSchema([], {})
    with pytest.raises(ValueError):
        TabularSchema([("a", "numerical"), ("a", "numerical")], {})
    with pytest.raises(ValueError):
        TabularSchema([("a", "ordinal")], {})
    with pytest.raises(ValueError):
        fit([], DRAFT)
    with pytest.raises(ValueError):
        fit(_toy_rows(), DRAFT, g=4, g_shared=4)


def test_fit_deterministic_given_seed():
    r = _toy_rows()
    _, _, t1 = fit(r, DRAFT, g=4, g_shared=2, l=2, d_model=8, seed=5)
    _, _, t2 = fit(r, DRAFT, g=4, g_shared=2, l=2, d_model=8, seed=5)
    npt.assert_array_equal(t1.patch_w.data, t2.patch_w.data)
    npt.assert_array_equal(t1.e_ind[0].data, t2.e_ind[0].data)
