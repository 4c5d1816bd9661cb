"""Tests for the alpha-entmax transform and its calculus."""

import numpy as np
import numpy.testing as npt
import pytest

from sparsehop.entmax import (AlphaParam, entmax, entmax_bruteforce_oracle,
                              entmax_conjugate, entmax_jacobian,
                              entmax_rows, entmax_rows_grad,
                              tsallis_entropy)
from sparsehop.tensor_autodiff import Tensor


def test_softmax_case_matches_closed_form():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(50, 7))
    p, tau = entmax_rows(z, 1.0)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    npt.assert_allclose(p, e / e.sum(axis=1, keepdims=True), atol=1e-12)
    # tau mirrors the thresholded form: p = exp(z - tau)
    npt.assert_allclose(p, np.exp(z - tau[:, None]), atol=1e-12)


def test_sparsemax_two_entry_oracle():
    # alpha=2 on (1, 0): the gap exceeds 1, so all mass lands on the first
    res = entmax(np.array([1.0, 0.0]), 2.0)
    npt.assert_allclose(res.p, [1.0, 0.0], atol=1e-14)
    assert list(res.support) == [0]


def test_sparsemax_three_entry_worked_example():
    res = entmax(np.array([0.5, 0.2, 0.1]), 2.0)
    npt.assert_allclose(res.p, [0.56666667, 0.26666667, 0.16666667],
                        atol=1e-8)
    assert list(res.support) == [0, 1, 2]


def test_uniform_scores_give_uniform_distribution():
    for alpha in (1.0, 1.3, 1.5, 2.0):
        res = entmax(np.zeros(4), alpha)
        npt.assert_allclose(res.p, np.full(4, 0.25), atol=1e-12)


def test_matches_bruteforce_oracle():
    rng = np.random.default_rng(42)
    for _ in range(200):
        m = int(rng.integers(2, 7))
        z = rng.normal(scale=rng.uniform(0.2, 4.0), size=m)
        for alpha in (1.01, 1.3, 1.5, 1.7, 2.0):
            p, _ = entmax_rows(z[None], alpha)
            q = entmax_bruteforce_oracle(z, alpha)
            npt.assert_allclose(p[0], q.p, atol=1e-8)


def test_simplex_and_translation_invariants():
    rng = np.random.default_rng(7)
    z = rng.normal(size=(300, 6)) * 3
    for alpha in (1.0, 1.2, 1.5, 1.8, 2.0):
        p, _ = entmax_rows(z, alpha)
        assert np.all(p >= 0)
        npt.assert_allclose(p.sum(axis=1), 1.0, atol=1e-10)
        # translation by a per-row constant leaves the distribution alone
        shift = rng.normal(size=(300, 1))
        p2, _ = entmax_rows(z + shift, alpha)
        npt.assert_allclose(p2, p, atol=1e-9)


def test_permutation_equivariance_exact():
    rng = np.random.default_rng(11)
    z = rng.normal(size=8)
    perm = rng.permutation(8)
    for alpha in (1.0, 1.5, 2.0):
        p, _ = entmax_rows(z[None], alpha)
        pp, _ = entmax_rows(z[perm][None], alpha)
        assert np.array_equal(pp[0], p[0][perm])


def test_higher_alpha_is_sparser_on_average():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(200, 8)) * 2
    sizes = []
    for alpha in (1.2, 1.5, 2.0):
        p, _ = entmax_rows(z, alpha)
        sizes.append((p > 0).sum())
    assert sizes[0] >= sizes[1] >= sizes[2]


def test_warm_start_recovers_from_bad_hint():
    rng = np.random.default_rng(19)
    z = rng.normal(size=(40, 9)) * 3
    for alpha in (1.3, 1.7):
        p_ref, tau_ref = entmax_rows(z, alpha)
        junk = rng.normal(scale=50.0, size=40)
        p, tau = entmax_rows(z, alpha, tau0=junk)
        npt.assert_allclose(p, p_ref, atol=1e-10)
        npt.assert_allclose(tau, tau_ref, atol=1e-10)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    h = 1e-6
    for alpha in (1.25, 1.5, 1.75, 2.0):
        for _ in range(25):
            z = rng.normal(size=6)
            g = rng.normal(size=6)
            p, _ = entmax_rows(z[None], alpha)
            # skip points where the support is about to change
            q = (alpha - 1.0) * (z - z.max())
            gaps = np.abs(np.sort(q)[1:] - np.sort(q)[:-1])
            if gaps.size and gaps.min() < 1e-3:
                continue
            got = entmax_rows_grad(p, g[None], alpha)[0]
            fd = np.empty(6)
            for j in range(6):
                zp, zm = z.copy(), z.copy()
                zp[j] += h
                zm[j] -= h
                pp, _ = entmax_rows(zp[None], alpha)
                pm, _ = entmax_rows(zm[None], alpha)
                fd[j] = ((pp - pm)[0] * g).sum() / (2 * h)
            npt.assert_allclose(got, fd, atol=5e-5)


def test_jacobian_rows_sum_to_zero():
    rng = np.random.default_rng(9)
    z = rng.normal(size=5)
    for alpha in (1.0, 1.4, 2.0):
        jac = entmax_jacobian(z, alpha)
        npt.assert_allclose(jac.sum(axis=1), 0.0, atol=1e-10)
        npt.assert_allclose(jac, jac.T, atol=1e-10)


def test_conjugate_gradient_is_the_map():
    # Danskin: the conjugate's gradient in z is the entmax distribution
    rng = np.random.default_rng(13)
    h = 1e-6
    for alpha in (1.0, 1.5, 2.0):
        z = rng.normal(size=5)
        p, _ = entmax_rows(z[None], alpha)
        for j in range(5):
            zp, zm = z.copy(), z.copy()
            zp[j] += h
            zm[j] -= h
            fd = (entmax_conjugate(zp, alpha)
                  - entmax_conjugate(zm, alpha)) / (2 * h)
            npt.assert_allclose(fd, p[0, j], atol=1e-6)


def test_tsallis_entropy_limits():
    p = np.array([0.6, 0.3, 0.1])
    shannon = -(p * np.log(p)).sum()
    npt.assert_allclose(tsallis_entropy(p, 1.0), shannon, atol=1e-12)
    # alpha just above 1 approaches the Shannon value
    npt.assert_allclose(tsallis_entropy(p, 1.0 + 1e-7), shannon, atol=1e-5)
    assert tsallis_entropy(np.array([1.0, 0.0]), 1.5) == pytest.approx(0.0)


def test_alpha_param_fixed_and_learnable():
    fixed = AlphaParam(1.5)
    assert not fixed.learnable
    npt.assert_allclose(fixed.value, 1.5, atol=1e-12)
    with pytest.raises(ValueError):
        AlphaParam(0.5)

    learned = AlphaParam(a=Tensor(np.array(0.0), requires_grad=True))
    assert learned.learnable
    npt.assert_allclose(learned.value, 1.5, atol=1e-12)
    learned.a.data[...] = 40.0
    assert 1.0 < learned.value <= 2.0
    learned.a.data[...] = -40.0
    assert 1.0 <= learned.value < 2.0


def test_input_validation():
    with pytest.raises(ValueError):
        entmax(np.array([]), 1.5)
    with pytest.raises(ValueError):
        entmax_rows(np.zeros((2, 3)), 0.5)
    with pytest.raises(ValueError):
        entmax_rows(np.array([[0.0, np.inf]]), 1.5)
