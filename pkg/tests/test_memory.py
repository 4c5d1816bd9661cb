"""Associative-memory tests: energy descent, fixed points, experiments."""

import numpy as np
import numpy.testing as npt
import pytest

from sparsehop.hopfield_memory import (ExperimentSpec, MemoryBank,
                                       RetrievalConfig, energy, experiments,
                                       retrieval_error_compare,
                                       retrieval_step, retrieve, separation,
                                       stored_pattern_check,
                                       well_separated_bank,
                                       well_separation_check)


def test_bank_statistics():
    xi = np.array([[1.0, 0.0], [0.0, 3.0]])
    bank = MemoryBank(xi)
    assert bank.d == 2 and bank.M == 2
    assert bank.m == 3.0
    npt.assert_allclose(bank.R, 0.5 * np.sqrt(10.0))
    npt.assert_allclose(bank.delta, [1.0, 9.0])


def test_bank_is_immutable():
    bank = MemoryBank(np.eye(3))
    with pytest.raises(ValueError):
        bank.xi[0, 0] = 5.0


def test_single_pattern_bank():
    bank = MemoryBank(np.array([[1.0], [2.0]]))
    assert bank.R == np.inf
    cfg = RetrievalConfig(alpha=2.0, beta=2.0)
    out = retrieval_step(bank, np.array([0.9, 2.2]), cfg)
    npt.assert_allclose(out, [1.0, 2.0], atol=1e-12)


def test_energy_descends_along_trace():
    rng = np.random.default_rng(0)
    for trial in range(60):
        d = int(rng.integers(2, 9))
        m = int(rng.integers(2, 17))
        bank = MemoryBank(rng.normal(size=(d, m)))
        x0 = rng.normal(size=d)
        for alpha in (1.0, 1.5, 2.0):
            for beta in (0.5, 1.0, 4.0):
                cfg = RetrievalConfig(alpha, beta)
                tr = retrieve(bank, x0, cfg)
                e = np.array(tr.energies)
                assert np.all(np.diff(e) <= 1e-12), \
                    f"energy rose: d={d} m={m} alpha={alpha} beta={beta}"


def test_traces_converge_and_iterate_in_hull():
    rng = np.random.default_rng(1)
    fails = 0
    for trial in range(50):
        bank = MemoryBank(rng.normal(size=(5, 8)))
        x0 = rng.normal(size=5) * 2
        cfg = RetrievalConfig(alpha=1.5, beta=1.0)
        tr = retrieve(bank, x0, cfg)
        fails += not tr.converged
        # after one step, iterates live in the span of stored patterns
        coef, *_ = np.linalg.lstsq(bank.xi, tr.final, rcond=None)
        npt.assert_allclose(bank.xi @ coef, tr.final, atol=1e-8)
    assert fails == 0


def test_stored_patterns_are_near_fixed_points():
    rng = np.random.default_rng(2)
    bank = well_separated_bank(6, 10, rng)
    cfg = RetrievalConfig(alpha=2.0, beta=4.0)
    report = stored_pattern_check(bank, cfg, rng)
    assert report["all_stored"], report
    assert report["spheres_disjoint"]


def test_separation_definition():
    xi = np.array([[2.0, 0.0], [0.0, 1.0]])
    bank = MemoryBank(xi)
    # delta_0 = <xi_0,xi_0> - <xi_0,xi_1> = 4 - 0
    npt.assert_allclose(separation(bank, 0)[0], 4.0)
    npt.assert_allclose(separation(bank, 1)[0], 1.0)
    # the x-relative form: similarities to xi_0 minus the runner-up
    _, rel = separation(bank, 0, x=np.array([1.0, 1.0]))
    npt.assert_allclose(rel, 2.0 - 1.0)


def test_well_separation_check_margins():
    # a near-orthogonal, large-beta bank satisfies the bound; margins
    # must equal delta minus the bound exactly
    bank = MemoryBank(5.0 * np.eye(4))
    cfg = RetrievalConfig(alpha=2.0, beta=100.0)
    ok, margins = well_separation_check(bank, cfg)
    bound = np.log(2.0 * 3 * bank.m / bank.R) / cfg.beta \
        + 2.0 * bank.m * bank.R
    npt.assert_allclose(margins, bank.delta - bound, atol=1e-12)
    assert ok.all() == (margins >= 0).all()
    with pytest.raises(ValueError):
        well_separation_check(MemoryBank(np.ones((3, 1))), cfg)


def test_sparse_beats_dense_on_worked_instance():
    # Xi = 2 I_2, query (1.5, 0.1), beta = 1: sparsemax retrieves exactly,
    # softmax leaves a pull toward the wrong pattern of about 0.162
    bank = MemoryBank(2.0 * np.eye(2))
    x = np.array([1.5, 0.1])
    errors, _ = retrieval_error_compare(bank, x, 0, 1.0, (2.0, 1.0))
    assert errors[2.0] == 0.0
    npt.assert_allclose(errors[1.0], 0.1620, atol=1e-3)


def test_sparse_error_never_worse_on_random_instances():
    rng = np.random.default_rng(4)
    for trial in range(100):
        bank = well_separated_bank(6, 8, rng)
        mu = int(rng.integers(8))
        off = rng.normal(size=6)
        off *= rng.uniform(0.0, 0.5) * bank.R / np.linalg.norm(off)
        x = bank.pattern(mu) + off
        errors, _ = retrieval_error_compare(bank, x, mu, 4.0, (2.0, 1.0))
        assert errors[2.0] <= errors[1.0] + 1e-12


def test_retrieval_validates_shapes():
    bank = MemoryBank(np.eye(3))
    cfg = RetrievalConfig()
    with pytest.raises(ValueError):
        energy(bank, np.zeros(2), cfg)
    with pytest.raises(ValueError):
        RetrievalConfig(beta=0.0)
    with pytest.raises(ValueError):
        MemoryBank(np.zeros((0, 2)))


def test_experiments_deterministic_and_structured():
    spec = ExperimentSpec(d=6, M=8, trials=12, seed=9)
    res1 = experiments("noise_robustness", spec)
    res2 = experiments("noise_robustness", spec)
    assert res1.rows == res2.rows
    assert res1.summary == res2.summary
    assert len(res1.rows) == 12 * len(spec.sigmas) * len(spec.alphas)
    assert "sparse_le_dense_all_levels" in res1.summary


def test_experiments_zero_trials():
    spec = ExperimentSpec(trials=0)
    res = experiments("convergence_speed", spec)
    assert res.rows == []
    assert res.summary["note"] == "zero trials requested"


def test_experiments_unknown_kind():
    with pytest.raises(ValueError):
        experiments("telepathy", ExperimentSpec())


def test_convergence_experiment_sparse_not_slower():
    spec = ExperimentSpec(d=6, M=8, trials=25, seed=1)
    res = experiments("convergence_speed", spec)
    assert res.summary["sparse_le_dense_iterations"]
    rates = res.summary["convergence_rate"]
    assert rates["alpha=2.0"] == 1.0
