"""Associative memory: energy, retrieval dynamics, and separation diagnostics.

A memory bank stores patterns as the columns of Xi (d x M). Retrieval runs
the fixed-point iteration

    T(x) = Xi @ entmax(beta * Xi^T x, alpha)

which monotonically decreases the energy

    E(x) = -(1/beta) * Psi*(beta * Xi^T x) + 0.5 <x, x>

where Psi* is the entmax conjugate. At alpha=1 this is the classic dense
modern Hopfield model (log-sum-exp energy, softmax update); alpha=2 yields
sparsemax retrieval that saturates to exact one-hots. The experiments
harness compares sparse against dense retrieval error, noise robustness,
and convergence speed on seeded well-separated banks.
"""

import numpy as np

from .entmax import entmax, entmax_conjugate

__all__ = [
    "MemoryBank", "RetrievalConfig", "RetrievalTrace", "ExperimentSpec",
    "ExperimentResult", "energy", "retrieval_step", "retrieve", "separation",
    "well_separation_check", "retrieval_error_compare", "experiments",
    "well_separated_bank", "stored_pattern_check",
]


class MemoryBank:
    """Immutable d x M pattern matrix with cached separation statistics.

    m is the largest column norm, R half the minimum pairwise distance
    (infinite for a single pattern), and delta[mu] the separation
    <xi_mu, xi_mu> - max_{nu != mu} <xi_mu, xi_nu>.
    """

    __slots__ = ("xi", "d", "M", "m", "R", "delta")

    def __init__(self, xi):
        xi = np.array(xi, dtype=np.float64)
        if xi.ndim != 2 or xi.size == 0:
            raise ValueError(f"Xi must be a non-empty d x M matrix, "
                             f"got shape {xi.shape}")
        self.xi = xi
        self.d, self.M = xi.shape
        norms = np.linalg.norm(xi, axis=0)
        self.m = float(norms.max())
        gram = xi.T @ xi
        if self.M == 1:
            self.R = np.inf
            self.delta = np.full(1, np.inf)
        else:
            sq = np.diag(gram)
            dist2 = sq[:, None] + sq[None, :] - 2.0 * gram
            np.fill_diagonal(dist2, np.inf)
            self.R = 0.5 * float(np.sqrt(max(dist2.min(), 0.0)))
            cross = gram.copy()
            np.fill_diagonal(cross, -np.inf)
            self.delta = sq - cross.max(axis=1)
        self.xi.setflags(write=False)

    def pattern(self, mu):
        return self.xi[:, mu]


class RetrievalConfig:
    """Inverse temperature, sparsity, and stopping rule for retrieval."""

    __slots__ = ("alpha", "beta", "max_iters", "tol")

    def __init__(self, alpha=2.0, beta=1.0, max_iters=100, tol=1e-8):
        if beta <= 0:
            raise ValueError(f"beta must be positive, got {beta}")
        if tol <= 0:
            raise ValueError(f"tol must be positive, got {tol}")
        if max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {max_iters}")
        self.alpha = float(alpha)
        self.beta = float(beta)
        self.max_iters = int(max_iters)
        self.tol = float(tol)


class RetrievalTrace:
    """Iterates, their energies, and the convergence verdict of one run."""

    __slots__ = ("iterates", "energies", "converged", "final_error")

    def __init__(self, iterates, energies, converged, final_error=None):
        self.iterates = iterates
        self.energies = energies
        self.converged = converged
        self.final_error = final_error

    @property
    def iterations(self):
        return len(self.iterates) - 1

    @property
    def final(self):
        return self.iterates[-1]


def _scores(bank, x, beta):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (bank.d,):
        raise ValueError(f"query has shape {x.shape}, bank dimension is "
                         f"{bank.d}")
    return beta * (bank.xi.T @ x)


def energy(bank, x, cfg):
    """E(x) = -(1/beta) Psi*(beta Xi^T x) + 0.5 <x, x>."""
    x = np.asarray(x, dtype=np.float64)
    conj = entmax_conjugate(_scores(bank, x, cfg.beta), cfg.alpha)
    return float(-conj / cfg.beta + 0.5 * (x @ x))


def retrieval_step(bank, x, cfg):
    """One update T(x) = Xi entmax(beta Xi^T x); lands in conv{xi_mu}."""
    p = entmax(_scores(bank, x, cfg.beta), cfg.alpha).p
    return bank.xi @ p


def retrieve(bank, x0, cfg, target_mu=None):
    """Iterate T until the step norm drops to tol or max_iters is hit.

    The returned trace records every accepted iterate and its energy. When
    the very first step already moves less than tol, the trace is the single
    starting point. final_error is ||T(x_last) - xi_mu|| when target_mu is
    given.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    iterates = [x]
    energies = [energy(bank, x, cfg)]
    converged = False
    for _ in range(cfg.max_iters):
        x_next = retrieval_step(bank, x, cfg)
        if np.linalg.norm(x_next - x) <= cfg.tol:
            converged = True
            break
        x = x_next
        iterates.append(x)
        energies.append(energy(bank, x, cfg))
    final_error = None
    if target_mu is not None:
        final_error = float(np.linalg.norm(retrieval_step(bank, x, cfg)
                                           - bank.pattern(target_mu)))
    return RetrievalTrace(iterates, energies, converged, final_error)


def separation(bank, mu, x=None):
    """Pattern separation Delta_mu, and the x-relative form when x is given.

    Delta_mu = <xi_mu, xi_mu> - max_{nu != mu} <xi_mu, xi_nu>
    Delta~_mu = min_{nu != mu} (<x, xi_mu> - <x, xi_nu>)

    Both are +inf for a single-pattern bank.
    """
    if not 0 <= mu < bank.M:
        raise IndexError(f"pattern index {mu} out of range for M={bank.M}")
    delta = float(bank.delta[mu])
    rel = None
    if x is not None:
        if bank.M == 1:
            rel = np.inf
        else:
            sims = np.asarray(x, dtype=np.float64) @ bank.xi
            others = np.delete(sims, mu)
            rel = float(sims[mu] - others.max())
    return delta, rel


def well_separation_check(bank, cfg, delta_slack=0.0):
    """Evaluate Delta_mu >= (1/beta) ln(2(M-1)m / (R + delta)) + 2 m R.

    Returns (satisfied, margins) per pattern, margin = Delta_mu - bound.
    delta_slack=0 reduces to the dense-model condition.
    """
    if bank.M < 2:
        raise ValueError("well-separation needs at least two patterns")
    if delta_slack < 0:
        raise ValueError("slack delta must be >= 0")
    bound = (np.log(2.0 * (bank.M - 1) * bank.m / (bank.R + delta_slack))
             / cfg.beta + 2.0 * bank.m * bank.R)
    margins = bank.delta - bound
    return margins >= 0, margins


def retrieval_error_compare(bank, x, mu, beta, alphas):
    """One-step retrieval error ||T_alpha(x) - xi_mu|| per alpha.

    All alphas share the same score vector beta Xi^T x. Returns
    (errors, in_sphere): errors maps alpha to the error, in_sphere reports
    whether ||x - xi_mu|| <= R (the caller's intent is checked, not
    enforced).
    """
    if not 0 <= mu < bank.M:
        raise IndexError(f"pattern index {mu} out of range for M={bank.M}")
    scores = _scores(bank, x, beta)
    target = bank.pattern(mu)
    errors = {}
    for alpha in alphas:
        p = entmax(scores, alpha).p
        errors[alpha] = float(np.linalg.norm(bank.xi @ p - target))
    in_sphere = bool(np.linalg.norm(np.asarray(x) - target) <= bank.R)
    return errors, in_sphere


def well_separated_bank(d, M, rng, rho=3.0, min_r=0.5, max_tries=1000):
    """Draw M patterns uniformly on the sphere of radius rho, rejection
    sampling until half the minimum pairwise distance reaches min_r."""
    for _ in range(max_tries):
        x = rng.normal(size=(d, M))
        x *= rho / np.linalg.norm(x, axis=0)
        bank = MemoryBank(x)
        if bank.R >= min_r:
            return bank
    raise RuntimeError(f"no bank with R >= {min_r} after {max_tries} draws; "
                       f"d={d}, M={M}, rho={rho} is too crowded")


def stored_pattern_check(bank, cfg, rng, probes=8):
    """Diagnostic: is each pattern stored, i.e. do probe queries from inside
    its sphere all retrieve one common fixed point that stays inside?

    Probes are drawn within radius R/2 of each pattern (radius 1 when R is
    infinite). The verdict is reported per pattern, never assumed by other
    operations. Sphere disjointness holds by the construction of R and is
    re-measured here rather than trusted.
    """
    reports = []
    radius = 0.5 * bank.R if np.isfinite(bank.R) else 1.0
    for mu in range(bank.M):
        finals = []
        converged = True
        for _ in range(probes):
            direction = rng.normal(size=bank.d)
            direction /= np.linalg.norm(direction)
            x0 = bank.pattern(mu) + rng.uniform(0.0, radius) * direction
            tr = retrieve(bank, x0, cfg)
            converged = converged and tr.converged
            finals.append(tr.final)
        finals = np.stack(finals)
        spread = float(np.max(np.linalg.norm(finals - finals[0], axis=1)))
        dist = float(np.max(np.linalg.norm(finals - bank.pattern(mu)[None, :],
                                           axis=1)))
        reports.append({
            "mu": mu,
            "all_converged": bool(converged),
            "fixed_point_spread": spread,
            "max_distance_to_pattern": dist,
            "inside_sphere": bool(dist <= bank.R),
            "stored": bool(converged and spread <= 10.0 * cfg.tol
                           and dist <= bank.R),
        })
    if bank.M >= 2:
        gram = bank.xi.T @ bank.xi
        sq = np.diag(gram)
        dist2 = sq[:, None] + sq[None, :] - 2.0 * gram
        np.fill_diagonal(dist2, np.inf)
        min_dist = float(np.sqrt(max(dist2.min(), 0.0)))
        spheres_disjoint = bool(min_dist >= 2.0 * bank.R - 1e-12)
    else:
        spheres_disjoint = True
    return {"patterns": reports, "spheres_disjoint": spheres_disjoint,
            "all_stored": bool(all(r["stored"] for r in reports))}


class ExperimentSpec:
    """Parameters of one experiment run; deterministic given seed."""

    def __init__(self, d=8, M=16, beta=4.0, alphas=(2.0, 1.0),
                 sigmas=(0.05, 0.1, 0.2, 0.3, 0.5), sigma_conv=0.3,
                 trials=100, seed=0, rho=3.0, min_r=0.5, max_iters=100,
                 tol=1e-8):
        if len(tuple(alphas)) == 0:
            raise ValueError("alpha set must not be empty")
        if any(s < 0 for s in sigmas) or sigma_conv < 0:
            raise ValueError("noise levels must be >= 0")
        if trials < 0:
            raise ValueError("trial count must be >= 0")
        self.d, self.M, self.beta = int(d), int(M), float(beta)
        self.alphas = tuple(float(a) for a in alphas)
        self.sigmas = tuple(float(s) for s in sigmas)
        self.sigma_conv = float(sigma_conv)
        self.trials = int(trials)
        self.seed = int(seed)
        self.rho, self.min_r = float(rho), float(min_r)
        self.max_iters, self.tol = int(max_iters), float(tol)


class ExperimentResult:
    """Rows (one dict per measurement) plus an aggregate summary."""

    def __init__(self, kind, rows, summary):
        self.kind = kind
        self.rows = rows
        self.summary = summary


def _trial_setup(spec, ss):
    rng = np.random.default_rng(ss)
    bank = well_separated_bank(spec.d, spec.M, rng, spec.rho, spec.min_r)
    mu = int(rng.integers(spec.M))
    return rng, bank, mu


def _mean(values):
    return float(np.mean(values)) if values else None


def experiments(kind, spec):
    """Run one of the associative-memory experiment suites.

    noise_robustness: one-step retrieval error of queries xi_mu + eta with
        Gaussian eta at each noise scale sigma, per alpha.
    convergence_speed: iterations until the step norm reaches tol, per
        alpha, from queries at noise scale sigma_conv.
    retrieval_error: one-step error for queries inside the sphere of radius
        R/2 around the target pattern, per alpha.

    Returns an ExperimentResult with one row per (trial, condition) and a
    summary containing per-condition means and, when both alpha=2 and
    alpha=1 are present, the sparse-vs-dense comparison flags.
    """
    if kind not in ("noise_robustness", "convergence_speed",
                    "retrieval_error"):
        raise ValueError(f"unknown experiment kind {kind!r}")
    seeds = np.random.SeedSequence(spec.seed).spawn(max(spec.trials, 1))
    rows = []

    if kind == "noise_robustness":
        for trial in range(spec.trials):
            rng, bank, mu = _trial_setup(spec, seeds[trial])
            eta = rng.normal(size=bank.d)
            for sigma in spec.sigmas:
                x = bank.pattern(mu) + sigma * eta
                scores = spec.beta * (bank.xi.T @ x)
                for alpha in spec.alphas:
                    r = entmax(scores, alpha)
                    err = np.linalg.norm(bank.xi @ r.p - bank.pattern(mu))
                    rows.append({"trial": trial, "sigma": sigma,
                                 "alpha": alpha, "error": float(err),
                                 "support_size": int(r.support.size)})
        summary = _summarize_noise(spec, rows)
    elif kind == "convergence_speed":
        for trial in range(spec.trials):
            rng, bank, mu = _trial_setup(spec, seeds[trial])
            x0 = bank.pattern(mu) + spec.sigma_conv * rng.normal(size=bank.d)
            for alpha in spec.alphas:
                cfg = RetrievalConfig(alpha, spec.beta, spec.max_iters,
                                      spec.tol)
                tr = retrieve(bank, x0, cfg, target_mu=mu)
                rows.append({"trial": trial, "alpha": alpha,
                             "iterations": tr.iterations,
                             "converged": bool(tr.converged),
                             "final_error": tr.final_error})
        summary = _summarize_convergence(spec, rows)
    else:
        for trial in range(spec.trials):
            rng, bank, mu = _trial_setup(spec, seeds[trial])
            direction = rng.normal(size=bank.d)
            direction /= np.linalg.norm(direction)
            radius = rng.uniform(0.0, 0.5) * bank.R
            x = bank.pattern(mu) + radius * direction
            errors, _ = retrieval_error_compare(bank, x, mu, spec.beta,
                                                spec.alphas)
            for alpha in spec.alphas:
                rows.append({"trial": trial, "alpha": alpha,
                             "error": errors[alpha],
                             "query_distance": float(radius)})
        summary = _summarize_errors(spec, rows)

    summary["kind"] = kind
    summary["trials"] = spec.trials
    summary["seed"] = spec.seed
    if spec.trials == 0:
        summary["note"] = "zero trials requested"
    return ExperimentResult(kind, rows, summary)


def _summarize_noise(spec, rows):
    means = {}
    support = {}
    for alpha in spec.alphas:
        for sigma in spec.sigmas:
            sel = [r["error"] for r in rows
                   if r["alpha"] == alpha and r["sigma"] == sigma]
            means[(sigma, alpha)] = _mean(sel)
        support[alpha] = _mean([r["support_size"] for r in rows
                                if r["alpha"] == alpha])
    out = {"mean_error": {f"sigma={s},alpha={a}": means[(s, a)]
                          for s in spec.sigmas for a in spec.alphas},
           "mean_support_size": {f"alpha={a}": support[a]
                                 for a in spec.alphas}}
    if 1.0 in spec.alphas and 2.0 in spec.alphas and rows:
        out["sparse_le_dense_all_levels"] = all(
            means[(s, 2.0)] <= means[(s, 1.0)] + 1e-12 for s in spec.sigmas)
    return out


def _summarize_convergence(spec, rows):
    out = {"mean_iterations": {}, "convergence_rate": {}}
    means = {}
    for alpha in spec.alphas:
        iters = [r["iterations"] for r in rows if r["alpha"] == alpha]
        conv = [r["converged"] for r in rows if r["alpha"] == alpha]
        means[alpha] = _mean(iters)
        out["mean_iterations"][f"alpha={alpha}"] = means[alpha]
        out["convergence_rate"][f"alpha={alpha}"] = _mean(conv)
    if 1.0 in spec.alphas and 2.0 in spec.alphas and rows:
        out["sparse_le_dense_iterations"] = bool(
            means[2.0] <= means[1.0] + 1e-12)
    return out


def _summarize_errors(spec, rows):
    out = {"mean_error": {}, "max_error": {}}
    by_alpha = {a: [r["error"] for r in rows if r["alpha"] == a]
                for a in spec.alphas}
    for alpha in spec.alphas:
        out["mean_error"][f"alpha={alpha}"] = _mean(by_alpha[alpha])
        out["max_error"][f"alpha={alpha}"] = (max(by_alpha[alpha])
                                              if by_alpha[alpha] else None)
    if 1.0 in spec.alphas and 2.0 in spec.alphas and rows:
        trials = sorted({r["trial"] for r in rows})
        err = {(r["trial"], r["alpha"]): r["error"] for r in rows}
        out["sparse_le_dense_all_trials"] = all(
            err[(t, 2.0)] <= err[(t, 1.0)] + 1e-12 for t in trials)
    return out
