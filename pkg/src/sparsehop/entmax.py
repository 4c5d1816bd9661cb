"""Alpha-entmax transforms, Tsallis entropies, and their calculus.

entmax(z, alpha) maximizes <p, z> + H_alpha(p) over the probability simplex,
where H_alpha is the Tsallis entropy. alpha=1 recovers softmax, alpha=2
sparsemax; every alpha > 1 can produce exact zeros. The closed form is

    p_i = [ (alpha-1) * z_i - tau ]_+ ** (1 / (alpha - 1))

with tau the unique threshold making p sum to one.

All kernels here are pure numpy on float64 and operate either on a single
vector (`entmax`) or row-wise on a 2-D array (`entmax_rows`, used by the
attention layers). `entmax_bruteforce_oracle` is an independent support
enumeration solver kept for testing; it shares no code path with `entmax`.
"""

import numpy as np

__all__ = [
    "EntmaxResult",
    "AlphaParam",
    "tsallis_entropy",
    "entmax",
    "entmax_rows",
    "entmax_rows_grad",
    "entmax_conjugate",
    "entmax_jacobian",
    "entmax_bruteforce_oracle",
]

# Snap alpha to the exact special case when it is this close. The general
# exponent 1/(alpha-1) is ill-conditioned near alpha=1.
ALPHA_SNAP = 1e-6

BISECT_TOL = 1e-12
BISECT_MAX_ITERS = 200


class EntmaxResult:
    """Distribution p, threshold tau, support index set, and the alpha used.

    support holds the 0-based indices of strictly positive coordinates.
    At alpha=1 tau is log(sum(exp(z))), so p = exp(z - tau) mirrors the
    thresholded closed form of the alpha > 1 cases.
    """

    __slots__ = ("p", "tau", "support", "alpha")

    def __init__(self, p, tau, support, alpha):
        self.p = p
        self.tau = tau
        self.support = support
        self.alpha = alpha

    def __repr__(self):
        return (f"EntmaxResult(p={np.array2string(self.p, precision=6)}, "
                f"tau={self.tau:.6g}, support={list(self.support)}, "
                f"alpha={self.alpha})")


class AlphaParam:
    """The sparsity knob alpha, optionally derived from a pre-parameter.

    When learnable, `a` is an unconstrained scalar (a Tensor during training)
    and alpha = 1 + sigmoid(a), which keeps alpha strictly inside (1, 2).
    A plain fixed alpha >= 1 stores no pre-parameter.
    """

    def __init__(self, alpha=1.5, a=None):
        if a is None and alpha < 1.0:
            raise ValueError(f"alpha must be >= 1, got {alpha}")
        self.alpha = float(alpha)
        self.a = a

    @property
    def value(self):
        if self.a is None:
            return self.alpha
        return 1.0 + _sigmoid(float(np.asarray(self.a.data).reshape(())))

    @property
    def learnable(self):
        return self.a is not None


def _sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


def _snap_alpha(alpha):
    alpha = float(alpha)
    if abs(alpha - 1.0) <= ALPHA_SNAP:
        return 1.0
    if abs(alpha - 2.0) <= ALPHA_SNAP:
        return 2.0
    return alpha


def _softmax_rows(z):
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    # summing the exponentials in sorted (canonical) order makes the
    # normalizer, hence p, bit-identical under coordinate permutations
    s = np.sort(e, axis=-1).sum(axis=-1, keepdims=True)
    p = e / s
    # tau = lse(z), recovered from the shifted computation
    tau = np.log(s[..., 0]) + z.max(axis=-1)
    return p, tau


def _sparsemax_rows(z):
    """Exact sort-based threshold for alpha=2: p = [z - tau]_+."""
    u = np.sort(z, axis=-1)[..., ::-1]
    cssv = np.cumsum(u, axis=-1) - 1.0
    ind = np.arange(1, z.shape[-1] + 1, dtype=np.float64)
    cond = u - cssv / ind > 0
    k = cond.sum(axis=-1)
    rows = np.arange(z.shape[0])
    tau = cssv[rows, k - 1] / k
    p = np.maximum(z - tau[:, None], 0.0)
    return p, tau


def _entmax15_rows(z):
    """Exact sort-based solver for alpha=1.5: p = [z/2 - tau]_+ ** 2.

    With u the sorted halved scores and a candidate support of size k,
    sum((u_i - tau)^2) = 1 gives tau = mean_k - sqrt((1 - ss_k) / k) where
    ss_k is the within-support sum of squared deviations. The valid support
    size is the largest k with tau_k <= u_k.
    """
    shift = z.max(axis=-1, keepdims=True)
    u = np.sort((z - shift) / 2.0, axis=-1)[..., ::-1]
    ind = np.arange(1, z.shape[-1] + 1, dtype=np.float64)
    css = np.cumsum(u, axis=-1)
    css2 = np.cumsum(u * u, axis=-1)
    mean = css / ind
    ss = css2 - css * mean
    delta = np.maximum(1.0 - ss, 0.0) / ind
    tau_cand = mean - np.sqrt(delta)
    k = (tau_cand <= u).sum(axis=-1)
    rows = np.arange(z.shape[0])
    tau = tau_cand[rows, k - 1]
    p = np.maximum((z - shift) / 2.0 - tau[:, None], 0.0) ** 2
    # report tau in original coordinates: p = [(alpha-1) z - tau]_+^2
    return p, tau + shift[:, 0] / 2.0


def _entmax_bisect_rows(z, alpha, tau0=None):
    """Row-vectorized bracketed Newton on tau for general alpha > 1.

    Solves f(tau) = sum([y - tau]_+ ** e) - 1 = 0 with y = (alpha-1) z and
    e = 1/(alpha-1), over the bracket [max(y) - 1, max(y)]. Each step
    proposes the Newton point and falls back to the bracket midpoint
    whenever the proposal leaves the (always maintained) bracket, so the
    worst case is plain bisection. The derivative needs [y - tau]_+**(e-1),
    which is recovered as p/q from the already-computed powers instead of a
    second pow call; that makes a Newton step barely dearer than a halving
    while cutting the iteration count several-fold. Iteration starts at the
    lower edge, where the mass surplus f is never negative: rows whose
    solution is exactly one-hot (top score ahead by more than 1/(alpha-1))
    have their root exactly there and finish immediately, instead of
    bisecting toward an endpoint. Stops when every row satisfies
    |sum(p) - 1| <= 1e-12.

    tau0, when given, is a per-row warm start in reported coordinates
    (as returned by entmax_rows), e.g. the solution at a nearby alpha;
    it is clipped into the bracket.

    The iteration runs on descending-sorted rows so every reduction sums
    in a canonical order: tau, and therefore p, is then bit-identical
    under any permutation of the input coordinates.
    """
    shift = z.max(axis=-1, keepdims=True)
    y = (alpha - 1.0) * (z - shift)
    ys = np.sort(y, axis=-1)[:, ::-1]
    expo = 1.0 / (alpha - 1.0)
    hi = ys[:, 0]
    lo = hi - 1.0
    if tau0 is None:
        tau = lo
    else:
        tau = np.clip(tau0 - (alpha - 1.0) * shift[:, 0], lo, hi)
    q = np.empty_like(ys)
    p = np.empty_like(ys)
    for _ in range(BISECT_MAX_ITERS):
        np.subtract(ys, tau[:, None], out=q)
        np.maximum(q, 0.0, out=q)
        np.power(q, expo, out=p)
        f = p.sum(axis=-1) - 1.0
        live = np.abs(f) > BISECT_TOL
        if not live.any():
            break
        pos = live & (f > 0)  # mass above 1: the root lies to the right
        neg = live & ~pos
        lo = np.where(pos, tau, lo)
        hi = np.where(neg, tau, hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            slope = np.where(q > 0.0, p / q, 0.0).sum(axis=-1) * expo
            step = np.where(slope > 0.0, f / slope, 0.0)
        cand = tau + step  # f decreases in tau, slope stored as positive
        mid = 0.5 * (lo + hi)
        inside = (cand > lo) & (cand < hi) & (step != 0.0)
        # converged rows keep their tau; live rows take the Newton point
        # when it stays strictly inside the bracket, the midpoint otherwise
        tau = np.where(live, np.where(inside, cand, mid), tau)
    p = np.maximum(y - tau[:, None], 0.0) ** expo
    return p, tau + (alpha - 1.0) * shift[:, 0]


def entmax_rows(z, alpha, tau0=None):
    """Apply entmax independently to every row of a 2-D array.

    Returns (p, tau) with p the row distributions and tau the per-row
    thresholds in original (unshifted) coordinates. tau0 optionally warm
    starts the iterative path (general alpha) with per-row thresholds from
    a nearby problem; the exact closed-form paths ignore it.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError(f"entmax_rows expects a 2-D array, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("entmax input must be finite")
    alpha = _snap_alpha(alpha)
    if alpha < 1.0:
        raise ValueError(f"alpha must be >= 1, got {alpha}")
    if alpha == 1.0:
        return _softmax_rows(z)
    if alpha == 2.0:
        return _sparsemax_rows(z)
    if alpha == 1.5:
        return _entmax15_rows(z)
    return _entmax_bisect_rows(z, alpha, tau0)


def entmax(z, alpha):
    """entmax of a single score vector; returns an EntmaxResult."""
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    if z.ndim != 1 or z.size < 1:
        raise ValueError(f"entmax expects a non-empty vector, got shape {z.shape}")
    p, tau = entmax_rows(z[None, :], alpha)
    p = p[0]
    support = np.nonzero(p > 0)[0]
    return EntmaxResult(p, float(tau[0]), support, _snap_alpha(alpha))


def entmax_rows_grad(p, grad, alpha):
    """Multiply upstream row gradients by the entmax Jacobian, row-wise.

    For each row, J = diag(s) - s s^T / sum(s) with s_i = p_i^(2-alpha) on
    the support and 0 off it, so J g = s * g - s * (<s, g> / sum(s)).
    """
    alpha = _snap_alpha(alpha)
    if alpha == 2.0:
        s = (p > 0).astype(np.float64)
    elif alpha == 1.0:
        s = p
    else:
        s = np.where(p > 0, p, 1.0) ** (2.0 - alpha) * (p > 0)
    sg = (s * grad).sum(axis=-1, keepdims=True)
    ssum = s.sum(axis=-1, keepdims=True)
    return s * grad - s * (sg / ssum)


def tsallis_entropy(p, alpha):
    """Tsallis entropy H_alpha(p) = (1/(alpha(alpha-1))) sum(p - p**alpha).

    At alpha=1 this is the Shannon entropy -sum(p log p). Nonnegative, zero
    exactly at one-hot vectors. p must lie on the simplex within 1e-8.
    """
    p = np.asarray(p, dtype=np.float64)
    if abs(p.sum() - 1.0) > 1e-8 or p.min() < -1e-8:
        raise ValueError(
            f"p is off the simplex: sum={p.sum()!r}, min={p.min()!r}")
    p = np.maximum(p, 0.0)
    alpha = _snap_alpha(alpha)
    if alpha < 1.0:
        raise ValueError(f"alpha must be >= 1, got {alpha}")
    if alpha == 1.0:
        pos = p[p > 0]
        return float(-(pos * np.log(pos)).sum())
    return float((p - p ** alpha).sum() / (alpha * (alpha - 1.0)))


def entmax_conjugate(z, alpha):
    """The convex conjugate Psi*(z) = <p*, z> + H_alpha(p*), p* = entmax(z).

    Its gradient in z is p* (Danskin), and at alpha=1 it equals
    log(sum(exp(z))). For a single memory (M=1) it is the identity.
    """
    r = entmax(z, alpha)
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    return float(r.p @ z + tsallis_entropy(r.p, r.alpha))


def entmax_jacobian(z, alpha):
    """Analytic Jacobian d entmax / d z as an M x M matrix.

    J = diag(s) - s s^T / sum(s), s_i = p_i^(2-alpha) on the support, 0 off.
    Symmetric, positive semidefinite, rows summing to zero. At alpha=1 this
    is the softmax Jacobian diag(p) - p p^T.
    """
    r = entmax(z, alpha)
    p = r.p
    alpha = r.alpha
    if alpha == 2.0:
        s = (p > 0).astype(np.float64)
    elif alpha == 1.0:
        s = p
    else:
        s = np.where(p > 0, p, 1.0) ** (2.0 - alpha) * (p > 0)
    return np.diag(s) - np.outer(s, s) / s.sum()


def _bisect_masked(y, mask, alpha, iters=100):
    """Solve sum_S([y - tau]_+ ** (1/(alpha-1))) = 1 per masked row."""
    expo = 1.0 / (alpha - 1.0)
    ymask = np.where(mask, y, -np.inf)
    hi = ymask.max(axis=-1)
    lo = hi - 1.0
    for _ in range(iters):
        tau = 0.5 * (lo + hi)
        p = np.where(mask, np.maximum(y - tau[:, None], 0.0) ** expo, 0.0)
        too_small = p.sum(axis=-1) > 1.0
        lo = np.where(too_small, tau, lo)
        hi = np.where(too_small, hi, tau)
    tau = 0.5 * (lo + hi)
    p = np.where(mask, np.maximum(y - tau[:, None], 0.0) ** expo, 0.0)
    return p, tau


def entmax_bruteforce_oracle(z, alpha):
    """Solve the entmax program by enumerating every candidate support.

    For each of the 2^M - 1 nonempty supports, solves the one-dimensional
    threshold equation restricted to that support (closed form at alpha=2,
    bisection otherwise), keeps the candidates passing the KKT conditions
    (strict positivity on the support, (alpha-1) z_nu <= tau off it), and
    returns the feasible candidate with the largest variational objective
    <p, z> + H_alpha(p). Only intended for M <= 6.
    """
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    m = z.size
    if m > 6:
        raise ValueError(f"oracle supports M <= 6, got M={m}")
    alpha = _snap_alpha(alpha)
    if alpha < 1.0:
        raise ValueError(f"alpha must be >= 1, got {alpha}")

    if alpha == 1.0:
        # the entropy gradient blows up at the boundary, so the maximizer is
        # interior: plain softmax over the full support
        p, tau = _softmax_rows(z[None, :])
        return EntmaxResult(p[0], float(tau[0]), np.arange(m), alpha)

    n_support = (1 << m) - 1
    masks = np.zeros((n_support, m), dtype=bool)
    for bits in range(1, n_support + 1):
        masks[bits - 1] = [(bits >> j) & 1 for j in range(m)]

    y = (alpha - 1.0) * z
    ytile = np.broadcast_to(y, (n_support, m))
    if alpha == 2.0:
        sizes = masks.sum(axis=-1)
        tau = ((np.where(masks, ytile, 0.0)).sum(axis=-1) - 1.0) / sizes
        p = np.where(masks, np.maximum(ytile - tau[:, None], 0.0), 0.0)
    else:
        p, tau = _bisect_masked(ytile, masks, alpha)

    # KKT screening. The off-support slack widens as alpha approaches 1:
    # a coordinate sitting within eps_off above tau would carry probability
    # below 1e-12 anyway (and can underflow to an exact zero at exponent
    # 1/(alpha-1)), so it may legitimately be treated as inactive. Candidates
    # admitted by the slack are still simplex-feasible points, so the final
    # objective argmax is unaffected.
    eps_off = max(1e-12, 1e-12 ** (alpha - 1.0)) if alpha < 2.0 else 1e-12
    on_ok = np.all(np.where(masks, p, 1.0) > 0.0, axis=-1)
    off_ok = np.all(np.where(masks, -np.inf, ytile) <= tau[:, None] + eps_off,
                    axis=-1)
    sums_ok = np.abs(p.sum(axis=-1) - 1.0) <= 1e-9
    feasible = on_ok & off_ok & sums_ok
    if not feasible.any():
        raise RuntimeError("oracle found no KKT-feasible support")

    idx = np.nonzero(feasible)[0]
    best, best_obj = None, -np.inf
    for i in idx:
        obj = p[i] @ z + tsallis_entropy(p[i], alpha)
        if obj > best_obj:
            best, best_obj = i, obj
    pbest = p[best]
    return EntmaxResult(pbest, float(tau[best]), np.nonzero(pbest > 0)[0],
                        alpha)
