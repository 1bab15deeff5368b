"""Dichotomy and bounded-growth constants: fitting and verification.

Norms are Euclidean on vectors and spectral on matrices.  Each fit reduces
to a one-parameter family of log-linear minimax problems over sampled time
pairs: with the rate parameters fixed, the smallest admissible ``log K`` is a
maximum over pairs, and the best rate under a fixed ``K`` budget is a minimum
of ratios.  No LP solver is needed.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import _kernels
from .flow import transport_projector

STRICT_SLACK = 1e-9
MIN_PAIRS = 200
_FIELDS = ("K", "alpha", "mu", "K0", "a", "eps", "L_f", "theta", "M", "delta", "b", "c")


class InvalidBundleError(ValueError):
    pass


class NoDichotomyError(RuntimeError):
    pass


class DegenerateGridError(ValueError):
    pass


@dataclass(frozen=True)
class ConstantsBundle:
    """All constants entering the conjugacy hypotheses.

    ``mu < alpha`` and ``a + max(mu, eps) >= alpha`` are reported as margins
    rather than enforced, so that failing bundles can still be inspected.
    """

    K: float = 1.0
    alpha: float = 1.0
    mu: float = 0.0
    K0: float = 1.0
    a: float = 1.0
    eps: float = 0.0
    L_f: float = 0.0
    theta: float = 0.0
    M: float = 0.0
    delta: float = 0.0
    b: float = 1.0
    c: float | None = None

    def __post_init__(self):
        checks = [
            (self.K >= 1, "K >= 1"), (self.alpha > 0, "alpha > 0"),
            (self.mu >= 0, "mu >= 0"), (self.K0 >= 1, "K0 >= 1"),
            (self.a > 0, "a > 0"), (self.eps >= 0, "eps >= 0"),
            (self.L_f >= 0, "L_f >= 0"), (self.theta >= 0, "theta >= 0"),
            (self.M >= 0, "M >= 0"), (self.delta >= 0, "delta >= 0"),
            (self.b > 0, "b > 0"),
        ]
        for ok, what in checks:
            if not ok:
                raise InvalidBundleError(f"constants bundle requires {what}")
        if self.c is not None and not self.c > 0:
            raise InvalidBundleError("constants bundle requires c > 0")

    def replace(self, **changes) -> "ConstantsBundle":
        return replace(self, **changes)

    @property
    def compatibility_margin(self) -> float:
        return self.a + max(self.mu, self.eps) - self.alpha

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "ConstantsBundle":
        return cls(**{k: d[k] for k in _FIELDS if k in d and d[k] is not None})


@dataclass(frozen=True)
class DichotomyFit:
    K: float
    alpha: float
    mu: float


@dataclass(frozen=True)
class GrowthFit:
    K0: float
    a: float
    eps: float


@dataclass
class PairNorms:
    """Log norms of the evolution operator over all ordered time pairs."""

    t: np.ndarray
    s: np.ndarray
    log_phi: np.ndarray   # log ||Phi(t,s)||
    log_p: np.ndarray     # log ||Phi(t,s)P(s)|| for t >= s, else nan
    log_q: np.ndarray     # log ||Phi(t,s)Q(s)|| for t <= s, else nan

    def __len__(self):
        return len(self.t)


def _log_norm(M):
    v = np.linalg.norm(M, 2)
    return math.log(v) if v > 0 else -math.inf


def pair_norms(engine, times) -> PairNorms:
    """Evaluate the three norm families over ``times x times``."""
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or len(times) < 2 or np.any(np.diff(times) <= 0):
        raise DegenerateGridError("need at least two strictly increasing sample times")
    m = len(times)
    if m * m < MIN_PAIRS:
        raise DegenerateGridError(f"{m * m} time pairs < {MIN_PAIRS}")
    n = engine.n
    I = np.eye(n)
    dt = np.diff(times)
    F = engine._step_propagators(times[:-1], dt)
    B = engine._step_propagators(times[1:], -dt)
    # Phi(t_i, t_j) for all i, j by chaining neighbours
    phi = np.empty((m, m, n, n))
    for j in range(m):
        phi[j, j] = I
        for i in range(j + 1, m):
            phi[i, j] = F[i - 1] @ phi[i - 1, j]
        for i in range(j - 1, -1, -1):
            phi[i, j] = B[i] @ phi[i + 1, j]
    P = transport_projector(engine.system.P0, phi[:, 0], phi[0, :])
    Q = I - P
    ts, ss, lphi, lp, lq = [], [], [], [], []
    for i in range(m):
        for j in range(m):
            ts.append(times[i])
            ss.append(times[j])
            lphi.append(_log_norm(phi[i, j]))
            lp.append(_log_norm(phi[i, j] @ P[j]) if i >= j else math.nan)
            lq.append(_log_norm(phi[i, j] @ Q[j]) if i <= j else math.nan)
    return PairNorms(np.array(ts), np.array(ss), np.array(lphi), np.array(lp), np.array(lq))


def default_times(engine, count=41):
    return np.linspace(0.0, engine.horizon, count)


def _max_A_norm(engine, count=401):
    ts = np.linspace(0.0, engine.horizon, count)
    return float(np.max(np.linalg.norm(engine.system.A_at(ts), 2, axis=(-2, -1))))


def _dichotomy_rows(pn, mu):
    """(c, D) with constraint c + alpha*D <= log K for every finite row."""
    st = np.isfinite(pn.log_p)
    un = np.isfinite(pn.log_q)
    c = np.concatenate([pn.log_p[st] - mu * pn.s[st], pn.log_q[un] - mu * pn.s[un]])
    D = np.concatenate([pn.t[st] - pn.s[st], pn.s[un] - pn.t[un]])
    return c, D


def min_log_K(pn, alpha, mu):
    """Smallest ``log K >= 0`` making the dichotomy inequalities hold at (alpha, mu)."""
    c, D = _dichotomy_rows(pn, mu)
    if len(c) == 0:
        return 0.0
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    out = np.maximum(_envelope(c, D, alpha), 0.0)
    return out if out.size > 1 else float(out[0])


def _half_window(pn):
    cut = 0.5 * float(np.max(pn.t))
    return (pn.t <= cut + 1e-12) & (pn.s <= cut + 1e-12)


def _distinct_slopes(c, D):
    """Largest intercept per distinct slope; the upper envelope is unchanged."""
    u, inv = np.unique(D, return_inverse=True)
    best = np.full(len(u), -np.inf)
    np.maximum.at(best, inv, c)
    return best, u


def _envelope(c, D, rates):
    return _kernels.envelope_max(*_distinct_slopes(c, D), rates)


def _window_stable(c, D, half, rates, budget):
    """Rates whose required log K does not grow when the window doubles."""
    full = _envelope(c, D, rates)
    part = _envelope(c[half], D[half], rates)
    return np.maximum(full, 0.0), (full - np.maximum(part, 0.0)) <= budget


def fit_dichotomy(engine, times=None, *, mu_max=None, mu_step=0.05,
                  alpha_step=0.01, k_slack=0.01, pairs=None) -> DichotomyFit:
    """Fit (K, alpha, mu) on a grid of time pairs.

    On a finite grid any decay rate is admissible with a large enough K, so
    a rate ``alpha`` is accepted only if the K it needs on the full window
    exceeds the K it needs on the first half-window by at most the factor
    ``1 + k_slack``; a genuine exponential rate leaves K window-independent.
    For every candidate ``mu`` the largest accepted ``alpha`` is kept.  The
    widest gap ``alpha - mu`` wins; ties go to smaller ``mu``, larger
    ``alpha``, smaller K.
    """
    pn = pairs if pairs is not None else pair_norms(engine, default_times(engine) if times is None else times)
    if len(pn) < MIN_PAIRS:
        raise DegenerateGridError(f"{len(pn)} time pairs < {MIN_PAIRS}")
    if mu_max is None:
        mu_max = math.ceil(_max_A_norm(engine)) + 1.0
    budget = math.log1p(k_slack)
    rates = np.round(np.arange(1, int(round(2 * mu_max / alpha_step)) + 1) * alpha_step, 12)
    st = np.isfinite(pn.log_p)
    un = np.isfinite(pn.log_q)
    half_pairs = _half_window(pn)
    half = np.concatenate([half_pairs[st], half_pairs[un]])
    best = None
    for k in range(int(round(mu_max / mu_step)) + 1):
        mu = round(k * mu_step, 12)
        c, D = _dichotomy_rows(pn, mu)
        if not (D > 0).any() or not (D[half] > 0).any():
            raise DegenerateGridError("no time pairs with t != s")
        logK, ok = _window_stable(c, D, half, rates, budget)
        ok &= rates > mu + STRICT_SLACK
        if not ok.any():
            continue
        j = int(np.flatnonzero(ok)[-1])
        alpha = float(rates[j])
        key = (round(alpha - mu, 9), -mu, alpha, -float(logK[j]))
        if best is None or key > best[0]:
            best = (key, DichotomyFit(math.exp(float(logK[j])), alpha, mu))
    if best is None:
        raise NoDichotomyError("no candidate with alpha > mu: no exponential dichotomy on this grid")
    return best[1]


def fit_growth(engine, times=None, *, eps_max=None, eps_step=0.01, a_step=0.01,
               k_slack=0.01, pairs=None) -> GrowthFit:
    """Fit (K0, a, eps) with the same window-consistency rule as the dichotomy.

    Minimizes the total exponent ``a + eps``; ties go to smaller ``eps`` and
    then smaller K0.  ``a`` never drops below ``a_step``.
    """
    pn = pairs if pairs is not None else pair_norms(engine, default_times(engine) if times is None else times)
    if len(pn) < MIN_PAIRS:
        raise DegenerateGridError(f"{len(pn)} time pairs < {MIN_PAIRS}")
    a_max = math.ceil(_max_A_norm(engine)) + 1.0
    if eps_max is None:
        eps_max = a_max
    D = -np.abs(pn.t - pn.s)
    half = _half_window(pn)
    if not (D < 0).any() or not (D[half] < 0).any():
        raise DegenerateGridError("no time pairs with t != s")
    budget = math.log1p(k_slack)
    # slopes enter as -a so the envelope kernel is shared with the dichotomy fit
    rates = np.round(np.arange(1, int(round(2 * a_max / a_step)) + 1) * a_step, 12)
    best = None
    for k in range(int(round(eps_max / eps_step)) + 1):
        eps = round(k * eps_step, 12)
        c = pn.log_phi - eps * pn.s
        logK0, ok = _window_stable(c, D, half, rates, budget)
        if not ok.any():
            continue
        j = int(np.flatnonzero(ok)[0])
        a = float(rates[j])
        key = (round(a + eps, 9), eps, float(logK0[j]))
        if best is None or key < best[0]:
            best = (key, GrowthFit(math.exp(float(logK0[j])), a, eps))
    if best is None:
        raise DegenerateGridError("no growth rate found; widen eps_max")
    return best[1]


@dataclass
class ConstantsMargins:
    """Worst log-scale margins (right side minus left side) over the grid."""

    dichotomy_stable: float
    dichotomy_unstable: float
    growth: float
    compatibility: float
    mu_below_alpha: float
    pairs: int

    def as_dict(self):
        return asdict(self)

    @property
    def ok(self) -> bool:
        return (min(self.dichotomy_stable, self.dichotomy_unstable, self.growth) >= -STRICT_SLACK
                and self.compatibility >= 0 and self.mu_below_alpha > STRICT_SLACK)


def verify_constants(engine, bundle, times=None, *, pairs=None) -> ConstantsMargins:
    pn = pairs if pairs is not None else pair_norms(engine, default_times(engine) if times is None else times)
    logK = math.log(bundle.K)
    D = pn.t - pn.s

    def worst(vals):
        vals = vals[np.isfinite(vals)]
        return float(np.min(vals)) if len(vals) else math.inf

    stable = logK - bundle.alpha * D + bundle.mu * pn.s - pn.log_p
    unstable = logK + bundle.alpha * D + bundle.mu * pn.s - pn.log_q
    growth = math.log(bundle.K0) + bundle.a * np.abs(D) + bundle.eps * pn.s - pn.log_phi
    return ConstantsMargins(worst(stable), worst(unstable), worst(growth),
                            bundle.compatibility_margin, bundle.alpha - bundle.mu, len(pn))
