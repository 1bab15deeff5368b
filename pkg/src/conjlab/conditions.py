"""Hypothesis checks with signed margins and the quantities derived from them.

A margin is ``right side - left side`` of an inequality.  Strict inequalities
pass when the margin exceeds ``STRICT_EPS``; the two non-strict ones
(``mu <= theta`` and ``mu + eps <= theta``, and the smoothness bound) pass
when it is nonnegative.  Reports never raise on failing margins.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import simpson

from .dichotomy import ConstantsBundle

STRICT_EPS = 1e-12


class DivergentTailError(ValueError):
    """The Green integral tail does not converge for these rates."""


@dataclass
class ConditionReport:
    margins: dict = field(default_factory=dict)
    strict: dict = field(default_factory=dict)
    group: dict = field(default_factory=dict)   # margin name -> condition group
    q: float = math.nan
    green_delta: float | None = None
    green_theta: float | None = None
    theta_interval: tuple | None = None
    t_c: float | None = None
    overall: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)     # reported but not part of any verdict

    def passed(self, name) -> bool:
        m = self.margins[name]
        return m > STRICT_EPS if self.strict[name] else m >= 0.0

    def _add(self, group, name, margin, strict):
        self.margins[name] = float(margin)
        self.strict[name] = strict
        self.group[name] = group

    def failing(self):
        return [k for k in self.margins if not self.passed(k)]

    def to_dict(self) -> dict:
        return {
            "margins": {k: {"margin": v, "strict": self.strict[k], "theorem": self.group[k],
                            "pass": self.passed(k)} for k, v in self.margins.items()},
            "q": self.q,
            "green_delta": self.green_delta,
            "green_theta": self.green_theta,
            "theta_interval": list(self.theta_interval) if self.theta_interval else None,
            "t_c": self.t_c,
            "overall": dict(self.overall),
            "info": dict(self.info),
        }


def contraction_factor(bundle: ConstantsBundle) -> float:
    """``K L_f / (alpha+mu-theta+b) + K L_f / (alpha-mu+theta-b)``; inf if a denominator is <= 0."""
    K, Lf = bundle.K, bundle.L_f
    d1 = bundle.alpha + bundle.mu - bundle.theta + bundle.b
    d2 = bundle.alpha - bundle.mu + bundle.theta - bundle.b
    if Lf == 0:
        return 0.0
    if d1 <= 0 or d2 <= 0:
        return math.inf
    return K * Lf / d1 + K * Lf / d2


def check_theorem1(bundle: ConstantsBundle, report: ConditionReport | None = None) -> ConditionReport:
    r = report or ConditionReport()
    B = bundle
    d1 = B.alpha + B.mu - B.theta + B.b
    d2 = B.alpha - B.mu + B.theta - B.b
    r._add("theorem1", "growth_below_weight_and_rate", min(B.b, B.alpha) - (B.delta + B.mu), True)
    r._add("theorem1", "mu_le_theta", B.theta - B.mu, False)
    r._add("theorem1", "eps_below_theta", B.theta - B.eps, True)
    r._add("theorem1", "lower_denominator_positive", d1, True)
    r._add("theorem1", "upper_denominator_positive", d2, True)
    r.q = contraction_factor(B)
    r._add("theorem1", "contraction", 1.0 - r.q, True)
    # same condition multiplied out; only meaningful when both denominators are positive
    r.info["contraction_product_form"] = d1 * d2 - 2.0 * B.alpha * B.K * B.L_f
    r.theta_interval = feasible_theta_interval(B)
    r.overall["theorem1"] = all(r.passed(k) for k, g in r.group.items() if g == "theorem1")
    return r


def smoothness_lhs(bundle: ConstantsBundle) -> float:
    """Left side of the smoothness bound compared against ``1/c``."""
    B = bundle
    if B.L_f == 0:
        return 0.0
    gap = B.alpha - B.a
    d_lo = B.theta - gap - B.mu
    d_hi = B.theta + gap - B.mu
    if B.theta <= B.eps or d_lo <= 0 or d_hi <= 0:
        return math.inf
    return (B.K * B.L_f * B.K0 * math.exp(B.L_f * B.K0 / (B.theta - B.eps))
            * max(1.0 / d_lo, 1.0 / d_hi))


def _require_c(bundle):
    if bundle.c is None:
        raise ValueError("smoothness constant c is required")
    if not bundle.c > 2:
        raise ValueError(f"smoothness constant c must exceed 2, got {bundle.c}")


def check_theorem2(bundle: ConstantsBundle) -> ConditionReport:
    _require_c(bundle)
    B = bundle
    r = check_theorem1(B)
    gap = B.alpha - B.a
    r._add("theorem2", "theta_above_rate_shift", B.theta - max(B.mu + gap, B.mu - gap), True)
    r._add("theorem2", "mu_plus_eps_le_theta", B.theta - B.mu - B.eps, False)
    r._add("theorem2", "smoothness_bound", 1.0 / B.c - smoothness_lhs(B), False)
    r._add("theorem2", "derivative_decay", B.alpha - B.mu + B.theta - B.a, True)
    own = all(r.passed(k) for k, g in r.group.items() if g == "theorem2")
    r.overall["theorem2"] = own and r.overall["theorem1"]
    if r.overall["theorem2"]:
        r.t_c = diffeo_horizon(B)
    return r


def feasible_theta_interval(bundle: ConstantsBundle):
    """Open interval of theta values meeting the four sign conditions, or None if empty."""
    B = bundle
    lo = max(B.mu + B.b - B.alpha, B.eps, B.mu)
    hi = B.mu + B.b + B.alpha
    return (lo, hi) if lo < hi else None


def diffeo_horizon(bundle: ConstantsBundle) -> float:
    """Time up to which ``|Lambda| < 1`` is guaranteed: ``ln(c-1)/(a+eps-alpha)``, or inf."""
    _require_c(bundle)
    rate = -bundle.alpha + bundle.a + bundle.eps
    if rate <= STRICT_EPS:     # an exponent that is zero up to round-off counts as zero
        return math.inf
    return math.log(bundle.c - 1.0) / rate


# ---------------------------------------------------------------- estimation

@dataclass(frozen=True)
class PerturbationConstants:
    L_f: float
    theta: float
    M: float
    delta: float
    zero: bool = False
    pairs: int = 0


def _ball(rng, count, dim, radius):
    d = rng.standard_normal((count, dim))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = radius * rng.random(count) ** (1.0 / dim)
    return d * r[:, None]


def _sup_log_rate(logv, ts, rate_step, budget, sign):
    """Fit ``logv(t) <= log C + sign*rate*t`` over a grid of rates >= 0.

    ``sign=-1`` (decay) keeps the largest rate whose C stays within ``budget``
    of the rate-free C; ``sign=+1`` (growth) keeps the smallest rate whose C
    is within ``budget`` of the best C over all rates considered.
    """
    rates = np.arange(0, 401) * rate_step
    logC = np.max(logv[None, :] - sign * rates[:, None] * ts[None, :], axis=1)
    if sign < 0:
        ok = logC <= logC[0] + budget
        j = int(np.flatnonzero(ok)[-1])
    else:
        ok = logC <= logC.min() + budget
        j = int(np.flatnonzero(ok)[0])
    return float(logC[j]), round(float(rates[j]), 12)


def estimate_perturbation_constants(engine, radius=2.0, count=1000, *, seed=0, times=41,
                                    rate_step=0.01, slack=0.01) -> PerturbationConstants:
    """Fit ``|f(t,y1)-f(t,y2)| <= L_f e^{-theta t}|y1-y2|`` and ``|f(t,y)| <= M e^{delta t}``.

    Both fits use sampled times ``t`` in ``[0, horizon]`` and points with
    ``|y| <= radius``; a sampled sup per time is fitted by a log-linear
    envelope.  ``count`` is the number of difference pairs per time.
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    if count < 1000:
        raise ValueError("at least 1000 sample pairs are required")
    n = engine.n
    rng = np.random.default_rng(seed)
    ts = np.linspace(0.0, engine.horizon, times)
    eye = np.eye(n)
    base = np.vstack([np.zeros((1, n)), radius * eye, -radius * eye,
                      _ball(rng, count, n, radius)])
    scales = np.where(np.arange(len(base)) % 2 == 0, 1e-4, 0.5)
    step = _ball(rng, len(base), n, 1.0)
    step /= np.maximum(np.linalg.norm(step, axis=1, keepdims=True), 1e-300)
    partner = base + step * scales[:, None]
    Y = np.concatenate([base, partner]).T                      # (n, 2P)
    P = base.shape[0]
    tt = np.repeat(ts[:, None], 2 * P, axis=1)                 # (T, 2P)
    F = engine.system.f_at(tt, np.broadcast_to(Y[:, None, :], (n, len(ts), 2 * P)))
    F = np.moveaxis(np.asarray(F, dtype=float), 0, -1)          # (T, 2P, n)
    mags = np.linalg.norm(F, axis=-1)
    ratio = np.linalg.norm(F[:, :P] - F[:, P:], axis=-1) / np.linalg.norm(base - partner, axis=1)
    sup_ratio = ratio.max(axis=1)
    sup_mag = mags.max(axis=1)
    if not np.any(sup_mag > 0) and not np.any(sup_ratio > 0):
        return PerturbationConstants(0.0, 0.0, 0.0, 0.0, True, P * len(ts))
    budget = math.log1p(slack)
    with np.errstate(divide="ignore"):
        lr = np.log(sup_ratio)
        lm = np.log(sup_mag)
    if np.any(sup_ratio > 0):
        logL, theta = _sup_log_rate(lr, ts, rate_step, budget, -1)
        L_f = math.exp(logL)
    else:
        L_f, theta = 0.0, 0.0
    logM, delta = _sup_log_rate(lm, ts, rate_step, budget, +1)
    return PerturbationConstants(L_f, theta, math.exp(logM), delta, False, P * len(ts))


# ---------------------------------------------------------------- green integrals

def green_norms(ops, k):
    """Spectral norms of the Green operator ``G(t_k, t_j)`` for every node ``j``.

    Both branches are built by projected recursions that only ever move in
    the decaying direction.
    """
    N = ops.N
    out_lo = np.zeros(k + 1)        # j <= k: Phi(t_k,t_j) P_j
    out_hi = np.zeros(N + 1 - k)    # j >= k: -Phi(t_k,t_j) Q_j
    S = ops.P[k].copy()
    out_lo[k] = np.linalg.norm(S, 2)
    for j in range(k - 1, -1, -1):
        S = S @ ops.F[j] @ ops.P[j]
        out_lo[j] = np.linalg.norm(S, 2)
    U = ops.Q[k].copy()
    out_hi[0] = np.linalg.norm(U, 2)
    for j in range(k + 1, N + 1):
        U = U @ ops.B[j - 1] @ ops.Q[j]
        out_hi[j - k] = np.linalg.norm(U, 2)
    return out_lo, out_hi


def _side_integral(vals, ts):
    if len(vals) < 2:
        return 0.0
    if len(vals) < 3:
        return float(np.trapezoid(vals, ts))
    return float(simpson(vals, x=ts))


def green_integrals(engine, bundle: ConstantsBundle, t, *, step=0.01, tail_tol=1e-9):
    """Truncated quadrature plus analytic tail for both weighted Green integrals.

    Returns ``(int ||G(t,s)|| e^{delta s} ds, int ||G(t,s)|| e^{-theta s} ds)``
    over ``s >= 0``, where the norm is the pointwise spectral norm.
    """
    B = bundle
    rate = B.alpha - B.mu - B.delta
    if rate <= 0:
        raise DivergentTailError(f"alpha - mu - delta = {rate:g} <= 0: the tail diverges")
    T = t + max(math.log(B.K / (rate * tail_tol)), 1.0) / rate
    eng = engine.extended(T)
    ops = eng.grid(step, T, rule="trapezoid")
    k = ops.node(t)
    tk = ops.times[k]
    lo, hi = green_norms(ops, k)
    s_lo = ops.times[: k + 1]
    s_hi = ops.times[k:]
    Tn = ops.times[-1]
    delta_int = (_side_integral(lo * np.exp(B.delta * s_lo), s_lo)
                 + _side_integral(hi * np.exp(B.delta * s_hi), s_hi)
                 + B.K * math.exp(B.alpha * tk - rate * Tn) / rate)
    trate = B.alpha - B.mu + B.theta
    theta_int = (_side_integral(lo * np.exp(-B.theta * s_lo), s_lo)
                 + _side_integral(hi * np.exp(-B.theta * s_hi), s_hi)
                 + B.K * math.exp(B.alpha * tk - trate * Tn) / trate)
    return delta_int, theta_int


def condition_report(bundle: ConstantsBundle, engine=None, t=0.0) -> ConditionReport:
    """Conjugacy conditions, plus the smoothness conditions when ``c`` is set and Green integrals when an engine is given."""
    r = check_theorem2(bundle) if bundle.c is not None else check_theorem1(bundle)
    if engine is not None and bundle.alpha - bundle.mu - bundle.delta > 0:
        r.green_delta, r.green_theta = green_integrals(engine, bundle, t)
    return r
