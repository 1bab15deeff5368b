"""Property suite for a conjugacy engine and its machine-readable report.

Every check reduces a family of sampled identities or inequalities to one
nonnegative residual per sample.  Identities use the absolute error.
Inequalities of the form ``lhs <= rhs`` use the shortfall ``max(0, -margin)``
where the margin is ``log rhs - log lhs`` for multiplicative bounds and
``rhs - lhs`` otherwise.  A check passes when its largest residual is within
tolerance.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .conditions import check_theorem2
from .conjugacy import ConvergenceError
from .flow import IntegrationError
from .sysdsl import DomainError

DEFAULT_TOL = 1e-6
FD_STEP = 1e-5
FD_TOL = 1e-4
DET_FLOOR = 1e-6
WEIGHTED_SLACK = 1e-3
_FAILURES = (IntegrationError, ConvergenceError, DomainError, FloatingPointError)


@dataclass(frozen=True)
class Sample:
    """One sampled query.

    ``r`` is an auxiliary time for the flow-invariance checks and ``other``
    a second point for the difference bound.
    """

    t: float
    tau: float
    point: tuple
    r: float
    other: tuple

    @property
    def x(self):
        return np.array(self.point, dtype=float)

    @property
    def x2(self):
        return np.array(self.other, dtype=float)


def _ball(rng, count, dim, radius):
    d = rng.standard_normal((count, dim))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * (radius * rng.random(count) ** (1.0 / dim))[:, None]


def make_samples(dim, count, *, t_max, seed=0, radius=2.0, corners=True):
    """``count`` samples: fixed corner cases first, then seeded random draws.

    Times are uniform on ``[0, t_max]`` and points uniform in the ball of
    the given radius.  The corners cover ``t = 0``, the zero point and the
    boundary of the ball.
    """
    rng = np.random.default_rng(seed)
    e1 = np.zeros(dim)
    e1[0] = radius
    diag = np.full(dim, radius / math.sqrt(dim))
    fixed = [
        (0.0, 0.0, np.zeros(dim), 0.5 * t_max, e1),
        (0.0, t_max, e1, 0.5 * t_max, -diag),
        (t_max, 0.0, -e1[::-1], 0.25 * t_max, np.zeros(dim)),
        (0.5 * t_max, 0.5 * t_max, diag, t_max, -e1),
    ] if corners else []
    fixed = fixed[:count]
    k = count - len(fixed)
    times = rng.uniform(0.0, t_max, (k, 3))
    pts = _ball(rng, k, dim, radius)
    others = _ball(rng, k, dim, radius)
    out = [Sample(float(t), float(tau), tuple(map(float, p)), float(r), tuple(map(float, o)))
           for t, tau, p, r, o in fixed]
    out += [Sample(float(a), float(b), tuple(map(float, p)), float(c), tuple(map(float, o)))
            for (a, b, c), p, o in zip(times, pts, others)]
    return out


@dataclass
class CheckResult:
    check: str
    anchor: str
    tolerance: float
    residuals: list = field(default_factory=list)     # (sample index, residual)
    margin: float | None = None                       # worst margin, for inequalities
    note: str = ""

    @property
    def samples(self):
        return len(self.residuals)

    @property
    def max_residual(self):
        return max((r for _, r in self.residuals), default=0.0)

    @property
    def passed(self):
        return self.max_residual <= self.tolerance

    def to_dict(self):
        d = {"check": self.check, "anchor": self.anchor, "max_residual": self.max_residual,
             "tolerance": self.tolerance, "pass": self.passed, "samples": self.samples}
        if self.margin is not None:
            d["margin"] = self.margin
        if self.note:
            d["note"] = self.note
        return d


def _identity(name, anchor, tol):
    return CheckResult(name, anchor, tol)


def _record(check, i, fn):
    try:
        val = float(fn())
    except _FAILURES as exc:
        val = math.inf
        check.note = check.note or f"sample {i}: {exc}"
    check.residuals.append((i, val if not math.isnan(val) else math.inf))


def _record_margin(check, i, fn):
    """Store ``max(0, -margin)`` and track the worst margin."""
    try:
        m = float(fn())
    except _FAILURES as exc:
        m = -math.inf
        check.note = check.note or f"sample {i}: {exc}"
    if math.isnan(m):
        m = -math.inf
    check.margin = m if check.margin is None else min(check.margin, m)
    check.residuals.append((i, max(0.0, -m)))


def _log_margin(rhs, lhs):
    if lhs <= 0:
        return math.inf
    if rhs <= 0:
        return -math.inf
    return math.log(rhs) - math.log(lhs)


# ---------------------------------------------------------------- sections

def verify_conjugacy(ce, samples, tol=DEFAULT_TOL):
    """Both conjugation identities along linear and perturbed solutions."""
    fwd = _identity("conjugacy_H", "H carries linear solutions onto perturbed solutions", tol)
    bwd = _identity("conjugacy_G", "G carries perturbed solutions onto linear solutions", tol)
    flow = ce.flow
    for i, s in enumerate(samples):
        def h_res():
            x_t = flow.propagate_matrix(s.x[:, None], s.tau, s.t)[:, 0]
            y_t = flow.solve_nonlinear(s.tau, ce.map_H(s.tau, s.x), s.t)
            return np.linalg.norm(ce.map_H(s.t, x_t) - y_t)

        def g_res():
            y_t = flow.solve_nonlinear(s.tau, s.x, s.t)
            lin = flow.propagate_matrix(ce.map_G(s.tau, s.x)[:, None], s.tau, s.t)[:, 0]
            return np.linalg.norm(ce.map_G(s.t, y_t) - lin)

        _record(fwd, i, h_res)
        _record(bwd, i, g_res)
    return [fwd, bwd]


def verify_roundtrip(ce, samples, tol=DEFAULT_TOL):
    """``G(t, H(t, xi)) = xi`` and ``H(t, G(t, eta)) = eta``."""
    gh = _identity("roundtrip_G_after_H", "G(t, .) inverts H(t, .)", tol)
    hg = _identity("roundtrip_H_after_G", "H(t, .) inverts G(t, .)", tol)
    for i, s in enumerate(samples):
        _record(gh, i, lambda: np.linalg.norm(ce.map_G(s.t, ce.map_H(s.t, s.x)) - s.x))
        _record(hg, i, lambda: np.linalg.norm(ce.map_H(s.t, ce.map_G(s.t, s.x)) - s.x))
    return [gh, hg]


def weighted_z_bound(bundle):
    """Bound on the weighted norm of ``z`` from the dichotomy and magnitude constants."""
    B = bundle
    KM = B.K * B.M
    return KM / (B.alpha + B.delta + B.mu) + KM / (B.alpha - B.delta - B.mu)


def growth_factor(bundle):
    """``exp(K0 L_f / (theta - eps))``, the Gronwall amplification; inf if theta <= eps."""
    B = bundle
    if B.L_f == 0:
        return 1.0
    if B.theta <= B.eps:
        return math.inf
    return math.exp(B.K0 * B.L_f / (B.theta - B.eps))


def _growth_envelope(B, s, t):
    return B.K0 * math.exp(B.a * abs(t - s) + B.eps * t) * growth_factor(B)


BOUND_FAMILIES = ("weighted", "difference", "derivative", "lipschitz", "lambda")


def verify_bounds(ce, samples, tol=DEFAULT_TOL, families=BOUND_FAMILIES):
    """Worst margins of the analytic bounds implied by the constants bundle.

    ``weighted``: weighted norm of ``z`` (with an additive quadrature slack).
    ``difference``: growth of the distance between two perturbed solutions.
    ``derivative``: norm of the derivative of the perturbed flow.
    ``lipschitz``: norm of the Jacobian of ``f`` against its decaying envelope.
    ``lambda``: norm of ``Lambda`` below the diffeomorphism horizon (needs ``c``).
    """
    B = ce.bundle
    flow = ce.flow
    out = []
    if "weighted" in families:
        chk = CheckResult("bound_weighted_z", "weighted norm of z below the a-priori bound", tol)
        bound = weighted_z_bound(B) + WEIGHTED_SLACK
        for i, s in enumerate(samples):
            _record_margin(chk, i, lambda: bound - ce.fixed_point_z((s.tau, s.x)).norm())
        out.append(chk)
    if "difference" in families:
        chk = CheckResult("bound_difference", "Gronwall bound on the distance of perturbed solutions", tol)
        for i, s in enumerate(samples):
            def m():
                y1 = flow.solve_nonlinear(s.tau, s.x, s.t)
                y2 = flow.solve_nonlinear(s.tau, s.x2, s.t)
                rhs = _growth_envelope(B, s.t, s.tau) * np.linalg.norm(s.x - s.x2)
                return _log_margin(rhs, np.linalg.norm(y1 - y2))
            _record_margin(chk, i, m)
        out.append(chk)
    if "derivative" in families:
        chk = CheckResult("bound_derivative", "Gronwall bound on the derivative of the perturbed flow", tol)
        for i, s in enumerate(samples):
            def m():
                Y = flow.solve_variational(s.tau, s.x, s.t)
                return _log_margin(_growth_envelope(B, s.t, s.tau), np.linalg.norm(Y, 2))
            _record_margin(chk, i, m)
        out.append(chk)
    if "lipschitz" in families:
        chk = CheckResult("bound_lipschitz", "Jacobian of f below its decaying envelope", tol)
        for i, s in enumerate(samples):
            def m():
                J = flow.jacobian_point(s.t, s.x)
                return _log_margin(B.L_f * math.exp(-B.theta * s.t), np.linalg.norm(J, 2))
            _record_margin(chk, i, m)
        out.append(chk)
    if "lambda" in families and B.c is not None:
        out.extend(_lambda_bound(ce, samples, tol))
    return out


def _horizon_samples(ce, samples):
    """Samples whose time lies below the diffeomorphism horizon, or None if the smoothness conditions fail."""
    rep = check_theorem2(ce.bundle)
    if not rep.overall["theorem2"]:
        return None, rep
    return [(i, s) for i, s in enumerate(samples) if s.t < rep.t_c], rep


def _lambda_bound(ce, samples, tol):
    B = ce.bundle
    chk = CheckResult("bound_lambda", "norm of Lambda below the diffeomorphism bound", tol)
    det = CheckResult("jacobian_determinant", "Jacobian of G stays invertible below the horizon",
                      0.0)
    picked, rep = _horizon_samples(ce, samples)
    if picked is None:
        chk.note = det.note = "smoothness conditions fail: " + ", ".join(rep.failing())
        chk.residuals.append((-1, math.inf))
        det.residuals.append((-1, math.inf))
        return [chk, det]
    rate = -B.alpha + B.a + B.eps
    for i, s in picked:
        bound = (math.exp(rate * s.t) + 1.0) / B.c
        try:
            jac, lam = ce.jacobian_G(s.t, s.x)
        except _FAILURES as exc:
            jac, lam = np.full((ce.n, ce.n), np.nan), math.inf
            chk.note = det.note = f"sample {i}: {exc}"
        _record_margin(chk, i, lambda: bound - lam)
        _record_margin(det, i, lambda: abs(np.linalg.det(jac)) - DET_FLOOR)
    return [chk, det]


def fd_jacobian_G(ce, t, eta, h=FD_STEP):
    """Central-difference Jacobian of ``G(t, .)``."""
    eta = np.asarray(eta, dtype=float)
    n = len(eta)
    out = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        out[:, j] = (ce.map_G(t, eta + e) - ce.map_G(t, eta - e)) / (2 * h)
    return out


def verify_jacobian(ce, samples, tol=FD_TOL):
    """``I - Lambda`` against central differences of ``G`` below the horizon."""
    chk = CheckResult("jacobian_vs_differences", "I - Lambda equals the derivative of G", tol)
    picked, rep = _horizon_samples(ce, samples) if ce.bundle.c is not None else (None, None)
    if picked is None:
        chk.note = "needs c and passing smoothness conditions"
        chk.residuals.append((-1, math.inf))
        return [chk]
    for i, s in picked:
        _record(chk, i, lambda: np.max(np.abs(ce.jacobian_G(s.t, s.x)[0] - fd_jacobian_G(ce, s.t, s.x))))
    return [chk]


def verify_invariance(ce, samples, tol=DEFAULT_TOL):
    """Flow invariance of ``z`` and ``w``, the fixed-point forms of ``G`` and ``H``,
    and the alternative formula for ``G``."""
    flow = ce.flow
    zc = _identity("invariance_z", "z is constant along linear solutions", tol)
    wc = _identity("invariance_w", "w is constant along perturbed solutions", tol)
    gf = _identity("fixed_point_G", "G(t, eta) = eta - z(t; (t, G(t, eta)))", tol)
    hf = _identity("fixed_point_H", "H(t, xi) = xi - w(t; (t, H(t, xi)))", tol)
    alt = _identity("alternative_G", "G through time zero agrees with G", tol)
    for i, s in enumerate(samples):
        def z_res():
            x_r = flow.propagate_matrix(s.x[:, None], s.tau, s.r)[:, 0]
            return np.linalg.norm(ce.z_at((s.tau, s.x), s.t) - ce.z_at((s.r, x_r), s.t))

        def w_res():
            y_r = flow.solve_nonlinear(s.tau, s.x, s.r)
            return np.linalg.norm(ce.w_at((s.tau, s.x), s.t) - ce.w_at((s.r, y_r), s.t))

        def g_res():
            G = ce.map_G(s.tau, s.x)
            return np.linalg.norm(G - (s.x - ce.z_at((s.tau, G), s.tau)))

        def h_res():
            H = ce.map_H(s.tau, s.x)
            return np.linalg.norm(H - (s.x - ce.w_at((s.tau, H), s.tau)))

        _record(zc, i, z_res)
        _record(wc, i, w_res)
        _record(gf, i, g_res)
        _record(hf, i, h_res)
        _record(alt, i, lambda: np.linalg.norm(ce.map_G_alt(s.tau, s.x) - ce.map_G(s.tau, s.x)))
    return [zc, wc, gf, hf, alt]


# ---------------------------------------------------------------- report

SECTIONS = {
    "conjugacy": verify_conjugacy,
    "roundtrip": verify_roundtrip,
    "bounds": verify_bounds,
    "invariance": verify_invariance,
    "jacobian": verify_jacobian,
}


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return "nan" if math.isnan(v) else ("inf" if v > 0 else "-inf")
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.generic):
        return _jsonable(v.item())
    return v


@dataclass
class VerificationReport:
    checks: list
    environment: dict
    samples: list

    @property
    def overall(self) -> bool:
        return all(c.passed for c in self.checks)

    def check(self, name) -> CheckResult:
        for c in self.checks:
            if c.check == name:
                return c
        raise KeyError(name)

    def to_dict(self):
        return {"overall_pass": self.overall, "environment": self.environment,
                "checks": [c.to_dict() for c in self.checks]}

    def to_json(self):
        return json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True) + "\n"

    def to_csv(self):
        """One row per (check, sample) with the sample coordinates."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n = len(self.samples[0].point) if self.samples else 0
        w.writerow(["check", "sample", "t", "tau", "r"] + [f"x{j + 1}" for j in range(n)] + ["residual"])
        for c in self.checks:
            for i, res in c.residuals:
                if i < 0:
                    w.writerow([c.check, i, "", "", ""] + [""] * n + [repr(res)])
                    continue
                s = self.samples[i]
                w.writerow([c.check, i, repr(s.t), repr(s.tau), repr(s.r)]
                           + [repr(v) for v in s.point] + [repr(float(res))])
        return buf.getvalue()


def environment(ce, seed=None):
    return {
        "step": ce.step,
        "grid_end": ce.times[-1],
        "t_max": ce.t_max,
        "tail_tol": ce.tail_tol,
        "tol_fixedpoint": ce.tol,
        "tol_ode": ce.flow.rtol,
        "contraction_factor": ce.q,
        "bundle": ce.bundle.to_dict(),
        "kernel_backend": _kernels.BACKEND,
        "seed": seed,
    }


def run_suite(ce, samples, *, sections=("conjugacy", "roundtrip", "bounds", "invariance", "jacobian"),
              tol=DEFAULT_TOL, seed=None) -> VerificationReport:
    checks = []
    for name in sections:
        fn = SECTIONS[name]
        checks.extend(fn(ce, samples) if name == "jacobian" else fn(ce, samples, tol))
    return VerificationReport(checks, environment(ce, seed), list(samples))
