"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines inline;
they are also repeated in the terminal summary.
"""
import math
import time

import numpy as np
import pytest

from conjlab.conditions import check_theorem2, diffeo_horizon
from conjlab.dichotomy import ConstantsBundle, fit_dichotomy, fit_growth, pair_norms, verify_constants
from conjlab.flow import FlowEngine
from conjlab.verify import (make_samples, verify_bounds, verify_conjugacy, verify_invariance,
                            verify_jacobian, verify_roundtrip, weighted_z_bound)

from conftest import system

SEED = 2024
TOL = 1e-6


def _engine(name, request):
    return request.getfixturevalue(f"ce_{name}")


# ---------------------------------------------------------------- 1

def test_criterion_01_identity_on_zero_perturbation(ce_zero, acceptance):
    t0 = time.perf_counter()
    times = np.linspace(0.0, ce_zero.t_max, 10)
    pts = np.linspace(-2.0, 2.0, 10)
    worst = 0.0
    for t in times:
        for p in pts:
            x = np.array([p, -0.5 * p])
            worst = max(worst, np.linalg.norm(ce_zero.map_H(t, x) - x),
                        np.linalg.norm(ce_zero.map_G(t, x) - x))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 10
    acceptance(1, ok, f"zero perturbation: max |H-id|, |G-id| = {worst:.2e} <= 1e-12 "
                      f"on 10x10 grid ({elapsed:.1f}s < 10s)")
    assert ok


# ---------------------------------------------------------------- 2, 3

_CONJ = {}


def _conjugacy_results(name, request):
    if name not in _CONJ:
        ce = _engine(name, request)
        samples = make_samples(ce.n, 50, t_max=ce.t_max, seed=SEED, radius=2.0)
        t0 = time.perf_counter()
        conj = verify_conjugacy(ce, samples, TOL)
        t1 = time.perf_counter()
        rt = verify_roundtrip(ce, samples, TOL)
        t2 = time.perf_counter()
        _CONJ[name] = (conj, t1 - t0, rt, t2 - t1)
    return _CONJ[name]


@pytest.mark.parametrize("name", ["s1", "s2"])
def test_criterion_02_conjugacy_identities(name, request, acceptance):
    conj, elapsed, _, _ = _conjugacy_results(name, request)
    h, g = conj
    ok = h.passed and g.passed and h.samples == 50 and elapsed < 120
    acceptance(2, ok, f"{name}: conjugacy H {h.max_residual:.2e}, G {g.max_residual:.2e} <= 1e-6 "
                      f"over {h.samples} samples ({elapsed:.1f}s < 120s)")
    assert ok


@pytest.mark.parametrize("name", ["s1", "s2"])
def test_criterion_03_round_trips(name, request, acceptance):
    _, _, rt, elapsed = _conjugacy_results(name, request)
    gh, hg = rt
    ok = gh.passed and hg.passed and gh.samples == 50 and elapsed < 120
    acceptance(3, ok, f"{name}: round trips G(H) {gh.max_residual:.2e}, H(G) {hg.max_residual:.2e} "
                      f"<= 1e-6 ({elapsed:.1f}s < 120s)")
    assert ok


# ---------------------------------------------------------------- 4

def test_criterion_04_contraction(ce_s1, acceptance):
    t0 = time.perf_counter()
    _, info = ce_s1.fixed_point_z((0.0, np.array([1.0])), return_info=True)
    elapsed = time.perf_counter() - t0
    ratios = info.ratios
    worst = max(ratios) if ratios else 0.0
    ok = (info.converged and info.iterations <= 15 and worst <= 0.26
          and abs(ce_s1.q - 0.208333) < 1e-6 and ce_s1.tol == 1e-10 and elapsed < 30)
    acceptance(4, ok, f"s1: q = {ce_s1.q:.6f}, max Picard ratio {worst:.4f} <= 0.26, "
                      f"{info.iterations} iterations <= 15 at tol {ce_s1.tol:g} ({elapsed:.1f}s)")
    assert ok


# ---------------------------------------------------------------- 5

def test_criterion_05_weighted_bound(ce_s1, acceptance):
    t0 = time.perf_counter()
    B = ce_s1.bundle
    bound = weighted_z_bound(B)
    worst = 0.0
    for t in np.linspace(0.0, ce_s1.t_max, 9):
        for xi in np.linspace(-2.0, 2.0, 9):
            x = np.array([xi])
            worst = max(worst, math.exp(-B.b * t) * np.linalg.norm(ce_s1.map_H(t, x) - x))
    elapsed = time.perf_counter() - t0
    ok = abs(bound - 0.2) < 1e-12 and worst <= bound + 1e-3 and elapsed < 30
    acceptance(5, ok, f"s1: sup e^(-{B.b}t)|H - xi| = {worst:.4f} <= {bound:.1f} + 1e-3 "
                      f"({elapsed:.1f}s)")
    assert ok


# ---------------------------------------------------------------- 6

@pytest.mark.parametrize("name", ["s1", "s2"])
def test_criterion_06_jacobian(name, request, acceptance):
    ce = _engine(name, request)
    assert ce.bundle.c == 4
    rep = check_theorem2(ce.bundle)
    assert rep.overall["theorem2"]
    limit = min(rep.t_c, ce.t_max)
    t0 = time.perf_counter()
    samples = [s for s in make_samples(ce.n, 12, t_max=limit, seed=SEED) if s.t < limit]
    fd = verify_jacobian(ce, samples)[0]
    lam, det = verify_bounds(ce, samples, TOL, families=("lambda",))
    elapsed = time.perf_counter() - t0
    ok = fd.passed and lam.passed and det.passed and fd.samples == len(samples) and elapsed < 120
    acceptance(6, ok, f"{name}: |(I-Lambda) - FD| = {fd.max_residual:.2e} <= 1e-4, Lambda bound "
                      f"margin {lam.margin:.3f} >= -1e-6, min |det| - 1e-6 = {det.margin:.3f} >= 0 "
                      f"on {fd.samples} samples, t < {limit} ({elapsed:.1f}s)")
    assert ok


# ---------------------------------------------------------------- 7

def test_criterion_07_horizon_formula(acceptance):
    t0 = time.perf_counter()
    base = ConstantsBundle(alpha=1.0, a=1.2, eps=0.1, c=3.0)
    h = diffeo_horizon(base)
    flat = diffeo_horizon(base.replace(a=0.9))
    elapsed = time.perf_counter() - t0
    # the quoted 2.310490 is ln(2)/0.3 = 2.3104906... cut after six decimals
    ok = (abs(h - math.log(2.0) / 0.3) <= 1e-9 and math.floor(h * 1e6) / 1e6 == 2.310490
          and flat == math.inf and elapsed < 1)
    acceptance(7, ok, f"diffeo_horizon = {h:.10f}: |h - ln(2)/0.3| <= 1e-9, reads 2.310490 to six "
                      f"decimals (|h - 2.310490| = {abs(h - 2.310490):.1e}); inf when the exponent "
                      f"is <= 0: {flat}")
    assert ok


# ---------------------------------------------------------------- 8

def test_criterion_08_dichotomy_fitting(acceptance):
    t0 = time.perf_counter()
    bv = FlowEngine(system("bv"))
    pn = pair_norms(bv, np.linspace(0.0, 20.0, 41))
    d = fit_dichotomy(bv, pairs=pn)
    g = fit_growth(bv, pairs=pn)
    fitted = ConstantsBundle(K=d.K, alpha=d.alpha, mu=d.mu, K0=g.K0, a=g.a, eps=g.eps)
    m_fit = verify_constants(bv, fitted, pairs=pn)
    e2 = math.exp(2.0)
    hand = ConstantsBundle(K=e2, alpha=4.0, mu=2.0, K0=e2, a=6.0, eps=2.0)
    m_hand = verify_constants(bv, hand, pairs=pn)
    compat = {"bv": fitted.compatibility_margin}
    for name in ("s1", "s2"):
        eng = FlowEngine(system(name))
        p = pair_norms(eng, np.linspace(0.0, eng.horizon, 41))
        dd, gg = fit_dichotomy(eng, pairs=p), fit_growth(eng, pairs=p)
        compat[name] = ConstantsBundle(K=dd.K, alpha=dd.alpha, mu=dd.mu, K0=gg.K0, a=gg.a,
                                       eps=gg.eps).compatibility_margin
    elapsed = time.perf_counter() - t0

    def worst(m):
        return min(m.dichotomy_stable, m.dichotomy_unstable, m.growth)

    ok = (worst(m_fit) >= -1e-9 and worst(m_hand) >= -1e-9 and min(compat.values()) >= 0
          and elapsed < 60)
    acceptance(8, ok, f"bv fit (K={d.K:.3f}, alpha={d.alpha}, mu={d.mu}) margin {worst(m_fit):.2e}, "
                      f"hand (e^2, 4, 2) margin {worst(m_hand):.2e} >= -1e-9; compatibility "
                      + ", ".join(f"{k} {v:.2f}" for k, v in compat.items()) + f" >= 0 ({elapsed:.1f}s)")
    assert ok


# ---------------------------------------------------------------- 9

@pytest.mark.parametrize("name", ["s1", "s2"])
def test_criterion_09_gronwall_bounds(name, request, acceptance):
    ce = _engine(name, request)
    samples = make_samples(ce.n, 100, t_max=ce.t_max, seed=SEED + 1)
    t0 = time.perf_counter()
    diff, deriv = verify_bounds(ce, samples, TOL, families=("difference", "derivative"))
    elapsed = time.perf_counter() - t0
    ok = diff.passed and deriv.passed and diff.samples == 100 and elapsed < 60
    acceptance(9, ok, f"{name}: difference bound margin {diff.margin:.3e}, derivative bound margin "
                      f"{deriv.margin:.3e} >= -1e-6 on 100 samples ({elapsed:.1f}s)")
    assert ok


# ---------------------------------------------------------------- 10

@pytest.mark.parametrize("name", ["s1", "s2"])
def test_criterion_10_invariance(name, request, acceptance):
    ce = _engine(name, request)
    samples = make_samples(ce.n, 20, t_max=ce.t_max, seed=SEED + 2)
    t0 = time.perf_counter()
    checks = verify_invariance(ce, samples, TOL)
    elapsed = time.perf_counter() - t0
    ok = all(c.passed and c.samples == 20 for c in checks) and elapsed < 120
    acceptance(10, ok, f"{name}: " + ", ".join(f"{c.check} {c.max_residual:.1e}" for c in checks)
               + f" <= 1e-6 ({elapsed:.1f}s)")
    assert ok
