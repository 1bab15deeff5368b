import math

import numpy as np
import pytest

from conjlab.conditions import (check_theorem1, check_theorem2, condition_report,
                                contraction_factor, diffeo_horizon, estimate_perturbation_constants,
                                feasible_theta_interval, green_integrals, smoothness_lhs)
from conjlab.dichotomy import ConstantsBundle
from conjlab.flow import FlowEngine

from conftest import system


@pytest.fixture
def s1_bundle(s1):
    return ConstantsBundle.from_dict(s1.constants)


def test_contraction_factor_s1(s1_bundle):
    assert contraction_factor(s1_bundle) == pytest.approx(0.1 / 1.2 + 0.1 / 0.8, rel=1e-15)
    rep = check_theorem1(s1_bundle)
    assert rep.overall["theorem1"]
    assert rep.q == pytest.approx(0.208333, abs=1e-6)


def test_weight_too_large_breaks_contraction(s1_bundle):
    rep = check_theorem1(s1_bundle.replace(b=1.5))
    assert not rep.overall["theorem1"]
    assert rep.margins["upper_denominator_positive"] == pytest.approx(0.0, abs=1e-15)
    assert "contraction" in rep.failing()
    assert rep.q == math.inf


def test_zero_perturbation_contracts_trivially(s1_bundle):
    assert contraction_factor(s1_bundle.replace(L_f=0)) == 0.0


def test_product_form_agrees_in_sign(s1_bundle):
    for Lf in (0.1, 0.3, 0.5):
        rep = check_theorem1(s1_bundle.replace(L_f=Lf))
        assert (rep.margins["contraction"] > 0) == (rep.info["contraction_product_form"] > 0)


def test_smoothness_conditions_on_configs(s1_bundle):
    rep = check_theorem2(s1_bundle)
    assert rep.overall["theorem2"] and rep.t_c == math.inf
    rep5 = check_theorem2(s1_bundle.replace(c=5))
    assert not rep5.overall["theorem2"]
    assert rep5.failing() == ["smoothness_bound"]


def test_smoothness_lhs_value(s1_bundle):
    expect = 0.1 * math.exp(0.1 / 0.5) / 0.5
    assert smoothness_lhs(s1_bundle) == pytest.approx(expect, rel=1e-14)


def test_c_must_exceed_two(s1_bundle):
    with pytest.raises(ValueError):
        check_theorem2(s1_bundle.replace(c=2))
    with pytest.raises(ValueError):
        check_theorem2(s1_bundle.replace(c=None))


def test_diffeo_horizon():
    B = ConstantsBundle(alpha=1, a=1.2, eps=0.1, c=3)
    assert diffeo_horizon(B) == pytest.approx(math.log(2) / 0.3, rel=1e-15)
    assert diffeo_horizon(B.replace(a=0.5)) == math.inf
    assert diffeo_horizon(B.replace(a=0.9)) == math.inf


def test_feasible_theta_interval(s1_bundle):
    lo, hi = feasible_theta_interval(s1_bundle)
    assert lo == pytest.approx(0.0) and hi == pytest.approx(1.7)
    assert feasible_theta_interval(s1_bundle.replace(mu=0.9, alpha=1.0, b=0.05, eps=3)) is None


def test_estimated_constants_s1(s1):
    est = estimate_perturbation_constants(FlowEngine(s1))
    assert est.L_f == pytest.approx(0.1, rel=1e-3)
    assert est.theta == pytest.approx(0.5, abs=0.01)
    assert est.M == pytest.approx(0.1, rel=1e-3)
    assert est.delta == 0.0


def test_estimated_constants_zero():
    est = estimate_perturbation_constants(FlowEngine(system("zero_f")))
    assert est.zero and est.L_f == 0 and est.M == 0


def test_estimation_needs_enough_pairs(s1):
    with pytest.raises(ValueError):
        estimate_perturbation_constants(FlowEngine(s1), count=10)


def test_green_integrals_closed_form(s1, s1_bundle):
    # stable scalar with P = 1: int_0^t e^{-(t-s)} ds and int_0^t e^{-(t-s)} e^{-theta s} ds
    t = 2.0
    gd, gt = green_integrals(FlowEngine(s1), s1_bundle, t)
    assert gd == pytest.approx(1 - math.exp(-t), abs=1e-6)
    th = s1_bundle.theta
    assert gt == pytest.approx((math.exp(-th * t) - math.exp(-t)) / (1 - th), abs=1e-6)


def test_condition_report_includes_green(s1, s1_bundle):
    rep = condition_report(s1_bundle, FlowEngine(s1))
    assert rep.green_delta is not None and rep.overall["theorem2"]
    d = rep.to_dict()
    assert set(d["margins"]["contraction"]) == {"margin", "strict", "theorem", "pass"}
