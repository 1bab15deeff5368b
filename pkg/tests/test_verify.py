import json
import math

import numpy as np
import pytest

from conjlab.conjugacy import ConjugacyEngine
from conjlab.dichotomy import ConstantsBundle, verify_constants
from conjlab.flow import FlowEngine, IntegrationError
from conjlab.verify import (CheckResult, _record, make_samples, run_suite, verify_bounds,
                            verify_conjugacy)

SCHEMA = {"check", "anchor", "max_residual", "tolerance", "pass", "samples"}


def test_samples_are_deterministic_and_in_range():
    a = make_samples(2, 30, t_max=8.0, seed=5)
    b = make_samples(2, 30, t_max=8.0, seed=5)
    assert a == b and len(a) == 30
    assert make_samples(2, 30, t_max=8.0, seed=6) != a
    for s in a:
        assert 0 <= s.t <= 8 and 0 <= s.tau <= 8 and 0 <= s.r <= 8
        assert np.linalg.norm(s.x) <= 2 + 1e-12 and np.linalg.norm(s.x2) <= 2 + 1e-12


def test_samples_include_corners():
    s = make_samples(2, 10, t_max=8.0, seed=0)
    assert any(x.t == 0 for x in s)
    assert any(not np.any(x.x) for x in s)
    assert any(np.linalg.norm(x.x) == pytest.approx(2.0) for x in s)
    assert make_samples(1, 2, t_max=1.0, corners=False)[0].t > 0


def test_zero_perturbation_report(ce_zero):
    rep = run_suite(ce_zero, make_samples(2, 8, t_max=ce_zero.t_max, seed=1), seed=1)
    assert rep.overall
    for c in rep.checks:
        if not c.check.startswith(("bound", "jacobian_det")):
            assert c.max_residual <= 1e-10, c.check


def test_report_schema_and_overall_flag(ce_s1):
    rep = run_suite(ce_s1, make_samples(1, 3, t_max=ce_s1.t_max, seed=3),
                    sections=("conjugacy", "bounds"), seed=3)
    d = json.loads(rep.to_json())
    assert d["overall_pass"] == all(c["pass"] for c in d["checks"])
    for c in d["checks"]:
        assert SCHEMA <= set(c)
        assert c["anchor"] and c["max_residual"] >= 0
    assert d["environment"]["bundle"]["c"] == 4.0
    lines = rep.to_csv().strip().splitlines()
    assert len(lines) == 1 + sum(c.samples for c in rep.checks)


def test_reports_are_byte_identical(s1):
    B = ConstantsBundle.from_dict(s1.constants)
    texts = []
    for _ in range(2):
        ce = ConjugacyEngine(FlowEngine(s1), B)
        rep = run_suite(ce, make_samples(1, 3, t_max=ce.t_max, seed=9),
                        sections=("conjugacy", "roundtrip", "invariance"), seed=9)
        texts.append(rep.to_json() + rep.to_csv())
    assert texts[0] == texts[1]


def test_halved_growth_rate_violates_gronwall(s1):
    B = ConstantsBundle.from_dict(s1.constants).replace(a=0.5)
    ce = ConjugacyEngine(s1, B)
    diff, deriv = verify_bounds(ce, make_samples(1, 20, t_max=ce.t_max, seed=4),
                                families=("difference", "derivative"))
    assert not diff.passed and diff.margin < -1e-3
    assert not deriv.passed


def test_doubled_decay_rate_violates_dichotomy(s1):
    eng = FlowEngine(s1)
    B = ConstantsBundle.from_dict(s1.constants).replace(alpha=2.0)
    assert verify_constants(eng, B).dichotomy_stable < 0


def test_lambda_check_reports_failed_smoothness(s1):
    ce = ConjugacyEngine(s1, ConstantsBundle.from_dict(s1.constants).replace(c=5))
    lam, det = verify_bounds(ce, make_samples(1, 2, t_max=ce.t_max), families=("lambda",))
    assert not lam.passed and "smoothness" in lam.note


def test_lambda_check_skipped_without_c(s1):
    ce = ConjugacyEngine(s1, ConstantsBundle.from_dict(s1.constants).replace(c=None))
    assert verify_bounds(ce, make_samples(1, 2, t_max=ce.t_max), families=("lambda",)) == []


def test_integration_failures_are_recorded():
    c = CheckResult("x", "anchor", 1e-6)

    def boom():
        raise IntegrationError("step size too small")

    _record(c, 0, boom)
    assert c.max_residual == math.inf and not c.passed and "step size" in c.note
