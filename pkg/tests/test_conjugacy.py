import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from conjlab.conjugacy import ConjugacyEngine, HypothesisError, WeightedPath, tail_horizon
from conjlab.dichotomy import ConstantsBundle
from conjlab.flow import FlowEngine
from conjlab.verify import fd_jacobian_G, weighted_z_bound

from conftest import system


def _zero_path(ce):
    return WeightedPath(ce.times, np.zeros((len(ce.times), ce.n)), ce.bundle.b)


def test_weighted_path_norm_and_interpolation():
    t = np.linspace(0, 2, 3)
    p = WeightedPath(t, np.array([[1.0], [2.0], [4.0]]), b=math.log(2))
    assert p.norm() == pytest.approx(1.0)
    assert p(0.5)[0] == pytest.approx(1.5)
    with pytest.raises(ValueError):
        p(3.0)


def test_tail_horizon_formula(s1):
    B = ConstantsBundle.from_dict(s1.constants)
    T = tail_horizon(B, 8.0, 1e-9)
    # K M e^{-(alpha-mu-delta)(T - t_max)} / (alpha-mu-delta) equals the tolerance
    assert B.K * B.M * math.exp(-(T - 8.0)) == pytest.approx(1e-9, rel=1e-12)


def test_failing_hypotheses_rejected(s1):
    B = ConstantsBundle.from_dict(s1.constants).replace(b=1.5)
    with pytest.raises(HypothesisError):
        ConjugacyEngine(s1, B)


def test_zero_perturbation_is_identity(ce_zero):
    x = np.array([1.0, -2.0])
    assert ce_zero.apply_gamma((0.0, x), _zero_path(ce_zero)).norm() == 0.0
    path, info = ce_zero.fixed_point_z((0.0, x), return_info=True)
    assert path.norm() == 0.0 and info.iterations <= 1
    assert ce_zero.compute_w((0.0, x)).norm() == 0.0
    np.testing.assert_array_equal(ce_zero.map_H(3.3, x), x)
    np.testing.assert_array_equal(ce_zero.map_G(3.3, x), x)
    np.testing.assert_allclose(ce_zero.map_G_alt(3.3, x), x, rtol=1e-9)
    J, lam = ce_zero.jacobian_G(2.0, x)
    np.testing.assert_array_equal(J, np.eye(2))
    assert lam == 0.0


def test_gamma_at_equilibrium_vanishes(ce_s1):
    assert ce_s1.apply_gamma((0.0, np.array([0.0])), _zero_path(ce_s1)).norm() == 0.0


def test_gamma_respects_weighted_bound(ce_s1):
    out = ce_s1.apply_gamma((0.0, np.array([1.0])), _zero_path(ce_s1))
    assert 0 < out.norm() <= weighted_z_bound(ce_s1.bundle) == pytest.approx(0.2)


def test_picard_ratios_below_q(ce_s1):
    _, info = ce_s1.fixed_point_z((0.0, np.array([1.0])), return_info=True)
    assert info.converged
    assert max(info.ratios) <= ce_s1.q + 0.05


def test_fixed_point_solves_initial_value_problem(ce_s1):
    # along the linear solution x, z' = A z + f(x + z) holds between nodes
    anchor = (0.0, np.array([1.0]))
    z = ce_s1.fixed_point_z(anchor).values[:, 0]
    x = ce_s1.linear_path(*anchor)[:, 0]
    t = ce_s1.times
    k = int(round(3.0 / ce_s1.step))
    sol = solve_ivp(lambda s, u: [-u[0] + 0.1 * math.exp(-0.5 * s) * math.sin(math.exp(-s) + u[0])],
                    (0.0, t[k]), [z[0]], method="DOP853", rtol=1e-12, atol=1e-14)
    assert sol.y[0, -1] == pytest.approx(z[k], abs=1e-8)
    assert x[k] == pytest.approx(math.exp(-t[k]), rel=1e-9)


def test_w_matches_refined_grid(s1):
    B = ConstantsBundle.from_dict(s1.constants)
    eng = FlowEngine(s1)
    coarse = ConjugacyEngine(eng, B)
    fine = ConjugacyEngine(eng, B, step=coarse.step / 2)
    a = coarse.compute_w((0.0, np.array([1.0]))).values[0]
    b = fine.compute_w((0.0, np.array([1.0]))).values[0]
    assert np.linalg.norm(a - b) <= 1e-7


def test_w_vanishes_on_zero_solution(ce_s2):
    assert ce_s2.compute_w((0.0, np.zeros(2))).norm() == 0.0


def test_origin_is_fixed(ce_s1):
    for t in (0.0, 2.7, 8.0):
        assert ce_s1.map_H(t, [0.0])[0] == 0.0
        assert ce_s1.map_G(t, [0.0])[0] == 0.0


def test_round_trip_s2(ce_s2):
    p = np.array([1.0, 0.5])
    assert np.linalg.norm(ce_s2.map_G(1.0, ce_s2.map_H(1.0, p)) - p) <= 1e-6


@pytest.mark.parametrize("name, s, eta", [("s2", 1.0, [1.0, 0.5]), ("s1", 2.0, [1.0])])
def test_alternative_formula(name, s, eta, request):
    ce = request.getfixturevalue(f"ce_{name}")
    assert np.linalg.norm(ce.map_G_alt(s, eta) - ce.map_G(s, eta)) <= 1e-6


def test_off_grid_time_uses_own_anchor(ce_s1):
    # 1.234 is between nodes; H there must still conjugate the flows
    t, tau, xi = 1.234, 0.0, np.array([0.8])
    x_t = ce_s1.flow.propagate_matrix(xi[:, None], tau, t)[:, 0]
    y_t = ce_s1.flow.solve_nonlinear(tau, ce_s1.map_H(tau, xi), t)
    assert np.linalg.norm(ce_s1.map_H(t, x_t) - y_t) <= 1e-8


def test_jacobian_at_time_zero_vanishes(ce_s1):
    J, lam = ce_s1.jacobian_G(0.0, [0.7])
    assert lam <= 1e-14
    np.testing.assert_allclose(J, np.eye(1), atol=1e-14)


def test_jacobian_bound_and_differences(ce_s1):
    J, lam = ce_s1.jacobian_G(2.0, [0.0])
    assert lam <= 0.25 * (1 + 1)
    assert np.max(np.abs(J - fd_jacobian_G(ce_s1, 2.0, [0.0]))) <= 1e-4


def test_results_are_reproducible(s2):
    B = ConstantsBundle.from_dict(s2.constants)
    a = ConjugacyEngine(s2, B).map_H(3.21, [0.3, -0.4])
    b = ConjugacyEngine(s2, B).map_H(3.21, [0.3, -0.4])
    assert a.tobytes() == b.tobytes()
