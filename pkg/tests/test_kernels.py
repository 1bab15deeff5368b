import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conjlab import _kernels as k

needs_numba = pytest.mark.skipif(not k.HAVE_NUMBA, reason="numba path disabled")


def _random_ops(rng, N, n, m):
    F = rng.normal(size=(N, n, n)) * 0.3 + np.eye(n)
    B = np.linalg.inv(F)
    P = np.empty((N + 1, n, n))
    for i in range(N + 1):
        V = rng.normal(size=(n, n)) + 2 * np.eye(n)
        D = np.diag((np.arange(n) % 2 == 0).astype(float))
        P[i] = V @ D @ np.linalg.inv(V)
    Q = np.eye(n) - P
    idx = np.clip(np.arange(N)[:, None] + np.arange(-1, 3)[None, :], 0, N)
    WP = rng.normal(size=(N, 4, n, n))
    WQ = rng.normal(size=(N, 4, n, n))
    g = rng.normal(size=(N + 1, n, m))
    return F, B, P, Q, idx.astype(np.int64), WP, WQ, g


@needs_numba
@settings(max_examples=25, deadline=None)
@given(st.integers(4, 40), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31))
def test_green_sweep_backends_agree(N, n, m, seed):
    F, B, P, Q, idx, WP, WQ, g = _random_ops(np.random.default_rng(seed), N, n, m)
    a = k.green_sweep_np(F, B, P, Q, idx, WP, WQ, g)
    b = k.green_sweep_nb(F, B, P, Q, idx, WP, WQ, g)
    np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-10)


@needs_numba
@settings(max_examples=25, deadline=None)
@given(st.integers(2, 40), st.integers(1, 3), st.integers(0, 2**31))
def test_propagate_backends_agree(N, n, seed):
    rng = np.random.default_rng(seed)
    F, B, *_ = _random_ops(rng, N, n, 1)
    kk = int(rng.integers(0, N + 1))
    x0 = rng.normal(size=n)
    a = k.propagate_np(F, B, kk, x0)
    b = k.propagate_nb(F, B, kk, x0)
    np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(a[kk], x0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 50), st.integers(1, 20), st.integers(0, 2**31))
def test_envelope_matches_brute_force(P, R, seed):
    rng = np.random.default_rng(seed)
    c, D, s = rng.normal(size=P), rng.normal(size=P) * 5, np.sort(rng.uniform(0, 3, R))
    ref = np.max(c[None, :] + s[:, None] * D[None, :], axis=1)
    np.testing.assert_allclose(k.envelope_max_np(c, D, s), ref, rtol=1e-14)
    np.testing.assert_allclose(k.envelope_max(c, D, s), ref, rtol=1e-14)


def test_projected_sweep_is_exact_on_constant_rates():
    # scalar stable system, forcing only in the first interval
    N, h = 50, 0.1
    F = np.full((N, 1, 1), np.exp(-h))
    B = np.full((N, 1, 1), np.exp(h))
    P = np.ones((N + 1, 1, 1))
    Q = np.zeros((N + 1, 1, 1))
    cf = np.zeros((N, 1, 1))
    cf[0] = 1.0
    out = k.projected_sweep(F, B, P, Q, cf, np.zeros((N, 1, 1)))
    np.testing.assert_allclose(out[1:, 0, 0], np.exp(-h * np.arange(N)), rtol=1e-13)
    assert out[0, 0, 0] == 0.0


def test_env_flag_selects_numpy_backend():
    env = dict(os.environ, CONJLAB_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", "from conjlab import _kernels as k; print(k.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
