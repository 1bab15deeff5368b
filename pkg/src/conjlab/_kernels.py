"""Hot inner loops: projected Green sweeps and grid propagation.

Every kernel has a numba ``@njit`` version and a pure-numpy version with the
same signature.  Set ``CONJLAB_DISABLE_NUMBA=1`` to force the numpy path
(also used automatically when numba is not importable).
"""
import os

import numpy as np

_DISABLE = os.environ.get("CONJLAB_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLE:
        raise ImportError
    from numba import njit
    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


# ---------------------------------------------------------------- numpy path

def stencil_contributions(idx, WP, WQ, g):
    """Per-interval forward and backward stencil contributions, each (N, n, m)."""
    gs = g[idx]  # (N, 4, n, m)
    cf = np.einsum("ikab,ikbm->iam", WP, gs)
    cb = np.einsum("ikab,ikbm->iam", WQ, gs)
    return cf, cb


def projected_sweep_np(F, B, P, Q, cf, cb):
    """Accumulate interval contributions into the truncated Green integral.

    Forward part ``int_0^t Phi(t,s)P(s)g(s)ds`` runs left to right, backward
    part ``-int_t^T Phi(t,s)Q(s)g(s)ds`` right to left; both are re-projected
    at each node so neither direction ever grows.
    """
    N = F.shape[0]
    shape = (N + 1,) + cf.shape[1:]
    u = np.zeros(shape)
    v = np.zeros(shape)
    for i in range(N):
        u[i + 1] = P[i + 1] @ (F[i] @ u[i] + cf[i])
    for i in range(N - 1, -1, -1):
        v[i] = Q[i] @ (B[i] @ v[i + 1] - cb[i])
    return u + v


def green_sweep_np(F, B, P, Q, idx, WP, WQ, g):
    """Green-operator quadrature of node samples ``g`` of shape ``(N+1, n, m)``."""
    return projected_sweep_np(F, B, P, Q, *stencil_contributions(idx, WP, WQ, g))


def propagate_np(F, B, k, x0):
    """Carry ``x0`` (given at node ``k``) to all nodes with step propagators."""
    N = F.shape[0]
    out = np.empty((N + 1,) + x0.shape)
    out[k] = x0
    for i in range(k, N):
        out[i + 1] = F[i] @ out[i]
    for i in range(k - 1, -1, -1):
        out[i] = B[i] @ out[i + 1]
    return out


def envelope_max_np(c, D, slopes):
    """``max_p (c_p + slope * D_p)`` for every slope."""
    return np.max(c[None, :] + slopes[:, None] * D[None, :], axis=1)


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @njit(cache=True)
    def _matmul_into(out, A, X):
        n, m = X.shape
        for a in range(A.shape[0]):
            for c in range(m):
                acc = 0.0
                for b in range(n):
                    acc += A[a, b] * X[b, c]
                out[a, c] = acc

    @njit(cache=True)
    def projected_sweep_nb(F, B, P, Q, cf, cb):
        N = F.shape[0]
        n = cf.shape[1]
        m = cf.shape[2]
        u = np.zeros((N + 1, n, m))
        v = np.zeros((N + 1, n, m))
        acc = np.empty((n, m))
        for i in range(N):
            _matmul_into(acc, F[i], u[i])
            acc += cf[i]
            _matmul_into(u[i + 1], P[i + 1], acc)
        for i in range(N - 1, -1, -1):
            _matmul_into(acc, B[i], v[i + 1])
            acc -= cb[i]
            _matmul_into(v[i], Q[i], acc)
        return u + v

    @njit(cache=True)
    def green_sweep_nb(F, B, P, Q, idx, WP, WQ, g):
        N = F.shape[0]
        n = g.shape[1]
        m = g.shape[2]
        cf = np.zeros((N, n, m))
        cb = np.zeros((N, n, m))
        tmp = np.empty((n, m))
        for i in range(N):
            for k in range(4):
                _matmul_into(tmp, WP[i, k], g[idx[i, k]])
                cf[i] += tmp
                _matmul_into(tmp, WQ[i, k], g[idx[i, k]])
                cb[i] += tmp
        return projected_sweep_nb(F, B, P, Q, cf, cb)

    @njit(cache=True)
    def _propagate_nb(F, B, k, x0):
        N = F.shape[0]
        n, m = x0.shape
        out = np.empty((N + 1, n, m))
        out[k] = x0
        for i in range(k, N):
            _matmul_into(out[i + 1], F[i], out[i])
        for i in range(k - 1, -1, -1):
            _matmul_into(out[i], B[i], out[i + 1])
        return out

    def propagate_nb(F, B, k, x0):
        x0 = np.asarray(x0, dtype=np.float64)
        if x0.ndim == 1:
            return _propagate_nb(F, B, k, x0[:, None])[:, :, 0]
        return _propagate_nb(F, B, k, x0)

    @njit(cache=True)
    def envelope_max_nb(c, D, slopes):
        out = np.empty(slopes.shape[0])
        for j in range(slopes.shape[0]):
            best = -np.inf
            s = slopes[j]
            for p in range(c.shape[0]):
                val = c[p] + s * D[p]
                if val > best:
                    best = val
            out[j] = best
        return out

    green_sweep = green_sweep_nb
    projected_sweep = projected_sweep_nb
    propagate = propagate_nb
    envelope_max = envelope_max_nb
else:
    green_sweep = green_sweep_np
    projected_sweep = projected_sweep_np
    propagate = propagate_np
    envelope_max = envelope_max_np

BACKEND = "numba" if HAVE_NUMBA else "numpy"
