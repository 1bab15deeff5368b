"""Evolution operators, invariant projectors, Green operator and trajectories.

All integration goes through an adaptive embedded Runge-Kutta pair (DOP853).
Expanding directions are never inverted: backward transition matrices are
obtained by integrating the matrix equation backward in time.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from . import _kernels

OVERFLOW_LIMIT = 1e12


class IntegrationError(RuntimeError):
    pass


class BlowUpError(IntegrationError):
    pass


class GrowthWarning(RuntimeWarning):
    """A transition matrix entry exceeded the overflow limit."""


# 4-point cubic rules for one interval [t_i, t_{i+1}] of a uniform grid
_CUBIC_INTERIOR = np.array([-1.0, 13.0, 13.0, -1.0]) / 24.0
_CUBIC_FIRST = np.array([9.0, 19.0, -5.0, 1.0]) / 24.0
_CUBIC_LAST = np.array([1.0, -5.0, 19.0, 9.0]) / 24.0


@dataclass
class GridOperators:
    """Step propagators, projectors and Green stencils on ``t_i = i*h``."""

    times: np.ndarray   # (N+1,)
    h: float
    F: np.ndarray       # Phi(t_{i+1}, t_i)
    B: np.ndarray       # Phi(t_i, t_{i+1})
    phi0: np.ndarray    # Phi(t_i, 0)
    P: np.ndarray
    Q: np.ndarray
    idx: np.ndarray     # (N, 4) stencil nodes per interval
    WP: np.ndarray      # h*w*Phi(t_{i+1}, t_j) P(t_j)
    WQ: np.ndarray      # h*w*Phi(t_i, t_j) Q(t_j)

    @property
    def N(self):
        return len(self.times) - 1

    def node(self, t):
        """Index of the node nearest to ``t``."""
        return int(min(max(round(t / self.h), 0), self.N))

    def contributions(self, g):
        """Stencil contributions ``(cf, cb)`` of node samples ``g`` (N+1, n, m)."""
        return _kernels.stencil_contributions(self.idx, self.WP, self.WQ, g)

    def exact_contributions(self, c, rows=None):
        """Contributions from exact interval integrals ``c_i = int Phi(t_{i+1},s) g(s) ds``.

        ``rows`` selects the intervals ``c`` belongs to (default: all).
        """
        rows = slice(None) if rows is None else rows
        cf = self.P[1:][rows] @ c
        cb = self.Q[:-1][rows] @ (self.B[rows] @ c)
        return cf, cb

    def sweep(self, cf, cb):
        return _kernels.projected_sweep(self.F, self.B, self.P, self.Q,
                                        np.ascontiguousarray(cf), np.ascontiguousarray(cb))

    def apply_green(self, g):
        """Green-operator quadrature of node samples ``g`` of shape (N+1, n[, m])."""
        vec = g.ndim == 2
        G = np.ascontiguousarray(g[:, :, None] if vec else g, dtype=np.float64)
        out = _kernels.green_sweep(self.F, self.B, self.P, self.Q,
                                   self.idx, self.WP, self.WQ, G)
        return out[:, :, 0] if vec else out

    def propagate(self, k, x0):
        """Linear solution through ``x0`` at node ``k``, sampled at all nodes."""
        x0 = np.asarray(x0, dtype=np.float64)
        if _kernels.HAVE_NUMBA:
            return _kernels.propagate(self.F, self.B, k, x0)
        return _kernels.propagate_np(self.F, self.B, k, x0)


def transport_projector(P0, phi, inv):
    """``phi @ P0 @ inv`` with the trivial projectors 0 and I kept exact."""
    if not P0.any():
        return np.zeros_like(phi)
    if np.array_equal(P0, np.eye(P0.shape[0])):
        return np.broadcast_to(P0, phi.shape).copy()
    return phi @ P0 @ inv


class FlowEngine:
    """Caching integrator for one :class:`~conjlab.sysdsl.SystemDefinition`.

    Caches are plain dicts; share an engine across threads only for reads.
    """

    def __init__(self, system, *, rtol=None, atol=1e-12, horizon=None):
        self.system = system
        self.n = system.dim
        self.rtol = float(system.numerics.get("tol_ode", 1e-10) if rtol is None else rtol)
        self.atol = min(atol, self.rtol)
        self.horizon = float(system.horizon if horizon is None else horizon)
        self._traj = {}
        self._grids = {}
        self._I = np.eye(self.n)

    def extended(self, horizon):
        """This engine if it already reaches ``horizon``, else a longer twin."""
        if horizon <= self.horizon:
            return self
        return FlowEngine(self.system, rtol=self.rtol, atol=self.atol, horizon=horizon)

    # ------------------------------------------------------------ linear part
    def _check_time(self, *ts):
        for t in ts:
            if not (0.0 <= t <= self.horizon * (1 + 1e-12)):
                raise ValueError(f"time {t} outside [0, {self.horizon}]")

    def _matrix_rhs(self, t, x):
        X = x.reshape(self.n, -1)
        return (self.system.A_point(t) @ X).ravel()

    def propagate_matrix(self, X0, s, t, rtol=None, atol=None):
        """Integrate ``X' = A(t) X`` from ``X(s) = X0`` to time ``t``."""
        X0 = np.asarray(X0, dtype=float)
        if t == s:
            return X0.copy()
        sol = solve_ivp(self._matrix_rhs, (s, t), X0.ravel(), method="DOP853",
                        rtol=rtol or self.rtol, atol=atol or self.atol)
        if not sol.success:
            raise IntegrationError(sol.message)
        out = sol.y[:, -1].reshape(X0.shape)
        if np.max(np.abs(out)) > OVERFLOW_LIMIT:
            warnings.warn(f"transition matrix entries exceed {OVERFLOW_LIMIT:g} "
                          f"on [{min(s, t)}, {max(s, t)}]", GrowthWarning, stacklevel=3)
        return out

    def transition_matrix(self, t, s):
        """Phi(t, s), integrated from s to t (either direction)."""
        self._check_time(t, s)
        if t == s:
            return self._I.copy()
        return self.propagate_matrix(self._I, s, t)

    def projector_at(self, t):
        """P(t) = Phi(t,0) P0 Phi(0,t)."""
        self._check_time(t)
        P0 = self.system.P0
        if t == 0:
            return P0.copy()
        left = self.propagate_matrix(self._I, 0.0, t)       # Phi(t,0)
        right = self.propagate_matrix(self._I, t, 0.0)      # Phi(0,t)
        return transport_projector(P0, left, right)

    def green(self, t, s, side=None):
        """Green operator G(t,s); ``side`` in {'-','+'} picks a one-sided limit at s=t."""
        self._check_time(t, s)
        stable = t > s or (t == s and side != "+")
        P = self.projector_at(s)
        if stable:
            return self.propagate_matrix(P, s, t)
        return -self.propagate_matrix(self._I - P, s, t)

    # ------------------------------------------------------------ nonlinear
    def _rhs(self, t, y):
        return self.system.rhs_point(t, y)

    def _solve(self, y0, t0, t_eval, rhs=None):
        """Integrate from ``(t0, y0)`` through the sorted-by-direction ``t_eval``."""
        rhs = rhs or self._rhs
        t_eval = np.asarray(t_eval, dtype=float)
        out = np.empty((len(t_eval), len(y0)))
        if len(t_eval) == 0:
            return out
        hit = t_eval == t0
        out[hit] = y0
        for mask in (t_eval > t0, t_eval < t0):
            if not mask.any():
                continue
            ts = t_eval[mask]
            order = np.argsort(ts) if ts[0] > t0 else np.argsort(-ts)
            tt = ts[order]
            sol = solve_ivp(rhs, (t0, tt[-1]), y0, method="DOP853", t_eval=tt,
                            rtol=self.rtol, atol=self.atol)
            if not sol.success or sol.y.shape[1] != len(tt):
                raise BlowUpError(f"integration from t={t0} failed: {sol.message}")
            vals = np.empty((len(tt), len(y0)))
            vals[order] = sol.y.T
            out[mask] = vals
        if not np.all(np.isfinite(out)) or np.max(np.abs(out[:, : self.n])) > OVERFLOW_LIMIT:
            raise BlowUpError(f"trajectory from t={t0} exceeds {OVERFLOW_LIMIT:g}")
        return out

    def solve_nonlinear(self, tau, eta, s):
        """y(s, tau, eta) for the perturbed system."""
        self._check_time(tau, s)
        eta = np.asarray(eta, dtype=float).reshape(self.n)
        return self._solve(eta, tau, [s])[0]

    def trajectory_on(self, tau, eta, times):
        """y(times, tau, eta); cached by ``(tau, eta, times)``."""
        eta = np.asarray(eta, dtype=float).reshape(self.n)
        times = np.asarray(times, dtype=float)
        key = (float(tau), eta.tobytes(), times.shape[0], float(times[0]), float(times[-1]))
        hit = self._traj.get(key)
        if hit is None:
            hit = self._solve(eta, float(tau), times)
            self._traj[key] = hit
        return hit

    def jacobian_f(self, t, Y):
        """Central-difference d_2 f at the columns of ``Y`` (n, m) -> (m, n, n)."""
        Y = np.asarray(Y, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        n, m = Y.shape
        t = np.broadcast_to(np.asarray(t, dtype=float), (m,))
        step = 1e-6 * np.maximum(1.0, np.abs(Y))         # (n, m)
        # columns ordered (m, n): perturb coordinate j of column c
        E = np.eye(n)[:, None, :] * step.T[None, :, :]    # (n, m, n)
        Yp = Y[:, :, None] + E
        Ym = Y[:, :, None] - E
        tt = np.broadcast_to(t[:, None], (m, n))
        fp = self.system.f_at(tt, Yp)
        fm = self.system.f_at(tt, Ym)
        J = (fp - fm) / (2.0 * step.T[None, :, :])        # (n_out, m, n_in)
        return np.transpose(J, (1, 0, 2))

    def jacobian_point(self, t, y):
        """Central-difference d_2 f at a single point, same steps as :meth:`jacobian_f`."""
        n = self.n
        f = self.system.f_point
        J = np.empty((n, n))
        for j in range(n):
            h = 1e-6 * max(1.0, abs(y[j]))
            yp = y.copy()
            ym = y.copy()
            yp[j] += h
            ym[j] -= h
            J[:, j] = (f(t, yp) - f(t, ym)) / (2.0 * h)
        return J

    def _var_rhs(self, t, z):
        n = self.n
        y = z[:n]
        Y = z[n:].reshape(n, n)
        A = self.system.A_point(t)
        J = self.jacobian_point(t, y)
        dy = self.system.rhs_point(t, y)
        return np.concatenate([dy, ((A + J) @ Y).ravel()])

    def variational_on(self, tau, eta, times):
        """(y, dy/deta) at ``times`` for the solution through ``(tau, eta)``."""
        n = self.n
        eta = np.asarray(eta, dtype=float).reshape(n)
        z0 = np.concatenate([eta, np.eye(n).ravel()])
        out = self._solve(z0, float(tau), times, rhs=self._var_rhs)
        return out[:, :n], out[:, n:].reshape(-1, n, n)

    def solve_variational(self, tau, eta, s):
        """dy/deta (s, tau, eta)."""
        self._check_time(tau, s)
        return self.variational_on(tau, eta, [s])[1][0]

    # ------------------------------------------------------------ grids
    def _step_propagators(self, starts, h):
        """Phi(start + h, start) for every start, in one batched integration.

        ``h`` is a scalar or one (possibly negative) step per start.
        """
        n = self.n
        starts = np.asarray(starts, dtype=float)
        k = len(starts)
        if k == 0:
            return np.zeros((0, n, n))
        hs = np.broadcast_to(np.asarray(h, dtype=float), (k,))

        # rescaled time sigma in [0, 1]: X' = h A(start + sigma h) X
        def rhs(sig, x):
            X = x.reshape(k, n, n)
            A = self.system.A_at(starts + sig * hs) * hs[:, None, None]
            return (A @ X).ravel()

        x0 = np.broadcast_to(self._I, (k, n, n)).ravel()
        sol = solve_ivp(rhs, (0.0, 1.0), x0, method="DOP853",
                        rtol=min(self.rtol, 1e-12), atol=min(self.atol, 1e-14))
        if not sol.success:
            raise IntegrationError(sol.message)
        return np.ascontiguousarray(sol.y[:, -1].reshape(k, n, n))

    def local_duhamel(self, starts, h, y0, Y0=None):
        """Exact interval integrals along the perturbed flow, all intervals at once.

        For each start ``s_i`` the trajectory ``y`` leaves ``y0[i]`` and
        ``c_i = int_{s_i}^{s_i+h} Phi(s_i+h, r) f(r, y(r)) dr`` is returned,
        shape (k, n).  With ``Y0`` (k, n, n) given, ``Y`` follows the
        variational equation and the integrand becomes ``d_2f(r, y) Y``; the
        result then has shape (k, n, n).
        """
        n = self.n
        starts = np.asarray(starts, dtype=float)
        k = len(starts)
        y0 = np.asarray(y0, dtype=float).reshape(k, n)
        hs = np.broadcast_to(np.asarray(h, dtype=float), (k,))
        mat = Y0 is not None
        width = n + 2 * n * n if mat else 2 * n

        def rhs(sig, u):
            U = u.reshape(k, width)
            s = starts + sig * hs
            A = self.system.A_at(s)
            y = U[:, :n]
            fy = np.asarray(self.system.f_at(s, y.T), dtype=float).T
            dy = (A @ y[:, :, None])[:, :, 0] + fy
            if not mat:
                c = U[:, n:]
                dc = (A @ c[:, :, None])[:, :, 0] + fy
                out = np.concatenate([dy, dc], axis=1)
            else:
                Y = U[:, n:n + n * n].reshape(k, n, n)
                C = U[:, n + n * n:].reshape(k, n, n)
                J = self.jacobian_f(s, y.T)
                JY = J @ Y
                out = np.concatenate([dy, ((A @ Y) + JY).reshape(k, -1),
                                      ((A @ C) + JY).reshape(k, -1)], axis=1)
            return (out * hs[:, None]).ravel()

        parts = [y0]
        if mat:
            parts += [np.asarray(Y0, dtype=float).reshape(k, n * n), np.zeros((k, n * n))]
        else:
            parts.append(np.zeros((k, n)))
        u0 = np.concatenate(parts, axis=1).ravel()
        sol = solve_ivp(rhs, (0.0, 1.0), u0, method="DOP853",
                        rtol=min(self.rtol, 1e-12), atol=min(self.atol, 1e-14))
        if not sol.success:
            raise IntegrationError(sol.message)
        U = sol.y[:, -1].reshape(k, width)
        return U[:, n + n * n:].reshape(k, n, n) if mat else U[:, n:]

    def grid(self, h, T, rule="cubic"):
        """Grid operators on ``[0, N*h]`` with ``N = ceil(T/h)``."""
        N = max(int(np.ceil(T / h - 1e-9)), 3)
        key = (float(h), N, rule)
        if key in self._grids:
            return self._grids[key]
        times = np.arange(N + 1) * h
        F = self._step_propagators(times[:-1], h)
        B = self._step_propagators(times[1:], -h)
        n = self.n
        phi0 = np.empty((N + 1, n, n))
        inv0 = np.empty((N + 1, n, n))   # Phi(0, t_i)
        phi0[0] = inv0[0] = self._I
        for i in range(N):
            phi0[i + 1] = F[i] @ phi0[i]
            inv0[i + 1] = inv0[i] @ B[i]
        big = max(np.max(np.abs(phi0)), np.max(np.abs(inv0)))
        if big > OVERFLOW_LIMIT:
            warnings.warn(f"grid transition matrices reach {big:.3g} on [0, {times[-1]}]",
                          GrowthWarning, stacklevel=2)
        P = transport_projector(self.system.P0, phi0, inv0)
        Q = self._I - P

        idx = np.empty((N, 4), dtype=np.int64)
        w = np.empty((N, 4))
        if rule == "cubic":
            i = np.arange(N)
            idx[:] = i[:, None] + np.arange(-1, 3)[None, :]
            w[:] = _CUBIC_INTERIOR
            idx[0] = [0, 1, 2, 3]
            w[0] = _CUBIC_FIRST
            idx[-1] = [N - 3, N - 2, N - 1, N]
            w[-1] = _CUBIC_LAST
        elif rule == "trapezoid":
            i = np.arange(N)
            idx[:] = np.stack([i, i + 1, i, i], axis=1)
            w[:] = [0.5, 0.5, 0.0, 0.0]
        else:
            raise ValueError(f"unknown quadrature rule {rule!r}")

        def chain(a, j):
            # Phi(t_a, t_j) from step propagators, a and j within 3 nodes
            M = self._I.copy()
            if j <= a:
                for r in range(j, a):
                    M = F[r] @ M
            else:
                for r in range(a, j):
                    M = M @ B[r]
            return M

        WP = np.empty((N, 4, n, n))
        WQ = np.empty((N, 4, n, n))
        for i in range(N):
            for k in range(4):
                j = idx[i, k]
                WP[i, k] = h * w[i, k] * chain(i + 1, j) @ P[j]
                WQ[i, k] = h * w[i, k] * chain(i, j) @ Q[j]
        ops = GridOperators(times, h, F, B, phi0, np.ascontiguousarray(P),
                            np.ascontiguousarray(Q), idx, WP, WQ)
        self._grids[key] = ops
        return ops
