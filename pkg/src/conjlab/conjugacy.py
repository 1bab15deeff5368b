"""The conjugacy maps between the linear and the perturbed system.

``H(t, xi) = xi + z(t; (t, xi))`` where ``z`` is the fixed point of the
contraction ``Gamma``, and ``G(t, eta) = eta + w(t; (t, eta))`` where ``w`` is
an explicit Green integral along the perturbed trajectory.  All integrals
run over a uniform node grid on ``[0, T]``; ``T`` is chosen so that the
neglected tail is below ``tail_tol``.

Values at off-grid times are not interpolated.  The node path is carried
from the nearest node to the query time by integrating the ODE the path
satisfies between nodes, which keeps full ODE accuracy.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .conditions import DivergentTailError, check_theorem1
from .flow import FlowEngine, IntegrationError

DEFAULTS = {"step": 0.01, "tol_ode": 1e-10, "tol_fixedpoint": 1e-10, "tail_tol": 1e-9}
MAX_ITER = 200
CACHE_SIZE = 256


class HypothesisError(ValueError):
    """The constants bundle does not satisfy the contraction hypotheses."""


class ConvergenceError(RuntimeError):
    pass


class WeightedPath:
    """Node samples of a path with the norm ``max_i e^{-b t_i} |v_i|``."""

    def __init__(self, times, values, b):
        self.times = np.asarray(times, dtype=float)
        self.values = np.asarray(values, dtype=float)
        self.b = float(b)
        if self.values.shape[0] != self.times.shape[0]:
            raise ValueError("one value per node is required")

    def norm(self, upto=None) -> float:
        v = self.values.reshape(len(self.times), -1)
        w = np.exp(-self.b * self.times) * np.linalg.norm(v, axis=1)
        if upto is not None:
            w = w[self.times <= upto + 1e-12]
        return float(np.max(w)) if w.size else 0.0

    def __sub__(self, other):
        return WeightedPath(self.times, self.values - other.values, self.b)

    def __call__(self, t):
        """Linear interpolation between nodes."""
        if not self.times[0] <= t <= self.times[-1]:
            raise ValueError(f"time {t} outside [{self.times[0]}, {self.times[-1]}]")
        v = self.values.reshape(len(self.times), -1)
        out = np.array([np.interp(t, self.times, v[:, j]) for j in range(v.shape[1])])
        return out.reshape(self.values.shape[1:])


@dataclass
class PicardInfo:
    iterations: int = 0
    increments: list = field(default_factory=list)
    converged: bool = False
    correction_passes: int = 0

    @property
    def ratios(self):
        d = self.increments
        return [d[i + 1] / d[i] for i in range(len(d) - 1) if d[i] > 0]


class _LRU(OrderedDict):
    def get_or(self, key, build):
        if key in self:
            self.move_to_end(key)
            return self[key]
        val = build()
        self[key] = val
        if len(self) > CACHE_SIZE:
            self.popitem(last=False)
        return val


def tail_horizon(bundle, t_max, tail_tol):
    """Truncation time beyond which the Green integrals contribute < ``tail_tol``."""
    rate = bundle.alpha - bundle.mu - bundle.delta
    if rate <= 0:
        raise DivergentTailError(f"alpha - mu - delta = {rate:g} <= 0: the tail diverges")
    extra = math.log(bundle.K * bundle.M / (rate * tail_tol)) / rate if bundle.M > 0 else 0.0
    return t_max + max(extra, 1.0)


class ConjugacyEngine:
    """Builds ``H``, ``G`` and the Jacobian of ``G`` for one system and bundle.

    ``t_max`` bounds the query times (default: the system horizon).  The
    internal grid extends further, to the tail horizon.
    """

    def __init__(self, engine, bundle, *, t_max=None, step=None, tail_tol=None,
                 tol=None, rule="cubic", max_iter=MAX_ITER):
        if not isinstance(engine, FlowEngine):
            engine = FlowEngine(engine)
        system = engine.system
        num = {**DEFAULTS, **system.numerics}
        self.bundle = bundle
        self.report = check_theorem1(bundle)
        if not self.report.overall["theorem1"]:
            raise HypothesisError("contraction hypotheses fail: " + ", ".join(self.report.failing()))
        self.q = self.report.q
        self.step = float(step if step is not None else num["step"])
        self.tail_tol = float(tail_tol if tail_tol is not None else num["tail_tol"])
        self.tol = float(tol if tol is not None else num["tol_fixedpoint"])
        self.t_max = float(system.horizon if t_max is None else t_max)
        self.max_iter = max_iter
        self.T = tail_horizon(bundle, self.t_max, self.tail_tol)
        self.flow = engine.extended(self.T)
        self.system = system
        self.n = system.dim
        self.ops = self.flow.grid(self.step, self.T, rule=rule)
        self.times = self.ops.times
        self._z = _LRU()
        self._w = _LRU()
        self._lam = _LRU()
        self._zero = system.is_linear

    # ------------------------------------------------------------ helpers
    def _check(self, t):
        if not 0.0 <= t <= self.t_max * (1 + 1e-12):
            raise ValueError(f"query time {t} outside [0, {self.t_max}]")

    @staticmethod
    def _key(tau, point):
        return float(tau), np.asarray(point, dtype=float).tobytes()

    def _f_nodes(self, Y):
        return np.asarray(self.system.f_at(self.times, Y.T), dtype=float).T

    def _hop(self, rhs, z0, t0, t1):
        if t0 == t1:
            return np.array(z0, dtype=float)
        sol = solve_ivp(rhs, (t0, t1), z0, method="DOP853",
                        rtol=self.flow.rtol, atol=self.flow.atol)
        if not sol.success:
            raise IntegrationError(sol.message)
        return sol.y[:, -1]

    def _path(self, values):
        return WeightedPath(self.times, values, self.bundle.b)

    # ------------------------------------------------------------ paths
    def linear_path(self, tau, xi):
        """``x(t_i, tau, xi) = Phi(t_i, tau) xi`` at every node."""
        xi = np.asarray(xi, dtype=float).reshape(self.n)
        k = self.ops.node(tau)
        tk = self.times[k]
        xk = xi if tk == tau else self.flow.propagate_matrix(xi[:, None], tau, tk)[:, 0]
        return self.ops.propagate(k, xk)

    def nonlinear_path(self, tau, eta):
        """``y(t_i, tau, eta)`` at every node."""
        return self.flow.trajectory_on(tau, eta, self.times)

    def apply_gamma(self, anchor, phi):
        tau, xi = anchor
        x = self.linear_path(tau, xi)
        return self._path(self.ops.apply_green(self._f_nodes(x + phi.values)))

    def _picard(self, x, phi, info, extra=None):
        """Iterate ``Gamma`` (plus frozen interval corrections) until the increment is small."""
        stop = self.tol * (1.0 - self.q)
        count = 0
        while count < self.max_iter:
            g = self._f_nodes(x + phi.values)[:, :, None]
            cf, cb = self.ops.contributions(g)
            if extra is not None:
                cf = cf + extra[0]
                cb = cb + extra[1]
            nxt = self._path(self.ops.sweep(cf, cb)[:, :, 0])
            count += 1
            inc = (nxt - phi).norm()
            if info is not None:
                info.iterations += 1
                info.increments.append(inc)
            phi = nxt
            # Gamma does not depend on phi when L_f = 0: one step is exact
            if inc <= stop or self.bundle.L_f == 0:
                return phi
        raise ConvergenceError(f"no convergence in {self.max_iter} Picard iterations "
                               f"(last increment {inc:.3g})")

    def _corrections(self, x, phi, rows):
        """Exact-minus-stencil contributions on the intervals ``rows``."""
        N = self.ops.N
        Y = x + phi.values
        g = self._f_nodes(Y)[:, :, None]
        st_f, st_b = self.ops.contributions(g)
        c = self.flow.local_duhamel(self.times[:-1][rows], self.step, Y[:-1][rows])
        ex_f, ex_b = self.ops.exact_contributions(c[:, :, None], rows)
        Ef = np.zeros((N, self.n, 1))
        Eb = np.zeros((N, self.n, 1))
        Ef[rows] = ex_f - st_f[rows]
        Eb[rows] = ex_b - st_b[rows]
        return Ef, Eb

    def fixed_point_z(self, anchor, return_info=False):
        """Picard iteration of ``Gamma`` from the zero path.

        The iteration runs first with the node stencil.  The result is then
        polished: on every interval the stencil integral is compared with the
        exact integral along the local perturbed flow, and the difference is
        added back as a frozen correction until the path stops moving.  This
        matters where ``f`` oscillates faster than the grid resolves.
        """
        tau, xi = anchor
        self._check(tau)

        def build():
            info = PicardInfo()
            phi = self._path(np.zeros((len(self.times), self.n)))
            if self._zero:
                info.converged = True
                return phi, info
            x = self.linear_path(tau, xi)
            phi = self._picard(x, phi, info)
            stop = self.tol * (1.0 - self.q)
            rows = np.arange(self.ops.N)
            for _ in range(self.max_iter):
                Ef, Eb = self._corrections(x, phi, rows)
                info.correction_passes += 1
                nxt = self._picard(x, phi, None, (Ef, Eb))
                moved = (nxt - phi).norm()
                phi = nxt
                if moved <= stop:
                    break
                big = np.max(np.abs(Ef[rows]) + np.abs(Eb[rows]), axis=(1, 2)) > 1e-14
                rows = rows[big] if big.any() else rows[:1]
            else:
                raise ConvergenceError("interval corrections did not settle")
            info.converged = True
            return phi, info

        path, info = self._z.get_or(self._key(tau, xi), build)
        return (path, info) if return_info else path

    def compute_w(self, anchor):
        """``w(t; (tau, eta)) = -int G(t,s) f(s, y(s,tau,eta)) ds`` at every node.

        Interval integrals are exact along the local perturbed flow.
        """
        tau, eta = anchor
        self._check(tau)

        def build():
            if self._zero:
                return self._path(np.zeros((len(self.times), self.n)))
            y = self.nonlinear_path(tau, eta)
            c = self.flow.local_duhamel(self.times[:-1], self.step, y[:-1])
            cf, cb = self.ops.exact_contributions(c[:, :, None])
            return self._path(-self.ops.sweep(cf, cb)[:, :, 0])

        return self._w.get_or(self._key(tau, eta), build)

    # ------------------------------------------------------------ pointwise values
    def z_at(self, anchor, t):
        """``z(t; anchor)``: nearest node value carried along ``(x, z)`` to ``t``."""
        self._check(t)
        tau, xi = anchor
        path = self.fixed_point_z(anchor)
        k = self.ops.node(t)
        tk = self.times[k]
        zk = path.values[k]
        if tk == t or self._zero:
            return zk.copy()
        n = self.n
        xk = self.linear_path(tau, xi)[k]

        def rhs(s, u):
            A = self.system.A_point(s)
            x, z = u[:n], u[n:]
            return np.concatenate([A @ x, A @ z + self.system.f_point(s, x + z)])

        return self._hop(rhs, np.concatenate([xk, zk]), tk, t)[n:]

    def w_at(self, anchor, t):
        """``w(t; anchor)``: nearest node value carried along ``(y, w)`` to ``t``."""
        self._check(t)
        tau, eta = anchor
        path = self.compute_w(anchor)
        k = self.ops.node(t)
        tk = self.times[k]
        wk = path.values[k]
        if tk == t or self._zero:
            return wk.copy()
        n = self.n
        yk = self.nonlinear_path(tau, eta)[k]

        def rhs(s, u):
            A = self.system.A_point(s)
            y, w = u[:n], u[n:]
            fy = self.system.f_point(s, y)
            return np.concatenate([A @ y + fy, A @ w - fy])

        return self._hop(rhs, np.concatenate([yk, wk]), tk, t)[n:]

    def map_H(self, t, xi):
        xi = np.asarray(xi, dtype=float).reshape(self.n)
        return xi + self.z_at((t, xi), t)

    def map_G(self, t, eta):
        eta = np.asarray(eta, dtype=float).reshape(self.n)
        return eta + self.w_at((t, eta), t)

    def map_G_alt(self, s, eta):
        """``G(s, eta)`` through time 0: ``Phi(s,0) [y(0,s,eta) + w(0; (s,eta))]``."""
        eta = np.asarray(eta, dtype=float).reshape(self.n)
        self._check(s)
        if self._zero:
            y0 = self.flow.propagate_matrix(eta[:, None], s, 0.0)[:, 0]
            return self.flow.propagate_matrix(y0[:, None], 0.0, s)[:, 0]
        y0 = self.flow.solve_nonlinear(s, eta, 0.0)
        w0 = self.compute_w((s, eta)).values[0]
        return self.flow.propagate_matrix((y0 + w0)[:, None], 0.0, s)[:, 0]

    # ------------------------------------------------------------ derivative
    def _lambda_path(self, t, eta):
        def build():
            n = self.n
            if self._zero:
                return None, None, np.zeros((len(self.times), n, n))
            y, Y = self.flow.variational_on(t, eta, self.times)
            c = self.flow.local_duhamel(self.times[:-1], self.step, y[:-1], Y[:-1])
            cf, cb = self.ops.exact_contributions(c)
            return y, Y, self.ops.sweep(cf, cb)

        return self._lam.get_or(self._key(t, eta), build)

    def jacobian_G(self, t, eta):
        """``(I - Lambda(t, eta), ||Lambda(t, eta)||_2)`` with ``dG/deta = I - Lambda``."""
        self._check(t)
        eta = np.asarray(eta, dtype=float).reshape(self.n)
        n = self.n
        I = np.eye(n)
        y, Y, L = self._lambda_path(t, eta)
        k = self.ops.node(t)
        tk = self.times[k]
        if tk == t or self._zero:
            lam = L[k].copy()
        else:
            def rhs(s, u):
                A = self.system.A_point(s)
                yy = u[:n]
                YY = u[n:n + n * n].reshape(n, n)
                LL = u[n + n * n:].reshape(n, n)
                J = self.flow.jacobian_point(s, yy)
                return np.concatenate([self.system.rhs_point(s, yy),
                                       ((A + J) @ YY).ravel(), (A @ LL + J @ YY).ravel()])

            u0 = np.concatenate([y[k], Y[k].ravel(), L[k].ravel()])
            lam = self._hop(rhs, u0, tk, t)[n + n * n:].reshape(n, n)
        return I - lam, float(np.linalg.norm(lam, 2))
