"""Self-similar profile F and the semilinear heat equation V_t = V''/2 - V^2/2.

F solves ``F'' + x F' + F (2 - F) = 0`` with F' (0) = 0 and a tail
``c1 |x| exp(-x^2/2)``.  Writing ``F = exp(-x^2/2) u`` turns the tail into
the linear growth ``u ~ c1 x``, so the problem is posed for u on [0, L] with
a Robin condition ``u'(L) = u(L)/L`` and solved by Chebyshev collocation.

Point-mass solutions V are computed on a mesh that coarsens with sqrt(t), so
that very small start times (and hence very large masses) cost only a
logarithmic number of stages.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dct
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline, RegularGridInterpolator

from ._kernels import heat_riccati_steps

INF = math.inf


# ----------------------------------------------------------------------------
# Profile F
# ----------------------------------------------------------------------------

def _cheb_matrix(N: int):
    x = np.cos(np.pi * np.arange(N + 1) / N)
    c = np.hstack([2.0, np.ones(N - 1), 2.0]) * (-1.0) ** np.arange(N + 1)
    dX = x[:, None] - x[None, :]
    D = np.outer(c, 1.0 / c) / (dX + np.eye(N + 1))
    D -= np.diag(D.sum(axis=1))
    return D, x


def _lobatto_to_cheb(values: np.ndarray) -> np.ndarray:
    N = values.size - 1
    a = dct(values, type=1) / N
    a[0] /= 2.0
    a[-1] /= 2.0
    return a


class ConvergenceError(RuntimeError):
    """Newton iteration failed; ``trace`` lists (iteration, residual, damping)."""

    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


@dataclass(frozen=True)
class ProfileF:
    """Tabulated F on a uniform symmetric grid, with the tail constant c1."""

    grid: np.ndarray
    values: np.ndarray
    c1: float
    residual_norm: float
    L: float
    _u: np.polynomial.Chebyshev = field(repr=False, compare=False, default=None)

    def u(self, x):
        """Gaussian-stripped profile exp(x^2/2) F(x)."""
        x = np.abs(np.asarray(x, dtype=float))
        out = np.empty_like(x)
        inside = x <= self.L
        out[inside] = self._u(x[inside])
        out[~inside] = self.c1 * x[~inside]
        return out

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return self.u(x) * np.exp(-0.5 * x * x)

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        ax = np.abs(x)
        du = np.where(ax <= self.L, self._u.deriv()(np.minimum(ax, self.L)), self.c1)
        return np.sign(x) * (du - ax * self.u(ax)) * np.exp(-0.5 * x * x)

    def residual(self, x):
        """F'' + x F' + F(2 - F) evaluated from the spectral representation."""
        x = np.abs(np.asarray(x, dtype=float))
        u = self._u(x)
        du = self._u.deriv()(x)
        d2u = self._u.deriv(2)(x)
        E = np.exp(-0.5 * x * x)
        return E * (d2u - x * du + u - E * u * u)

    @property
    def F0(self) -> float:
        return float(self._u(0.0))

    def mass(self) -> float:
        """Integral of F over the real line."""
        z, w = np.polynomial.legendre.leggauss(200)
        x = 0.5 * self.L * (z + 1)
        inner = 0.5 * self.L * np.sum(w * self(x))
        # tail: c1 * x * exp(-x^2/2) integrates to c1 * exp(-L^2/2)
        return 2.0 * (inner + self.c1 * math.exp(-0.5 * self.L ** 2))

    def to_csv(self, path) -> None:
        res = self.residual(self.grid)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "F", "residual"])
            for row in zip(self.grid, self.values, res):
                w.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path, c1: float | None = None) -> "ProfileF":
        data = np.loadtxt(path, delimiter=",", skiprows=1)
        x, F, res = data[:, 0], data[:, 1], data[:, 2]
        L = float(x[-1])
        pos = x >= 0
        xp = x[pos]
        up = F[pos] * np.exp(0.5 * xp * xp)
        cheb = np.polynomial.Chebyshev.fit(xp, up, deg=min(120, xp.size - 1), domain=[0.0, L])
        if c1 is None:
            c1 = float(up[-1] / L)
        return cls(x, F, c1, float(np.max(np.abs(res[1:-1]))), L, cheb)


def solve_F(L: float = 10.0, n: int = 2049, cheb_order: int | None = None,
            tol: float = 1e-12, max_iter: int = 60) -> ProfileF:
    """Solve the profile equation by Chebyshev collocation and Newton iteration."""
    if L < 6:
        raise ValueError("L must be at least 6")
    if n < 512:
        raise ValueError("n must be at least 512")
    N = cheb_order or max(64, int(math.ceil(12 * L)))
    D, s = _cheb_matrix(N)
    x = (s + 1.0) * L / 2.0          # x[0] = L, x[N] = 0
    D = D * 2.0 / L
    D2 = D @ D
    E = np.exp(-0.5 * x * x)
    u = 1.3 + 1.1 * x
    trace = []
    for it in range(max_iter):
        R = D2 @ u - x * (D @ u) + u - E * u * u
        J = D2 - x[:, None] * D + np.diag(1.0 - 2.0 * E * u)
        R[0] = D[0] @ u - u[0] / L
        J[0] = D[0]
        J[0, 0] -= 1.0 / L
        R[N] = D[N] @ u
        J[N] = D[N]
        step = np.linalg.solve(J, -R)
        damp = 1.0
        while np.any(u + damp * step <= 0.0):
            damp *= 0.5
            if damp < 1e-6:
                raise ConvergenceError("Newton step cannot keep F positive", trace)
        u = u + damp * step
        trace.append((it, float(np.max(np.abs(R))), damp))
        if np.max(np.abs(step)) < tol:
            break
    else:
        raise ConvergenceError("Newton iteration did not converge", trace)

    cheb = np.polynomial.Chebyshev(_lobatto_to_cheb(u), domain=[0.0, L])
    grid = np.linspace(-L, L, n)
    c1 = float(u[0] / L)
    prof = ProfileF(grid, np.zeros(n), c1, 0.0, float(L), cheb)
    values = prof(grid)
    res = np.max(np.abs(prof.residual(grid[1:-1])))
    if np.any(values <= 0):
        raise ConvergenceError("profile is not positive", trace)
    return ProfileF(grid, values, c1, float(res), float(L), cheb)


def shoot_F0(bracket=(1.0, 1.6), x_max: float = 7.0, tol: float = 1e-11) -> float:
    """Independent value of F(0): bisect the initial value of an outward shooting.

    Too small a start makes F cross zero; too large makes F turn upward
    before reaching x_max.
    """
    def classify(a):
        def rhs(x, y):
            return [y[1], -x * y[1] - y[0] * (2.0 - y[0])]

        def hit_zero(x, y):
            return y[0]
        hit_zero.terminal = True
        hit_zero.direction = -1

        def turn_up(x, y):
            return y[1]
        turn_up.terminal = True
        turn_up.direction = 1
        sol = solve_ivp(rhs, (0.0, x_max), [a, 0.0], method="DOP853", rtol=1e-13, atol=1e-15,
                        events=(hit_zero, turn_up))
        if sol.t_events[0].size:
            return -1
        if sol.t_events[1].size:
            return 1
        # undecided at x_max: use the sign of the linear tail mismatch
        xf, F, dF = sol.t[-1], sol.y[0, -1], sol.y[1, -1]
        return 1 if dF > F * (1.0 / xf - xf) else -1

    lo, hi = bracket
    if classify(lo) != -1 or classify(hi) != 1:
        raise ValueError("bracket does not straddle the decaying solution")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if classify(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ----------------------------------------------------------------------------
# Point-mass solutions of the semilinear heat equation
# ----------------------------------------------------------------------------

def default_t0(lam: float) -> float:
    """Start time for Gaussian-smoothed point masses."""
    if math.isinf(lam):
        return 1e-10
    return min(1e-10, (1e5 * lam) ** -2)


class CFLError(ValueError):
    pass


class BlowUpError(RuntimeError):
    pass


@dataclass
class _Patch:
    """Field on nodes x_j = (k0 + j) * dx."""

    k0: int
    dx: float
    V: np.ndarray
    W: np.ndarray

    @property
    def x(self) -> np.ndarray:
        return (self.k0 + np.arange(self.V.size)) * self.dx


class _ScaledSolver:
    """Evolves V (and optionally dV/dmass) on a mesh with dx ~ sqrt(t)/kappa.

    The mesh spacing doubles whenever sqrt(t) doubles; nodes of the coarse
    mesh are a subset of the fine one, so coarsening is exact decimation.
    """

    def __init__(self, sources, t0: float, kappa: int = 16, width: float = 9.0,
                 dt_factor: float = 1.0 / 3.0, tangent: bool = False, profile=None):
        if dt_factor > 1.0:
            raise CFLError("dt must not exceed dx^2 for the explicit diffusion step")
        self.sources = [(float(x), float(m)) for x, m in sources]
        self.kappa = int(kappa)
        self.width = float(width)
        self.dt_factor = float(dt_factor)
        self.tangent = tangent
        self.t = float(t0)
        dx = math.sqrt(t0) / kappa
        xs = [x for x, _ in self.sources]
        span_lo = min(xs) - 2.0 * width * math.sqrt(t0)
        span_hi = max(xs) + 2.0 * width * math.sqrt(t0)
        k0 = int(math.floor(span_lo / dx)) - 1
        k1 = int(math.ceil(span_hi / dx)) + 1
        x = (k0 + np.arange(k1 - k0 + 1)) * dx
        V = np.zeros_like(x)
        W = np.zeros_like(x)
        for xi, m in self.sources:
            if math.isinf(m):
                if profile is None:
                    raise ValueError("infinite mass needs a profile")
                V += profile((x - xi) / math.sqrt(t0)) / t0
            else:
                g = np.exp(-0.5 * (x - xi) ** 2 / t0) / math.sqrt(2 * math.pi * t0)
                V += m * g
                W += g
        V[0] = V[-1] = 0.0
        W[0] = W[-1] = 0.0
        self.patch = _Patch(k0, dx, V, W)
        self.cap = 10.0 * max(np.max(V), 1e-300)

    def _resize(self, t_end: float) -> None:
        p = self.patch
        xs = [x for x, _ in self.sources]
        lo = int(math.floor((min(xs) - self.width * math.sqrt(t_end)) / p.dx)) - 1
        hi = int(math.ceil((max(xs) + self.width * math.sqrt(t_end)) / p.dx)) + 1
        lo = min(lo, p.k0)
        hi = max(hi, p.k0 + p.V.size - 1)
        if lo == p.k0 and hi == p.k0 + p.V.size - 1:
            return
        V = np.zeros(hi - lo + 1)
        W = np.zeros(hi - lo + 1)
        off = p.k0 - lo
        V[off:off + p.V.size] = p.V
        W[off:off + p.V.size] = p.W
        self.patch = _Patch(lo, p.dx, V, W)

    def _coarsen(self) -> None:
        p = self.patch
        start = p.k0 % 2
        self.patch = _Patch((p.k0 + start) // 2, 2.0 * p.dx, p.V[start::2].copy(),
                            p.W[start::2].copy())

    def advance(self, t_target: float) -> None:
        while self.t < t_target * (1 - 1e-14):
            p = self.patch
            t_coarse = (2.0 * self.kappa * p.dx) ** 2
            if self.t >= t_coarse * (1 - 1e-12):
                self._coarsen()
                continue
            t_stop = min(t_target, t_coarse)
            self._resize(t_stop)
            p = self.patch
            dt = self.dt_factor * p.dx ** 2
            nsteps = max(1, int(math.ceil((t_stop - self.t) / dt * (1 - 1e-12))))
            dt = (t_stop - self.t) / nsteps
            heat_riccati_steps(p.V, p.W, dt / (2.0 * p.dx ** 2), dt, nsteps, self.tangent)
            self.t = t_stop
            vmax = np.max(p.V)
            if not math.isfinite(vmax) or vmax > self.cap:
                raise BlowUpError(f"solution exceeded {self.cap:.3e} at t={self.t:.3e}")

    def sample(self, x, which: str = "V") -> np.ndarray:
        p = self.patch
        f = p.V if which == "V" else p.W
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        xs = p.x
        inside = (x >= xs[0]) & (x <= xs[-1])
        out[inside] = CubicSpline(xs, f)(x[inside])
        return out

    def total(self, which: str = "V") -> float:
        p = self.patch
        f = p.V if which == "V" else p.W
        return float(np.sum(f) * p.dx)

    @staticmethod
    def merge(a: "_ScaledSolver", b: "_ScaledSolver") -> "_ScaledSolver":
        pa, pb = a.patch, b.patch
        assert abs(pa.dx - pb.dx) < 1e-15 * pa.dx and abs(a.t - b.t) < 1e-14 * a.t
        lo = min(pa.k0, pb.k0)
        hi = max(pa.k0 + pa.V.size, pb.k0 + pb.V.size)
        V = np.zeros(hi - lo)
        W = np.zeros(hi - lo)
        for p in (pa, pb):
            V[p.k0 - lo:p.k0 - lo + p.V.size] += p.V
            W[p.k0 - lo:p.k0 - lo + p.W.size] += p.W
        a.patch = _Patch(lo, pa.dx, V, W)
        a.sources = a.sources + b.sources
        a.cap = max(a.cap, b.cap)
        return a


@dataclass(frozen=True)
class VSolution:
    """V_t(x) on a (t, x) grid for one or two point sources."""

    lambda_mass: float | tuple
    source_points: tuple
    t_grid: np.ndarray
    x_grid: np.ndarray
    values: np.ndarray
    dmass: np.ndarray | None = None

    def at(self, t_index: int = -1) -> np.ndarray:
        return self.values[t_index]

    def check_bounds(self, tol: float = 1e-6) -> None:
        if np.any(self.values < 0):
            raise AssertionError("V must be nonnegative")
        n_src = len(self.source_points)
        cap = n_src * 2.0 / self.t_grid[:, None] + tol
        if np.any(self.values > cap):
            raise AssertionError("V exceeds the infinite-mass bound 2/t per source")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "V"])
            for i, t in enumerate(self.t_grid):
                for x, v in zip(self.x_grid, self.values[i]):
                    w.writerow([repr(float(t)), repr(float(x)), repr(float(v))])

    @classmethod
    def from_profile(cls, profile: ProfileF, t_grid, x_grid) -> "VSolution":
        """The infinite-mass solution t^{-1} F(x / sqrt(t))."""
        t = np.asarray(t_grid, dtype=float)
        x = np.asarray(x_grid, dtype=float)
        vals = profile(x[None, :] / np.sqrt(t[:, None])) / t[:, None]
        return cls(INF, ((0.0, INF),), t, x, vals)


def _run_sources(sources, t_grid, x_grid, t0, kappa, dt_factor, tangent, profile, width=9.0):
    t_grid = np.atleast_1d(np.asarray(t_grid, dtype=float))
    x_grid = np.atleast_1d(np.asarray(x_grid, dtype=float))
    if np.any(np.diff(t_grid) < 0) or t_grid[0] <= t0:
        raise ValueError("t_grid must be increasing and later than the start time")
    if len(sources) == 2 and abs(sources[0][0] - sources[1][0]) > 0:
        d = abs(sources[0][0] - sources[1][0])
        t_merge = min((d / (2.0 * width)) ** 2, t_grid[0])
        solvers = [_ScaledSolver([s], t0, kappa, width, dt_factor, tangent, profile)
                   for s in sources]
        if t_merge > t0:
            for s in solvers:
                s.advance(t_merge)
        solver = _ScaledSolver.merge(*solvers)
    else:
        mass = sum(m for _, m in sources)
        solver = _ScaledSolver([(sources[0][0], mass)], t0, kappa, width, dt_factor, tangent,
                               profile)
    vals = np.empty((t_grid.size, x_grid.size))
    dvals = np.empty_like(vals) if tangent else None
    for i, t in enumerate(t_grid):
        solver.advance(t)
        vals[i] = solver.sample(x_grid)
        if tangent:
            dvals[i] = solver.sample(x_grid, "W")
    return vals, dvals


def v_point(t_max: float, lam: float, x_grid, t_grid=None, *, t0: float | None = None,
            kappa: int = 16, dt_factor: float = 1.0 / 3.0, tangent: bool = False,
            profile: ProfileF | None = None) -> VSolution:
    """Solution with initial data lam * delta_0; ``lam = inf`` requires ``profile``.

    With ``tangent`` the derivative dV/dlam is returned in ``dmass``.
    """
    if not lam > 0:
        raise ValueError("lambda must be positive")
    t_grid = np.array([t_max]) if t_grid is None else np.asarray(t_grid, dtype=float)
    if t_grid[-1] > t_max * (1 + 1e-12):
        raise ValueError("t_grid exceeds t_max")
    t0 = default_t0(lam) if t0 is None else t0
    vals, dvals = _run_sources([(0.0, lam)], t_grid, x_grid, t0, kappa, dt_factor, tangent,
                               profile)
    return VSolution(lam, ((0.0, lam),), t_grid, np.asarray(x_grid, dtype=float), vals, dvals)


def v_two_point(t_max: float, lam1: float, lam2: float, x1: float, x2: float, x_grid,
                t_grid=None, *, t0: float | None = None, kappa: int = 16,
                dt_factor: float = 1.0 / 3.0, profile: ProfileF | None = None) -> VSolution:
    """Solution with initial data lam1 delta_{x1} + lam2 delta_{x2}.

    By translation and reflection invariance the value at y equals
    V^{lam1,lam2}_t(x1 - y, x2 - y).
    """
    if not (lam1 > 0 and lam2 > 0):
        raise ValueError("masses must be positive")
    x_grid = np.asarray(x_grid, dtype=float)
    t_grid = np.array([t_max]) if t_grid is None else np.asarray(t_grid, dtype=float)
    t0 = default_t0(max(lam1, lam2)) if t0 is None else t0
    if x1 == x2:
        sources = [(x1, lam1 + lam2)]
    else:
        sources = [(x1, lam1), (x2, lam2)]
    vals, _ = _run_sources(sources, t_grid, x_grid, t0, kappa, dt_factor, False, profile)
    return VSolution((lam1, lam2), ((x1, lam1), (x2, lam2)), t_grid, x_grid, vals)


def v_point_value(t: float, lam: float, x, **kw) -> np.ndarray:
    """V^lam_t(x) at the given points."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return v_point(t, lam, x, **kw).values[-1]


# ----------------------------------------------------------------------------
# Similarity-variable ladder: V_1^{exp(s/2)}(y) = t V^1_t(sqrt(t) y), t = e^s
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class VLadder:
    """Tables of V_1^lam(y) for lam = exp(s/2) on a uniform s grid.

    Also provides the unit-mass solution V^1_u(x) = G(log u, x / sqrt(u)) / u.
    """

    s_grid: np.ndarray
    y_grid: np.ndarray
    G: np.ndarray
    dG: np.ndarray | None = None

    @property
    def s_max(self) -> float:
        return float(self.s_grid[-1])

    def _interp(self, s, y, table) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        y = np.asarray(y, dtype=float)
        s, y = np.broadcast_arrays(s, y)
        if np.any(s > self.s_max + 1e-12):
            raise ValueError("V-table range exceeded")
        s_min = self.s_grid[0]
        ds = self.s_grid[1] - self.s_grid[0]
        out = np.zeros(s.shape)
        ya = np.abs(y)
        inside = ya <= self.y_grid[-1]
        below = s < s_min
        # small-mass regime: G ~ exp(s/2) * phi(y)
        m = inside & below
        out[m] = np.exp(0.5 * s[m]) * np.exp(-0.5 * y[m] ** 2) / math.sqrt(2 * math.pi)
        m = inside & ~below
        if np.any(m):
            pos = (s[m] - s_min) / ds
            i = np.minimum(pos.astype(int), self.s_grid.size - 2)
            f = pos - i
            dy = self.y_grid[1] - self.y_grid[0]
            jy = (ya[m] - self.y_grid[0]) / dy
            j = np.minimum(jy.astype(int), self.y_grid.size - 2)
            g = jy - j
            lt = self._log_table(table)

            def col(ii):
                return (1 - g) * lt[ii, j] + g * lt[ii, j + 1]
            out[m] = np.exp((1 - f) * col(i) + f * col(i + 1))
        return out

    def _log_table(self, table):
        key = id(table)
        cache = self.__dict__.setdefault("_logcache", {})
        if key not in cache:
            cache[key] = np.log(np.maximum(table, 1e-300))
        return cache[key]

    def V1(self, lam, y) -> np.ndarray:
        """V_1^lam(y), log-linear in s = 2 log(lam)."""
        return self._interp(2.0 * np.log(lam), y, self.G)

    def G_at(self, s, y) -> np.ndarray:
        return self._interp(s, y, self.G)

    def V_unit(self, u, x) -> np.ndarray:
        """V^1_u(x), the unit-mass solution at time u."""
        u = np.asarray(u, dtype=float)
        return self._interp(np.log(u), np.asarray(x) / np.sqrt(u), self.G) / u


def v_ladder(s_min: float = -12.0, s_max: float = 22.0, ds: float = 0.25, y_max: float = 12.0,
             ny: int = 961, kappa: int = 16, tangent: bool = False) -> VLadder:
    """Build the similarity ladder from a single unit-mass solve up to t = exp(s_max)."""
    s_grid = np.arange(s_min, s_max + 0.5 * ds, ds)
    y = np.linspace(-y_max, y_max, ny)
    solver = _ScaledSolver([(0.0, 1.0)], default_t0(1.0), kappa, 9.0, 1.0 / 3.0, tangent)
    G = np.empty((s_grid.size, ny))
    dG = np.empty_like(G) if tangent else None
    for i, s in enumerate(s_grid):
        t = math.exp(s)
        solver.advance(t)
        G[i] = t * solver.sample(math.sqrt(t) * y)
        if tangent:
            dG[i] = t * solver.sample(math.sqrt(t) * y, "W")
    return VLadder(s_grid, y, G, dG)


def sup_gap(profile: ProfileF, lam: float, t: float = 1.0, x_max: float = 8.0, nx: int = 801,
            **kw) -> float:
    """sup_x (V^inf_t(x) - V^lam_t(x))."""
    x = np.linspace(-x_max, x_max, nx)
    V = v_point_value(t, lam, x, **kw)
    return float(np.max(profile(x / math.sqrt(t)) / t - V))


def fit_rate_exponent(profile: ProfileF, lams=(10, 20, 40, 80), t: float = 1.0, **kw):
    """Least-squares slope of log sup-gap against log lambda."""
    gaps = np.array([sup_gap(profile, lam, t, **kw) for lam in lams])
    slope, _ = np.polyfit(np.log(lams), np.log(gaps), 1)
    return float(slope), gaps


def first_moment_density(lam: float, t: float, x, **kw) -> tuple[np.ndarray, np.ndarray]:
    """(V^lam_t(x), dV^lam_t/dlam (x)) from the tangent solve."""
    sol = v_point(t, lam, np.atleast_1d(np.asarray(x, dtype=float)), tangent=True, **kw)
    return sol.values[-1], sol.dmass[-1]


# ----------------------------------------------------------------------------
# Two-point infinite-mass solution F2
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class F2Table:
    """F2(a, a + d) on a grid of a and separations d >= 0."""

    a_grid: np.ndarray
    d_grid: np.ndarray
    values: np.ndarray
    ladder_lams: tuple
    spread: np.ndarray
    profile: ProfileF = field(repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_interp", RegularGridInterpolator(
            (self.d_grid, self.a_grid), self.values, method="cubic", bounds_error=False,
            fill_value=None))

    def __call__(self, x1, x2) -> np.ndarray:
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        x1, x2 = np.broadcast_arrays(x1, x2)
        # order so that d = x2 - x1 >= 0
        a = np.minimum(x1, x2)
        d = np.abs(x2 - x1)
        out = self.profile(x1) + self.profile(x2)
        amax = self.a_grid[-1]
        inside = (d <= self.d_grid[-1]) & (a >= self.a_grid[0]) & (a <= amax) & (a + d <= amax)
        if np.any(inside):
            out[inside] = self._interp(np.column_stack([d[inside], a[inside]]))
        return out

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"a_grid": self.a_grid.tolist(), "d_grid": self.d_grid.tolist(),
                       "values": self.values.tolist(), "ladder_lams": list(self.ladder_lams),
                       "spread": self.spread.tolist()}, fh)

    @classmethod
    def from_json(cls, path, profile: ProfileF) -> "F2Table":
        with open(path) as fh:
            d = json.load(fh)
        return cls(np.asarray(d["a_grid"]), np.asarray(d["d_grid"]), np.asarray(d["values"]),
                   tuple(d["ladder_lams"]), np.asarray(d["spread"]), profile)


def richardson(values_by_lam, lams, alpha: float):
    """Eliminate a lam^{-alpha} error term; returns (estimate, spread between pairs)."""
    v = [np.asarray(vv, dtype=float) for vv in values_by_lam]
    r = 2.0 ** alpha
    ests = [(r * v[k + 1] - v[k]) / (r - 1.0) for k in range(len(v) - 1)]
    spread = np.abs(ests[-1] - ests[0]) if len(ests) > 1 else np.zeros_like(ests[0])
    return ests[-1], spread


def f2_ladder(x1: float, x2: float, y, lambda0: float, lams=(40.0, 80.0, 160.0), t: float = 1.0,
              **kw):
    """Extrapolated two-point values V^{inf,inf}_t(x1 - y, x2 - y) at points y."""
    for a, b in zip(lams[:-1], lams[1:]):
        if abs(b / a - 2.0) > 1e-12:
            raise ValueError("lambda ladder must double")
    y = np.atleast_1d(np.asarray(y, dtype=float))
    vals = [v_two_point(t, lam, lam, x1, x2, y, **kw).values[-1] for lam in lams]
    est, spread = richardson(vals, lams, 2.0 * lambda0 - 1.0)
    monotone = all(np.all(vals[k + 1] >= vals[k] - 1e-12) for k in range(len(vals) - 1))
    return est, spread, monotone


def f2(x1: float, x2: float, profile: ProfileF, lambda0: float, lams=(40.0, 80.0, 160.0),
       **kw) -> float:
    """F2(x1, x2) from a doubling ladder of two-point solves at t = 1."""
    est, spread, monotone = f2_ladder(x1, x2, [0.0], lambda0, lams, **kw)
    if not monotone:
        raise ArithmeticError("non-monotone lambda ladder in two-point extrapolation")
    return float(est[0])


def f2_direct(x1: float, x2: float, profile: ProfileF, y=(0.0,), **kw) -> np.ndarray:
    """F2 from two infinite-mass sources started at a tiny time (independent route)."""
    return v_two_point(1.0, INF, INF, x1, x2, np.atleast_1d(y), profile=profile, **kw).values[-1]


def build_f2_table(profile: ProfileF, lambda0: float, d_max: float = 8.0, nd: int = 65,
                   a_max: float = 10.0, na: int = 401, lams=(40.0, 80.0, 160.0),
                   kappa: int = 16) -> F2Table:
    """Tabulate F2(a, a + d); one ladder of solves per separation d."""
    d_grid = np.linspace(0.0, d_max, nd)
    a_grid = np.linspace(-a_max, a_max, na)
    values = np.empty((nd, na))
    spread = np.empty((nd, na))
    for i, d in enumerate(d_grid):
        # sources at 0 and d; value at y is F2(-y, d - y), i.e. a = -y
        est, spr, monotone = f2_ladder(0.0, d, -a_grid, lambda0, lams, kappa=kappa)
        if not monotone:
            raise ArithmeticError(f"non-monotone lambda ladder at separation {d}")
        values[i] = est
        spread[i] = spr
    return F2Table(a_grid, d_grid, values, tuple(lams), spread, profile)


# ----------------------------------------------------------------------------
# Path functionals
# ----------------------------------------------------------------------------

def _trapezoid_cumulative(f: np.ndarray, dt: float) -> np.ndarray:
    c = np.zeros(f.shape)
    c[..., 1:] = np.cumsum(0.5 * (f[..., 1:] + f[..., :-1]), axis=-1) * dt
    return c


def z_tail_constant(ladder: VLadder, profile: ProfileF, lambda0: float, s_from: float = 6.0
                    ) -> float:
    """Smallest K with sup_y (F - V_1^{e^{s/2}}) <= K exp(-(lambda0 - 1/2) s) on the table."""
    sel = ladder.s_grid >= s_from
    gap = np.max(profile(ladder.y_grid)[None, :] - ladder.G[sel], axis=1)
    return float(np.max(gap * np.exp((lambda0 - 0.5) * ladder.s_grid[sel])))


def z_tail_bound(T: float, K: float, lambda0: float) -> float:
    """Bound on log Z_inf - log Z_T from the large-lambda convergence rate."""
    return K * math.exp(-(lambda0 - 0.5) * T) / (lambda0 - 0.5)


def z_factor(path, dt: float, profile: ProfileF, ladder: VLadder, cumulative: bool = False):
    """exp of the trapezoidal integral of F(Y_s) - V_1^{exp(s/2)}(Y_s).

    ``path`` may be a single path or an array of paths (last axis is time).
    """
    path = np.asarray(path, dtype=float)
    n = path.shape[-1]
    s = dt * np.arange(n)
    if s[-1] > ladder.s_max + 1e-12:
        raise ValueError("V-table range exceeded")
    g = profile(path) - ladder.G_at(np.broadcast_to(s, path.shape), path)
    g = np.maximum(g, 0.0)  # V^lam <= V^inf; removes interpolation noise
    c = _trapezoid_cumulative(g, dt)
    return np.exp(c) if cumulative else np.exp(c[..., -1])


def w_factor(path, dt: float, z2: float, profile: ProfileF, f2fun, cumulative: bool = False):
    """exp of the trapezoidal integral of F(Y_u) - F2(Y_u, Y_u + e^{u/2}(z2 - Y_0)).

    The partner starts at z2 and separates from the path at rate e^{u/2}.
    """
    path = np.asarray(path, dtype=float)
    n = path.shape[-1]
    u = dt * np.arange(n)
    y0 = path[..., :1]
    other = path + np.exp(0.5 * u) * (z2 - y0)
    g = profile(path) - f2fun(path, other)
    g = np.minimum(g, 0.0)  # F2 >= F by monotonicity
    c = _trapezoid_cumulative(g, dt)
    return np.exp(c) if cumulative else np.exp(c[..., -1])
