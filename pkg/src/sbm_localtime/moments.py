"""Moment formulas and bounds for the boundary local time, with Monte Carlo estimators.

The constant ``C`` enters every formula linearly or quadratically; it is
estimated by nested Monte Carlo (``estimate_C``) and cross-checked by two
deterministic routes (``c_from_tangent``, ``c_from_galerkin``).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate
from scipy.linalg import expm

from . import _kernels
from .nonlinear_pde import F2Table, ProfileF, VLadder, first_moment_density, z_tail_bound
from .sbm_sim import InitialMeasure, stream_seeds
from .spectral_ou import (GaussianMeasureGrid, ImmortalDiffusion, SpectralModel,
                          hermite_basis, survival_probability)

DEFAULT_HORIZON = 20.0


@dataclass
class MomentReport:
    formula_value: float
    mc_estimate: float
    mc_stderr: float
    replicates: int
    operation: str = ""
    label: str = ""

    @property
    def z_score(self) -> float:
        if self.mc_stderr <= 0:
            return math.inf if self.mc_estimate != self.formula_value else 0.0
        return (self.mc_estimate - self.formula_value) / self.mc_stderr

    def to_json_line(self) -> str:
        d = asdict(self)
        d["z_score"] = self.z_score
        return json.dumps(d)

    def append_to(self, path) -> None:
        with open(path, "a") as fh:
            fh.write(self.to_json_line() + "\n")


@dataclass
class ConstantsBundle:
    """C, theta, lambda_0 and a tabulated rho on Gauss nodes, with provenance."""

    C: float
    theta: float
    lambda0: float
    C_stderr: float = 0.0
    rho_nodes: np.ndarray = field(default_factory=lambda: np.zeros(0))
    rho_table: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    rho_stderr: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    C_Z_empirical: float = math.nan
    C_Z_cap: float = math.nan
    z_tail: float = math.nan
    seeds: dict = field(default_factory=dict)
    n_paths: dict = field(default_factory=dict)
    routes: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rho_nodes = np.asarray(self.rho_nodes, dtype=float)
        self.rho_table = np.asarray(self.rho_table, dtype=float)
        self.rho_stderr = np.asarray(self.rho_stderr, dtype=float)
        if not self.C > 0 or not self.theta > 0:
            raise ValueError("C and theta must be positive")
        if not 0.5 < self.lambda0 < 1.0:
            raise ValueError("lambda0 must lie in (1/2, 1)")
        if self.rho_table.size and (np.any(self.rho_table <= 0) or np.any(self.rho_table > 1)):
            raise ValueError("rho values must lie in (0, 1]")

    def rho(self, z1, z2) -> np.ndarray:
        """Bilinear interpolation of the rho table (clamped to the node range)."""
        if not self.rho_table.size:
            raise ValueError("bundle has no rho table")
        from scipy.interpolate import RegularGridInterpolator
        f = RegularGridInterpolator((self.rho_nodes, self.rho_nodes), self.rho_table)
        lo, hi = self.rho_nodes[0], self.rho_nodes[-1]
        z1, z2 = np.broadcast_arrays(np.clip(z1, lo, hi), np.clip(z2, lo, hi))
        return f(np.column_stack([z1.ravel(), z2.ravel()])).reshape(z1.shape)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("rho_nodes", "rho_table", "rho_stderr"):
            d[k] = np.asarray(getattr(self, k)).tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ConstantsBundle":
        return cls(**d)

    def save_json(self, path) -> None:
        tmp = f"{path}.tmp"
        with open(tmp, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
        os.replace(tmp, path)

    @classmethod
    def load_json(cls, path) -> "ConstantsBundle":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# ----------------------------------------------------------------------------
# Tables handed to the compiled path functionals
# ----------------------------------------------------------------------------

class PathFunctionals:
    """Z and W functionals along immortal paths, evaluated in compiled loops."""

    def __init__(self, model: SpectralModel, profile: ProfileF, ladder: VLadder | None = None,
                 f2table: F2Table | None = None, f_max: float = 12.0, nf: int = 4801):
        self.model = model
        self.profile = profile
        self.ladder = ladder
        self.f2table = f2table
        self.diffusion = ImmortalDiffusion(model)
        fx = np.linspace(0.0, f_max, nf)
        self._f = (profile(fx), 0.0, float(fx[1]))
        if ladder is not None:
            keep = ladder.s_grid >= -1e-12
            s = ladder.s_grid[keep]
            if abs(s[0]) > 1e-9:
                raise ValueError("ladder s grid must contain 0")
            g = profile(ladder.y_grid)[None, :] - ladder.G[keep]
            self._z = (np.ascontiguousarray(np.maximum(g, 0.0)), 0.0, float(s[1] - s[0]),
                       float(ladder.y_grid[0]), float(ladder.y_grid[1] - ladder.y_grid[0]))
            self.s_max = float(s[-1])
        if f2table is not None:
            self._w = (np.ascontiguousarray(f2table.values), float(f2table.d_grid[0]),
                       float(f2table.d_grid[1] - f2table.d_grid[0]), float(f2table.a_grid[0]),
                       float(f2table.a_grid[1] - f2table.a_grid[0]))

    def log_z(self, x0s, horizon: float, dt: float, seed: int, every: int | None = None
              ) -> np.ndarray:
        """log Z_T at times 0, every*dt, ... (last column is the horizon)."""
        if self.ladder is None:
            raise ValueError("no V ladder supplied")
        if horizon > self.s_max + 1e-9:
            raise ValueError("horizon exceeds the V ladder")
        n_steps = int(round(horizon / dt))
        every = n_steps if every is None else every
        _kernels.seed_numba(int(seed))
        return _kernels.immortal_log_z(np.ascontiguousarray(x0s, dtype=float), float(dt), n_steps,
                                       *self.diffusion.table_args, *self._z, int(every))

    def log_w(self, x0s, z2s, horizon: float, dt: float, seed: int, cutoff: float = 8.0
              ) -> np.ndarray:
        if self.f2table is None:
            raise ValueError("no F2 table supplied")
        n_steps = int(round(horizon / dt))
        x0s, z2s = np.broadcast_arrays(np.asarray(x0s, dtype=float), np.asarray(z2s, dtype=float))
        _kernels.seed_numba(int(seed))
        return _kernels.immortal_log_w(np.ascontiguousarray(x0s), np.ascontiguousarray(z2s),
                                       float(dt), n_steps, *self.diffusion.table_args,
                                       *self._f, *self._w, float(cutoff))


# ----------------------------------------------------------------------------
# The constant C
# ----------------------------------------------------------------------------

def _outer_grid(dt: float, u_first: float = 1e-7) -> np.ndarray:
    # geometric near 0, where V^1_u is a heat kernel of height u^{-1/2}
    geo = np.geomspace(u_first, dt, 40)
    return np.concatenate([[0.0], geo, np.arange(2 * dt, 1.0 + 0.5 * dt, dt)])


def _outer_paths(ladder: VLadder, n: int, rng: np.random.Generator, dt: float
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Brownian paths on [0, 1]; returns (exp(-int V^1_u(B_u) du), B_1)."""
    u = _outer_grid(dt)
    du = np.diff(u)
    B = np.zeros((n, u.size))
    B[:, 1:] = np.cumsum(rng.standard_normal((n, du.size)) * np.sqrt(du), axis=1)
    V = np.zeros_like(B)
    V[:, 1:] = ladder.V_unit(u[None, 1:], B[:, 1:])
    # first cell: E int_0^{u1} p_u(B_u) du for the heat kernel, in place of V(0, .) = delta
    integral = 2.0 * math.sqrt(u[1]) / math.sqrt(4.0 * math.pi) + np.sum(0.5 * (V[:, 1:-1] + V[:, 2:]) * du[1:], axis=1)
    return np.exp(-integral), B[:, -1]


def estimate_C(profile: ProfileF, model: SpectralModel, v_family: VLadder, n_paths: int = 20000,
               seed: int = 0, horizon: float = DEFAULT_HORIZON, inner_dt: float = 0.01,
               outer_dt: float = 1e-3, batch: int = 2000, functionals: PathFunctionals | None = None
               ) -> tuple[float, float, dict]:
    """Nested Monte Carlo for C; one inner immortal path per outer Brownian path.

    Returns (C, stderr, diagnostics).  The truncation of Z at the horizon
    biases C low by at most the factor exp(z_tail) reported in diagnostics.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    if outer_dt > 1e-3:
        raise ValueError("outer_dt must be at most 1e-3")
    fun = functionals or PathFunctionals(model, profile, v_family)
    seeds = stream_seeds(seed, 2 * ((n_paths + batch - 1) // batch))
    samples = []
    zmax = 0.0
    k = 0
    done = 0
    while done < n_paths:
        m = min(batch, n_paths - done)
        rng = np.random.default_rng(seeds[k])
        killed, b1 = _outer_paths(v_family, m, rng, outer_dt)
        b1 = np.clip(b1, -model.domain_bound, model.domain_bound)
        lz = fun.log_z(b1, horizon, inner_dt, int(seeds[k + 1]))[:, -1]
        zmax = max(zmax, float(np.exp(lz.max())))
        samples.append(killed * np.exp(lz) * model.psi0(b1))
        k += 2
        done += m
    x = np.concatenate(samples)
    C = float(x.mean())
    se = float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else math.inf
    rel_var = float(x.var(ddof=1) / C ** 2) if x.size > 1 else math.inf
    if rel_var > 100:
        raise ArithmeticError(f"inner-expectation variance blow-up (relative variance {rel_var:.1f})")
    from .nonlinear_pde import z_tail_constant
    K = z_tail_constant(v_family, profile, model.lambda0)
    tail = z_tail_bound(horizon, K, model.lambda0)
    return C, se, {"z_max": zmax, "z_tail": tail, "relative_variance": rel_var,
                   "n_paths": int(x.size), "horizon": horizon, "inner_dt": inner_dt}


def z_cap(profile: ProfileF, ladder: VLadder, lambda0: float) -> float:
    """exp of the integral over s of sup_y (F - V_1^{e^{s/2}}), with the rate tail beyond the table."""
    from .nonlinear_pde import z_tail_constant
    keep = ladder.s_grid >= -1e-12
    gap = np.max(np.maximum(profile(ladder.y_grid)[None, :] - ladder.G[keep], 0.0), axis=1)
    s = ladder.s_grid[keep]
    K = z_tail_constant(ladder, profile, lambda0)
    return float(math.exp(integrate.trapezoid(gap, s) + z_tail_bound(s[-1], K, lambda0)))


def c_upper_bound(C_Z: float, model: SpectralModel, order: int = 120) -> float:
    """C_Z * E_0(psi_0(B_1)), since Z <= C_Z and the killing factor is at most 1."""
    quad = GaussianMeasureGrid.from_order(order)
    keep = np.abs(quad.nodes) <= model.domain_bound
    return float(C_Z * np.sum(quad.weights[keep] * model.psi0(quad.nodes[keep])))


def c_from_tangent(lambda0: float, theta: float, ks=range(2, 21, 2), t: float = 1.0,
                   x_max: float = 9.0, nx: int = 3601) -> tuple[float, np.ndarray]:
    """C as the limit of lam^{2 lambda_0} int dV^lam/dlam dx / theta along lam = 2^k.

    Consecutive values (lam ratio r) are Richardson-combined against the
    lam^{-(2 lambda_0 - 1)} error; returns the last combination and the raw ladder.
    """
    x = np.linspace(-x_max, x_max, nx)
    ks = list(ks)
    raw = []
    for k in ks:
        lam = 2.0 ** k
        _, dV = first_moment_density(lam, t, x)
        raw.append(lam ** (2 * lambda0) * integrate.trapezoid(dV, x) / theta)
    raw = np.array(raw)
    r = (2.0 ** (ks[1] - ks[0])) ** (2 * lambda0 - 1)
    est = (r * raw[1:] - raw[:-1]) / (r - 1)
    return float(est[-1]), raw


def _killing_matrix(model: SpectralModel, quad: GaussianMeasureGrid, H: np.ndarray, values):
    return (H * (quad.weights * values)) @ H.T


def zeta_galerkin(model: SpectralModel, ladder: VLadder, horizon: float = DEFAULT_HORIZON,
                  step: float = 0.125) -> np.ndarray:
    """Hermite coefficients of x -> psi_0(x) E^{imm}_x(Z_T), deterministic.

    Solves the backward equation u_s + A u - G(s, .) u = 0, u(T) = psi_0 in
    the basis (exponential midpoint steps) and rescales by exp(lambda_0 T).
    """
    nb = model.basis_size
    quad = model.quadrature()
    H = hermite_basis(quad.nodes, nb)
    D = np.diag(0.5 * np.arange(nb))
    c = model.eigvecs[:, 0].copy()
    n = int(round(horizon / step))
    for k in range(n, 0, -1):
        s_mid = (k - 0.5) * step
        G = ladder.G_at(np.full(quad.nodes.shape, s_mid), quad.nodes)
        M = D + _killing_matrix(model, quad, H, G)
        c = expm(-step * 0.5 * (M + M.T)) @ c
    return c * math.exp(model.lambda0 * horizon)


def c_from_galerkin(model: SpectralModel, ladder: VLadder, horizon: float = DEFAULT_HORIZON,
                    step: float = 0.125) -> float:
    """C = int dV^lam_1/dlam|_{lam=1}(x) psi_0(x) E^{imm}_x(Z_T) dx, with both factors deterministic."""
    if ladder.dG is None:
        raise ValueError("ladder built without the tangent")
    coef = zeta_galerkin(model, ladder, horizon, step)
    i0 = int(np.argmin(np.abs(ladder.s_grid)))
    y = ladder.y_grid
    inside = np.abs(y) <= model.domain_bound
    u = coef @ hermite_basis(y[inside], model.basis_size)
    return float(integrate.trapezoid(ladder.dG[i0, inside] * u, y[inside]))


# ----------------------------------------------------------------------------
# rho
# ----------------------------------------------------------------------------

def rho(z1: float, z2: float, functionals: PathFunctionals, n_paths: int = 4000, seed: int = 0,
        horizon: float = DEFAULT_HORIZON, dt: float = 0.01) -> tuple[float, float]:
    """rho(z1, z2) as a product of two independent Monte Carlo means; returns (value, stderr)."""
    functionals.model.check_domain(z1, z2)
    s1, s2 = stream_seeds(seed, 2)
    a = np.exp(functionals.log_w(np.full(n_paths, z1), z2, horizon, dt,
                                 int(s1)))
    b = np.exp(functionals.log_w(np.full(n_paths, z2), z1, horizon, dt,
                                 int(s2)))
    ma, mb = a.mean(), b.mean()
    sa, sb = a.std(ddof=1) / math.sqrt(n_paths), b.std(ddof=1) / math.sqrt(n_paths)
    return float(ma * mb), float(math.hypot(ma * sb, mb * sa))


def rho_table(nodes, functionals: PathFunctionals, n_paths: int = 2000, seed: int = 0,
              horizon: float = DEFAULT_HORIZON, dt: float = 0.01):
    """rho on a node grid from the matrix E_{z_i}(W(z_j)); returns (table, stderr)."""
    nodes = np.asarray(nodes, dtype=float)
    n = nodes.size
    seeds = stream_seeds(seed, n)
    mean = np.ones((n, n))
    se = np.zeros((n, n))
    for i in range(n):
        x0 = np.repeat(nodes[i], n_paths * n)
        z2 = np.tile(nodes, n_paths)
        w = np.exp(functionals.log_w(x0, z2, horizon, dt, int(seeds[i])))
        w = w.reshape(n_paths, n)
        mean[i] = w.mean(axis=0)
        se[i] = w.std(axis=0, ddof=1) / math.sqrt(n_paths)
    table = mean * mean.T
    err = np.hypot(mean * se.T, mean.T * se)
    return table, err


# ----------------------------------------------------------------------------
# First moments
# ----------------------------------------------------------------------------

def _psi_quadrature(model: SpectralModel, order: int = 120):
    quad = GaussianMeasureGrid.from_order(order)
    keep = np.abs(quad.nodes) <= model.domain_bound
    z = quad.nodes[keep]
    return z, quad.weights[keep] * model.psi0(z)


def canonical_first_moment(phi: Callable, t: float, bundle: ConstantsBundle, model: SpectralModel,
                           order: int = 120) -> float:
    """N_0(L_t(phi)) = C t^{-lambda_0} int phi(sqrt(t) z) psi_0(z) dm(z)."""
    if not t > 0:
        raise ValueError("t must be positive")
    z, w = _psi_quadrature(model, order)
    vals = np.broadcast_to(np.asarray(phi(math.sqrt(t) * z), dtype=float), z.shape)
    return float(bundle.C * t ** (-bundle.lambda0) * np.sum(w * vals))


def px_first_moment(phi: Callable, t: float, X0: InitialMeasure, profile: ProfileF,
                    bundle: ConstantsBundle, model: SpectralModel, order: int = 120) -> float:
    """E_{X_0}(L_t(phi)) for an initial measure given by atoms and/or a gridded density."""
    if not t > 0:
        raise ValueError("t must be positive")
    pts, mass = _measure_points(X0)
    if mass.sum() == 0:
        return 0.0
    z, w = _psi_quadrature(model, order)
    st = math.sqrt(t)
    total = 0.0
    for x0, m0 in zip(pts, mass):
        # inner integral of F(z + (x0 - y0)/sqrt(t)) dX_0(y0), exact over the atoms/cells
        arg = z[:, None] + (x0 - pts[None, :]) / st
        expo = np.exp(-(profile(arg) @ mass) / t)
        vals = np.broadcast_to(np.asarray(phi(x0 + st * z), dtype=float), z.shape)
        total += m0 * np.sum(w * vals * expo)
    return float(bundle.C * t ** (-bundle.lambda0) * total)


def _measure_points(X0: InitialMeasure):
    pts, mass = [], []
    for x, m in X0.atoms:
        pts.append(x)
        mass.append(m)
    if X0.density is not None:
        dx = X0.density_x[1] - X0.density_x[0]
        pts.extend(X0.density_x)
        mass.extend(np.asarray(X0.density) * dx)
    return np.asarray(pts, dtype=float), np.asarray(mass, dtype=float)


# ----------------------------------------------------------------------------
# Second moments
# ----------------------------------------------------------------------------

def second_moment_mass_bound(t: float, bundle: ConstantsBundle) -> float:
    if not t > 0:
        raise ValueError("t must be positive")
    l0 = bundle.lambda0
    return bundle.C ** 2 * bundle.theta ** 2 / (1 - l0) * t ** (1 - 2 * l0)


@dataclass(frozen=True)
class PowerKernel:
    """h(x, y) = |x - y|^{-p}; p = 0 is the constant 1."""

    p: float

    def __call__(self, x, y):
        d = np.abs(np.asarray(y, dtype=float) - np.asarray(x, dtype=float))
        if self.p == 0:
            return np.ones_like(d)
        with np.errstate(divide="ignore"):
            return d ** (-self.p)


def _pair_singular_weight(model: SpectralModel, z, p: float) -> np.ndarray:
    """g(z) = int |z' - z|^{-p} psi_0(z') dm(z') over the resolved domain."""
    if p == 0:
        return np.full(np.shape(z), float(model.eigvecs[0, 0]))
    b = model.domain_bound
    dens = lambda y: float(model.psi0(np.array([y]))[0]) * math.exp(-0.5 * y * y) / math.sqrt(2 * math.pi)
    out = np.empty(len(z))
    for i, zi in enumerate(z):
        left = integrate.quad(dens, -b, zi, weight="alg", wvar=(0.0, -p), limit=200)[0] if zi > -b else 0.0
        right = integrate.quad(dens, zi, b, weight="alg", wvar=(-p, 0.0), limit=200)[0] if zi < b else 0.0
        out[i] = left + right
    return out


class _BoundIntegrand:
    """tau -> exp((2 lambda_0 - 1) tau) * inner(tau), the bound integrand after w = t e^{-tau}."""

    def __init__(self, h, t: float, model: SpectralModel, order: int):
        self.h, self.t, self.model = h, t, model
        z, w = _psi_quadrature(model, order)
        self.z, self.wz = z, w
        self.l0 = model.lambda0
        if isinstance(h, PowerKernel):
            self.kind = "power"
            g = _pair_singular_weight(model, z, h.p)
            self.coef = self.wz * g
            self.modes = model.modes(z)
        else:
            self.kind = "general"
            quad = GaussianMeasureGrid.from_order(order)
            keep = np.abs(quad.nodes) <= model.domain_bound
            self.y, self.wy = quad.nodes[keep], quad.weights[keep]
            self.modes_z = model.modes(z)
            self.modes_y = model.modes(self.y)
            self.gh = GaussianMeasureGrid.from_order(40)

    def inner(self, tau: float) -> float:
        t, l0 = self.t, self.l0
        w = t * math.exp(-tau)
        if self.kind == "power":
            surv = (self.model.eigvecs[0] * np.exp(-self.model.eigenvalues * tau)) @ self.modes
            return float(w ** (-self.h.p / 2) * np.sum(self.coef * surv))
        z, st, sw = self.z, math.sqrt(t), math.sqrt(w)
        dz = z[None, :] - z[:, None]  # [i, j] = z_j - z_i
        if tau >= 0.05:
            decay = np.exp(-self.model.eigenvalues * tau)
            q = (self.modes_z * decay[:, None]).T @ self.modes_y  # q_tau(z_i, y_k)
            y = self.y
            hv = self.h(st * y[None, None, :], st * y[None, None, :] + sw * dz[:, :, None])
            val = np.einsum("ik,ijk,k->ij", q, hv, self.wy)
        else:
            # short times: OU Gaussian kernel with frozen killing
            e = math.exp(-tau / 2)
            sd = math.sqrt(max(1 - e * e, 0.0))
            y = e * z[:, None] + sd * self.gh.nodes[None, :]
            kill = np.exp(-tau * self.model.kill(z))
            hv = self.h(st * y[:, None, :], st * y[:, None, :] + sw * dz[:, :, None])
            val = kill[:, None] * np.einsum("ijk,k->ij", hv, self.gh.weights)
        return float(self.wz @ val @ self.wz)

    def __call__(self, tau: float) -> float:
        return math.exp((2 * self.l0 - 1) * tau) * self.inner(tau)


def second_moment_bound(h, t: float, model: SpectralModel, bundle: ConstantsBundle,
                        order: int = 100, tau_max: float = 400.0, rtol: float = 1e-9
                        ) -> float:
    """Upper bound for N_0((L_t x L_t)(h)), h >= 0.

    The outer w-integral is taken over tau = log(t / w) on [0, tau_max] by
    adaptive quadrature.  ``PowerKernel`` inputs use the reduction of the
    inner expectation to survival probabilities; other h go through the
    killed transition density.
    """
    if not t > 0:
        raise ValueError("t must be positive")
    f = _BoundIntegrand(h, t, model, order)
    val, err = integrate.quad(f, 0.0, tau_max, limit=400, epsrel=rtol, epsabs=0.0)
    if not math.isfinite(val) or err > 1e-4 * abs(val) + 1e-300:
        raise ArithmeticError(f"w-integral did not converge (estimate {val:.4g}, error {err:.2g})")
    return float(bundle.C ** 2 * t ** (1 - 2 * bundle.lambda0) * val)


def w_integrand(h, t: float, w, model: SpectralModel, bundle: ConstantsBundle, order: int = 100
                ) -> np.ndarray:
    """The bound's integrand in w (including C^2 and w^{-2 lambda_0})."""
    f = _BoundIntegrand(h, t, model, order)
    w = np.atleast_1d(np.asarray(w, dtype=float))
    return np.array([bundle.C ** 2 * wi ** (-2 * bundle.lambda0) * f.inner(math.log(t / wi))
                     for wi in w])


def fit_w_exponent(h, t: float, model: SpectralModel, bundle: ConstantsBundle,
                   w=np.geomspace(1e-9, 1e-6, 7)) -> float:
    """Log-log slope of the w-integrand near w = 0."""
    vals = w_integrand(h, t, np.asarray(w) * t, model, bundle)
    return float(np.polyfit(np.log(w), np.log(vals), 1)[0])


def _tail_resolvent(model: SpectralModel, y, shift: float) -> np.ndarray:
    """int_0^inf exp(shift*tau) P_y(killing time > tau) dtau, by the eigenexpansion."""
    if np.any(model.eigenvalues <= shift):
        raise ValueError("tail integral diverges")
    y = np.clip(y, -model.domain_bound, model.domain_bound)
    return (model.eigvecs[0] / (model.eigenvalues - shift)) @ model.modes(np.ravel(y))


def _sample_psi_m(model: SpectralModel, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draws from the density psi_0 dm / theta."""
    b = model.domain_bound
    x = np.linspace(-b, b, 8001)
    dens = model.psi0(x) * np.exp(-0.5 * x * x)
    cdf = integrate.cumulative_trapezoid(dens, x, initial=0.0)
    cdf /= cdf[-1]
    return np.interp(rng.random(n), cdf, x)


def exact_second_moment(h, t: float, model: SpectralModel, bundle: ConstantsBundle,
                        profile: ProfileF, functionals: PathFunctionals, n_paths: int = 10000,
                        seed: int = 0, tau_split: float = DEFAULT_HORIZON, dt: float = 0.01
                        ) -> tuple[float, float]:
    """N_0((L_t x L_t)(h)) for h = PowerKernel(p), by Monte Carlo; returns (value, stderr).

    With r = t - s = t e^{-tau}, the Brownian functional becomes an OU path Y
    from z_1, killed at rate F2(Y, Y + e^{-tau/2}(z_2 - z_1)).  Killing by F is
    absorbed by the ground-state transform, so paths follow the immortal
    process and carry e^{-lambda_0 tau} psi_0(z_1) / psi_0(Y_tau) times the
    excess factor exp(-int (F2 - F)).  Without this, the estimate rests on
    exponentially rare long survivors and is biased low.  (z_1, z_2) are drawn
    from (psi_0 dm / theta)^2, rho by two independent W paths, and beyond
    tau_split the single-point survival resolvent closes the integral.
    """
    if not isinstance(h, PowerKernel):
        raise NotImplementedError("exact_second_moment supports PowerKernel integrands")
    if not t > 0:
        raise ValueError("t must be positive")
    l0, p = bundle.lambda0, h.p
    shift = 2 * l0 - 1 + 0.5 * p
    s = stream_seeds(seed, 4)
    rng = np.random.default_rng(s[0])
    z1 = _sample_psi_m(model, n_paths, rng)
    z2 = _sample_psi_m(model, n_paths, rng)
    wa = np.exp(functionals.log_w(z1, z2, tau_split, dt, int(s[1])))
    wb = np.exp(functionals.log_w(z2, z1, tau_split, dt, int(s[2])))
    diff = functionals.diffusion
    _kernels.seed_numba(int(s[3]))
    n_steps = int(round(tau_split / dt))
    body, wend, yend = _kernels.immortal_pair_killing(
        z1, z2, float(dt), n_steps, float(shift - l0), *diff.table_args, diff.log_psi0,
        *functionals._f, *functionals._w)
    lp = np.interp(np.clip(yend, -diff.bound, diff.bound), diff.grid, diff.log_psi0)
    lp += 2 * l0 * np.log(np.maximum(np.abs(yend), diff.bound) / diff.bound)
    tail = math.exp((shift - l0) * tau_split) * wend * _tail_resolvent(model, yend, shift) * np.exp(-lp)
    with np.errstate(divide="ignore"):
        hz = np.abs(z2 - z1) ** (-p) if p else np.ones_like(z1)
    x = wa * wb * model.psi0(z1) * (body + tail) * hz
    scale = bundle.C ** 2 * bundle.theta ** 2 * t ** (1 - 2 * l0 - 0.5 * p)
    return float(scale * x.mean()), float(scale * x.std(ddof=1) / math.sqrt(x.size))


def exact_pair_density(d: float, t: float, model: SpectralModel, bundle: ConstantsBundle,
                       functionals: PathFunctionals, n_paths: int = 4000, seed: int = 0,
                       tau_step: float = 0.25, dt: float = 0.01) -> tuple[float, float]:
    """Density at separation d > 0 of the pair measure N_0(L_t(dx) L_t(dx + d)) integrated over x.

    The second-moment formula with h a delta at separation d: z_2 = z_1 + d/sqrt(r),
    r = t e^{-tau}, integrated over a tau grid until z_2 leaves the resolved
    domain.  Each node uses n_paths immortal paths; returns (value, stderr).
    """
    if not d > 0 or not t > 0:
        raise ValueError("d and t must be positive")
    l0, b = bundle.lambda0, model.domain_bound
    tau_max = 2.0 * math.log(2.0 * b * math.sqrt(t) / d)
    taus = np.arange(0.0, max(tau_max, tau_step) + 0.5 * tau_step, tau_step)
    diff = functionals.diffusion
    rng = np.random.default_rng(int(stream_seeds(seed, 1)[0]))
    vals, errs = np.zeros(taus.size), np.zeros(taus.size)
    for i, tau in enumerate(taus):
        r = t * math.exp(-tau)
        z1 = _sample_psi_m(model, n_paths, rng)
        z2 = z1 + d / math.sqrt(r)
        inside = np.abs(z2) < b
        if not inside.any():
            continue
        z1, z2 = z1[inside], z2[inside]
        k = stream_seeds(seed, 3, offset=3 * (i + 1))
        wa = np.exp(functionals.log_w(z1, z2, DEFAULT_HORIZON, dt, int(k[0])))
        wb = np.exp(functionals.log_w(z2, z1, DEFAULT_HORIZON, dt, int(k[1])))
        n_steps = int(round(tau / dt))
        _kernels.seed_numba(int(k[2]))
        _, wend, yend = _kernels.immortal_pair_killing(
            z1, z2, float(dt), n_steps, 0.0, *diff.table_args, diff.log_psi0,
            *functionals._f, *functionals._w)
        lp = np.interp(np.clip(yend, -b, b), diff.grid, diff.log_psi0)
        lp += 2 * l0 * np.log(np.maximum(np.abs(yend), b) / b)
        x = np.zeros(n_paths)
        x[inside] = (model.psi0(z1) * model.psi0(z2) * np.exp(-0.5 * z2 * z2 - lp)
                     * wend * wa * wb) / math.sqrt(2 * math.pi)
        c = bundle.C ** 2 * bundle.theta * r ** (0.5 - 2 * l0) * math.exp(-l0 * tau)
        vals[i] = c * x.mean()
        errs[i] = c * x.std(ddof=1) / math.sqrt(n_paths)
    w = np.full(taus.size, tau_step)
    w[0] = w[-1] = 0.5 * tau_step
    return float(w @ vals), float(math.sqrt(np.sum((w * errs) ** 2)))


def px_second_moment_bound(t: float, X0_mass: float, bundle: ConstantsBundle) -> float:
    """C^2 theta^2 (X_0(1) t^{1-2 lambda_0}/(1 - lambda_0) + X_0(1)^2 t^{-2 lambda_0}).

    Poisson(2 X_0(1)/t) clusters, each bounded through the canonical first
    and second moments; recombination only removes mass.
    """
    if not t > 0:
        raise ValueError("t must be positive")
    if X0_mass < 0:
        raise ValueError("X0 mass must be nonnegative")
    l0 = bundle.lambda0
    c2 = bundle.C ** 2 * bundle.theta ** 2
    return float(c2 * (X0_mass * t ** (1 - 2 * l0) / (1 - l0) + X0_mass ** 2 * t ** (-2 * l0)))
