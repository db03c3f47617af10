"""Ornstein-Uhlenbeck generator with Markovian killing, solved in an orthonormal Hermite basis.

The generator is ``A f = f''/2 - x f'/2`` acting on L^2(m), where m is the
standard Gaussian measure.  Probabilists' Hermite polynomials normalised in
L^2(m) diagonalise A with eigenvalues ``-n/2``, so only the killing matrix
``<h_m, phi h_n>`` needs quadrature.  Eigenvalues are stored as positive
killing rates ``lambda_n``.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import roots_hermitenorm

T_MIN = 0.05
# Cramer's inequality: |h_n(x)| <= K exp(x^2/4) for orthonormal probabilists' Hermite.
_CRAMER_K = 1.086435


class TruncationWarning(UserWarning):
    """Raised when a truncated eigenexpansion may be inaccurate."""


@dataclass(frozen=True)
class KillingFunction:
    """Nonnegative killing rate with declared limits at -inf and +inf."""

    evaluator: Callable[[np.ndarray], np.ndarray]
    limits_at_infinity: tuple[float, float] = (0.0, 0.0)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(self.evaluator(x), dtype=float), x.shape).copy()

    def validate(self, tol: float = 1e-8, probes=(8.0, 12.0, 16.0)) -> None:
        probes = np.asarray(probes, dtype=float)
        lo, hi = self.limits_at_infinity
        for side, lim in ((-1.0, lo), (1.0, hi)):
            vals = self(side * probes)
            if not np.all(np.isfinite(vals)):
                raise ValueError("killing function is not finite at probe points")
            if np.any(np.abs(vals - lim) > tol):
                raise ValueError(
                    f"killing function does not approach its declared limit {lim} "
                    f"(values {vals.tolist()} at {(side * probes).tolist()})")
        grid = np.linspace(-16.0, 16.0, 3201)
        if np.any(self(grid) < 0):
            raise ValueError("killing function must be nonnegative")

    @classmethod
    def constant(cls, c: float) -> "KillingFunction":
        if c < 0:
            raise ValueError("killing rate must be nonnegative")
        return cls(lambda x: np.full_like(x, c, dtype=float), (float(c), float(c)))

    @classmethod
    def zero(cls) -> "KillingFunction":
        return cls.constant(0.0)


@dataclass(frozen=True)
class GaussianMeasureGrid:
    """Gauss-Hermite rule for the standard Gaussian measure; weights sum to one."""

    nodes: np.ndarray
    weights: np.ndarray

    @classmethod
    def from_order(cls, order: int) -> "GaussianMeasureGrid":
        if order < 1:
            raise ValueError("quadrature order must be positive")
        z, w = roots_hermitenorm(order)
        w = w / w.sum()
        return cls(z, w)

    @property
    def order(self) -> int:
        return len(self.nodes)

    def integrate(self, values) -> float | np.ndarray:
        """Integrate samples taken at the nodes (last axis) against m."""
        return np.asarray(values) @ self.weights


def hermite_basis(x, n: int) -> np.ndarray:
    """Orthonormal probabilists' Hermite polynomials h_0..h_{n-1} at x, shape (n, len(x))."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    H = np.empty((n, x.size))
    H[0] = 1.0
    if n > 1:
        H[1] = x
    for k in range(1, n - 1):
        H[k + 1] = (x * H[k] - math.sqrt(k) * H[k - 1]) / math.sqrt(k + 1)
    return H


def hermite_basis_derivative(x, n: int) -> np.ndarray:
    """Derivatives of the orthonormal basis, using h_k' = sqrt(k) h_{k-1}."""
    H = hermite_basis(x, n)
    D = np.zeros_like(H)
    D[1:] = np.sqrt(np.arange(1, n))[:, None] * H[:-1]
    return D


@dataclass(frozen=True)
class SpectralModel:
    """Spectral decomposition of the killed OU generator.

    ``eigvecs[:, k]`` holds the Hermite coefficients of the k-th eigenfunction.
    """

    basis_size: int
    eigenvalues: np.ndarray
    eigvecs: np.ndarray
    theta: float
    quadrature_order: int
    domain_bound: float
    kill: KillingFunction | None = field(default=None, compare=False, repr=False)

    @property
    def lambda0(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def spectral_gap(self) -> float:
        return float(self.eigenvalues[1] - self.eigenvalues[0])

    def check_domain(self, *xs) -> None:
        for x in xs:
            if np.any(np.abs(np.asarray(x, dtype=float)) > self.domain_bound + 1e-12):
                raise ValueError(
                    f"evaluation point outside resolved domain |x| <= {self.domain_bound:.4g}")

    def modes(self, x, n_modes: int | None = None) -> np.ndarray:
        """Eigenfunctions psi_0..psi_{n_modes-1} at x, shape (n_modes, len(x))."""
        self.check_domain(x)
        k = self.basis_size if n_modes is None else n_modes
        return self.eigvecs[:, :k].T @ hermite_basis(x, self.basis_size)

    def mode_derivatives(self, x, n_modes: int | None = None) -> np.ndarray:
        self.check_domain(x)
        k = self.basis_size if n_modes is None else n_modes
        return self.eigvecs[:, :k].T @ hermite_basis_derivative(x, self.basis_size)

    def psi0(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.modes(x.ravel(), 1)[0].reshape(x.shape)

    def quadrature(self) -> GaussianMeasureGrid:
        return GaussianMeasureGrid.from_order(self.quadrature_order)

    def to_dict(self) -> dict:
        return {
            "basis_size": int(self.basis_size),
            "eigenvalues": self.eigenvalues.tolist(),
            "eigvec_matrix": self.eigvecs.ravel(order="C").tolist(),
            "theta": float(self.theta),
            "domain_bound": float(self.domain_bound),
            "quadrature_order": int(self.quadrature_order),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SpectralModel":
        nb = int(d["basis_size"])
        vecs = np.asarray(d["eigvec_matrix"], dtype=float).reshape(nb, nb)
        return cls(nb, np.asarray(d["eigenvalues"], dtype=float), vecs, float(d["theta"]),
                   int(d["quadrature_order"]), float(d["domain_bound"]))

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load_json(cls, path) -> "SpectralModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def build_generator(kill: KillingFunction, basis_size: int, quadrature_order: int | None = None
                    ) -> SpectralModel:
    """Diagonalise ``diag(n/2) + <h_m, kill h_n>`` and return the killed rates in ascending order."""
    if basis_size < 4:
        raise ValueError("basis_size must be at least 4")
    if quadrature_order is None:
        quadrature_order = 2 * basis_size + 20
    if quadrature_order < 2 * basis_size:
        raise ValueError("quadrature_order must be at least 2*basis_size")
    quad = GaussianMeasureGrid.from_order(quadrature_order)
    phi = kill(quad.nodes)
    if not np.all(np.isfinite(phi)):
        raise ValueError("killing function is not finite at quadrature nodes")
    H = hermite_basis(quad.nodes, basis_size)
    K = (H * (quad.weights * phi)) @ H.T
    M = np.diag(0.5 * np.arange(basis_size)) + 0.5 * (K + K.T)
    try:
        lam, vecs = np.linalg.eigh(M)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"eigensolver failed; condition number {np.linalg.cond(M):.3e}") from exc

    # Deterministic signs: psi_0(0) > 0, others by their largest coefficient.
    h0 = hermite_basis([0.0], basis_size)[:, 0]
    for k in range(basis_size):
        ref = h0 @ vecs[:, k] if k == 0 else vecs[np.argmax(np.abs(vecs[:, k])), k]
        if ref < 0:
            vecs[:, k] = -vecs[:, k]
    theta = float(vecs[0, 0])
    bound = resolved_bound(vecs[:, 0], math.sqrt(2.0 * basis_size))
    return SpectralModel(basis_size, lam, vecs, theta, quadrature_order, bound, kill)


def resolved_bound(coeffs: np.ndarray, cap: float, tail_tol: float = 1e-3,
                   tail_frac: float = 0.8) -> float:
    """Largest b <= cap with the expansion positive and converged on [-b, b].

    Converged means the top ``1 - tail_frac`` share of the coefficients
    contributes less than ``tail_tol`` relative to the full sum.
    """
    nb = coeffs.size
    x = np.linspace(0.0, cap, 801)
    xs = np.concatenate([x, -x])
    H = hermite_basis(xs, nb)
    full = coeffs @ H
    k0 = int(tail_frac * nb)
    tail = np.abs(coeffs[k0:] @ H[k0:])
    good = (full > 0) & (tail < tail_tol * np.abs(full))
    good = good[:x.size] & good[x.size:]
    if not good[0]:
        return 0.0
    bad = np.flatnonzero(~good)
    return float(cap if bad.size == 0 else x[bad[0] - 1])


def truncation_tail(model: SpectralModel, t: float, x, y) -> np.ndarray:
    """Heuristic bound on the omitted terms n >= basis_size, using lambda_n >= n/2."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    nb = model.basis_size
    return (_CRAMER_K ** 2 * np.exp((x * x + y * y) / 4.0 - nb * t / 2.0)
            / (1.0 - math.exp(-t / 2.0)))


def _expansion(model: SpectralModel, t: float, x, y) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    xb, yb = np.broadcast_arrays(x, y)
    px = model.modes(xb.ravel())
    py = model.modes(yb.ravel())
    decay = np.exp(-model.eigenvalues * t)
    return np.einsum("k,kn,kn->n", decay, px, py).reshape(xb.shape)


def transition_density(model: SpectralModel, t: float, x, y, tol: float = 1e-8,
                       return_tail: bool = False):
    """Killed OU transition density with respect to m, by truncated eigenexpansion.

    A ``TruncationWarning`` is issued when the tail estimate exceeds ``tol``.
    """
    if not t > 0:
        raise ValueError("t must be positive")
    if t < T_MIN:
        raise ValueError(f"eigenexpansion refused for t < {T_MIN}; compose kernels instead")
    val = _expansion(model, t, x, y)
    tail = truncation_tail(model, t, x, y)
    if np.max(tail) > tol:
        warnings.warn(f"truncation tail estimate {np.max(tail):.2e} exceeds {tol:.1e}",
                      TruncationWarning, stacklevel=2)
    if return_tail:
        return val, tail
    return val


def survival_probability(model: SpectralModel, x, t: float, eps: float = 1e-8):
    """P_x(killing time > t), the m-integral of q_t(x, .).

    Because the constant function is the first basis element, the quadrature
    integral reduces to ``sum_n exp(-lambda_n t) psi_n(x) <psi_n, 1>``.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    x = np.asarray(x, dtype=float)
    px = model.modes(x.ravel())
    coef = model.eigvecs[0, :] * np.exp(-model.eigenvalues * t)
    val = (coef @ px).reshape(x.shape)
    if np.any(val < -eps) or np.any(val > 1 + eps):
        warnings.warn("survival probability outside [0,1]: truncation failure",
                      TruncationWarning, stacklevel=2)
    return val


def immortal_transition_density(model: SpectralModel, t: float, x, y, tol: float = 1e-8):
    """Doob transform of q_t by psi_0: a probability density in y with respect to m."""
    model.check_domain(x, y)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    px = model.psi0(x)
    if np.any(px <= 0):
        raise ValueError("psi_0 must be positive at the starting point")
    q = transition_density(model, t, x, y, tol=tol)
    return q * model.psi0(y) / px * math.exp(model.lambda0 * t)


class ImmortalChain:
    """Markov chain on the quadrature nodes with the Doob-transformed kernel at step dt.

    Row i holds ``q~_dt(z_i, z_j) w_j``; negative truncation artefacts are
    clipped before normalising.
    """

    def __init__(self, model: SpectralModel, dt: float, quadrature_order: int | None = None):
        if not dt > 0:
            raise ValueError("dt must be positive")
        self.model = model
        self.dt = float(dt)
        order = quadrature_order or model.quadrature_order
        quad = GaussianMeasureGrid.from_order(order)
        keep = np.abs(quad.nodes) <= model.domain_bound
        self.nodes = quad.nodes[keep]
        self.weights = quad.weights[keep]
        self._modes = model.modes(self.nodes)
        self._psi0 = self._modes[0]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", TruncationWarning)
            self.cdf = self._rows(self._modes)
        self.clipped_mass = self._clipped

    def _rows(self, start_modes: np.ndarray) -> np.ndarray:
        decay = np.exp(-(self.model.eigenvalues - self.model.lambda0) * self.dt)
        q = (start_modes * decay[:, None]).T @ self._modes
        psi_start = start_modes[0]
        P = q * (self._psi0 * self.weights)[None, :] / psi_start[:, None]
        neg = np.clip(P, None, 0.0)
        self._clipped = float(np.max(-neg.sum(axis=1)))
        P = np.clip(P, 0.0, None)
        P /= P.sum(axis=1, keepdims=True)
        return np.cumsum(P, axis=1)

    def start_row(self, x0: float) -> np.ndarray:
        return self._rows(self.model.modes(np.atleast_1d(float(x0))))[0]

    def sample(self, x0: float, n_steps: int, rng: np.random.Generator, n_paths: int = 1
               ) -> np.ndarray:
        """Paths of shape (n_paths, n_steps + 1); column 0 is x0, later columns are nodes."""
        self.model.check_domain(x0)
        first = self.start_row(x0)
        out = np.empty((n_paths, n_steps + 1))
        out[:, 0] = x0
        if n_steps == 0:
            return out
        last = self.nodes.size - 1
        state = np.minimum(np.searchsorted(first, rng.random(n_paths), side="right"), last)
        out[:, 1] = self.nodes[state]
        for k in range(2, n_steps + 1):
            u = rng.random(n_paths)
            state = np.minimum((self.cdf[state] <= u[:, None]).sum(axis=1), last)
            out[:, k] = self.nodes[state]
        return out


class ImmortalDiffusion:
    """The immortal process as a diffusion, dY = (-Y/2 + psi_0'/psi_0(Y)) dt + dB.

    The log-derivative of psi_0 is tabulated on the resolved domain; beyond it
    the drift uses the growth psi_0(y) ~ |y|^(2 lambda_0).
    """

    def __init__(self, model: SpectralModel, n_table: int = 4001):
        b = model.domain_bound
        if b < 2.0:
            raise ValueError("resolved domain too small for the immortal drift table")
        self.model = model
        self.bound = float(b)
        self.grid = np.linspace(-b, b, n_table)
        psi = model.psi0(self.grid)
        self.log_derivative = model.mode_derivatives(self.grid)[0] / psi
        self.log_psi0 = np.log(psi)
        self.table_args = (self.log_derivative, float(self.grid[0]),
                           float(self.grid[1] - self.grid[0]), self.bound, float(model.lambda0))

    def sample(self, x0s, horizon: float, dt: float, seed: int) -> np.ndarray:
        from ._kernels import immortal_paths, seed_numba
        n_steps = int(round(horizon / dt))
        seed_numba(int(seed))
        return immortal_paths(np.atleast_1d(np.asarray(x0s, dtype=float)), float(dt), n_steps,
                              *self.table_args)


def sample_immortal_path(model: SpectralModel, x0: float, horizon: float, dt: float,
                         rng_seed, n_paths: int = 1, method: str = "chain") -> np.ndarray:
    """Sample the immortal process at times 0, dt, ..., horizon.

    ``method="chain"`` walks the Doob-transformed kernel on quadrature nodes;
    ``method="sde"`` integrates the transformed diffusion by Euler-Maruyama.
    Returns a 1-d path when ``n_paths == 1``, else an array (n_paths, n_steps+1).
    """
    if not dt > 0 or horizon < dt:
        raise ValueError("need dt > 0 and horizon >= dt")
    n_steps = int(round(horizon / dt))
    if method == "chain":
        chain = ImmortalChain(model, dt)
        paths = chain.sample(x0, n_steps, np.random.default_rng(rng_seed), n_paths)
    elif method == "sde":
        model.check_domain(x0)
        paths = ImmortalDiffusion(model).sample(np.full(n_paths, float(x0)), horizon, dt,
                                                int(rng_seed))
    else:
        raise ValueError(f"unknown method {method!r}")
    return paths[0] if n_paths == 1 else paths
