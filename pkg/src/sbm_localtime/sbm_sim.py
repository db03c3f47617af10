"""Grid simulation of the super-Brownian density, a particle cross-sampler, and cluster sampling.

The density solves dX = X''/2 dt + sqrt(X) dW on a uniform grid.  Two
per-node noise steps are available after the explicit diffusion step:

``"feller"``  exact transition of the cell mass under dm = sqrt(m) dB
              (Poisson number of Gamma-distributed families); hits zero exactly.
``"euler"``   Gaussian increment sqrt(X dt/dx) * xi followed by clamping at zero.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid

from ._kernels import seed_numba, spde_run

SCHEMES = {"euler": 0, "feller": 1}


def stream_seeds(root_seed: int, n: int, offset: int = 0) -> np.ndarray:
    """Independent 32-bit seeds for replicates offset..offset+n-1 of a root seed."""
    ss = np.random.SeedSequence(root_seed)
    out = np.empty(n, dtype=np.uint32)
    for i in range(n):
        child = np.random.SeedSequence(ss.entropy, spawn_key=(offset + i,))
        out[i] = child.generate_state(1, dtype=np.uint32)[0]
    return out


@dataclass(frozen=True)
class InitialMeasure:
    """Finite initial measure: point atoms or a density sampled on a grid."""

    atoms: tuple = ()
    density_x: np.ndarray | None = None
    density: np.ndarray | None = None

    def __post_init__(self):
        if any(m < 0 for _, m in self.atoms):
            raise ValueError("atom masses must be nonnegative")
        if self.density is not None and np.any(np.asarray(self.density) < 0):
            raise ValueError("density must be nonnegative")

    @classmethod
    def point(cls, x: float = 0.0, mass: float = 1.0) -> "InitialMeasure":
        return cls(atoms=((float(x), float(mass)),))

    @property
    def total_mass(self) -> float:
        tot = sum(m for _, m in self.atoms)
        if self.density is not None:
            tot += float(trapezoid(self.density, self.density_x))
        return tot

    def support(self) -> tuple[float, float]:
        xs = [x for x, m in self.atoms if m > 0]
        if self.density is not None:
            pos = np.asarray(self.density) > 0
            if np.any(pos):
                xs += [float(self.density_x[pos][0]), float(self.density_x[pos][-1])]
        if not xs:
            return 0.0, 0.0
        return min(xs), max(xs)

    def sample_points(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """n iid points from the normalised measure."""
        if self.density is not None:
            raise NotImplementedError("sampling from gridded densities is not supported")
        xs = np.array([x for x, _ in self.atoms])
        ms = np.array([m for _, m in self.atoms])
        return xs[rng.choice(xs.size, size=n, p=ms / ms.sum())]

    def on_grid(self, x_grid: np.ndarray) -> np.ndarray:
        """Density on a uniform grid; atoms are split between their two nearest nodes."""
        dx = x_grid[1] - x_grid[0]
        out = np.zeros(x_grid.size)
        for x, m in self.atoms:
            pos = (x - x_grid[0]) / dx
            j = int(math.floor(pos))
            f = pos - j
            if j < 0 or j + 1 >= x_grid.size:
                raise ValueError("atom outside the grid")
            out[j] += (1.0 - f) * m / dx
            if f > 0:
                out[j + 1] += f * m / dx
        if self.density is not None:
            out += np.interp(x_grid, self.density_x, self.density, left=0.0, right=0.0)
        return out


@dataclass
class DensityField:
    """Density snapshot on the grid x_j = x0 + j * dx."""

    x0: float
    dx: float
    values: np.ndarray
    time: float
    seed: int
    scheme: str = "feller"
    meta: dict = field(default_factory=dict)

    @property
    def x_grid(self) -> np.ndarray:
        return self.x0 + self.dx * np.arange(self.values.size)

    @property
    def total_mass(self) -> float:
        return float(np.sum(self.values) * self.dx)

    @property
    def extinct(self) -> bool:
        return not np.any(self.values > 0)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "value"])
            for x, v in zip(self.x_grid, self.values):
                w.writerow([repr(float(x)), repr(float(v))])

    def to_binary(self, path) -> None:
        """Little-endian header {n u64, dx f64, t f64, seed u64} then n f64 values."""
        with open(path, "wb") as fh:
            fh.write(struct.pack("<QddQ", self.values.size, self.dx, self.time, int(self.seed)))
            fh.write(np.asarray(self.values, dtype="<f8").tobytes())

    @classmethod
    def from_binary(cls, path, x0: float = 0.0) -> "DensityField":
        with open(path, "rb") as fh:
            n, dx, t, seed = struct.unpack("<QddQ", fh.read(32))
            vals = np.frombuffer(fh.read(8 * n), dtype="<f8").copy()
        return cls(x0, dx, vals, t, seed)


class SimulationError(RuntimeError):
    pass


def _grid_for(x0: InitialMeasure, t: float, dx: float, margin: float | None = None):
    lo, hi = x0.support()
    pad = 6.0 * math.sqrt(t) if margin is None else margin
    k_lo = int(math.floor((lo - pad) / dx))
    k_hi = int(math.ceil((hi + pad) / dx))
    return dx * np.arange(k_lo, k_hi + 1)


def simulate_spde(x0: InitialMeasure, t: float, dx: float, dt: float | None = None,
                  seed: int = 0, scheme: str = "feller", periodic: bool = False,
                  x_grid: np.ndarray | None = None, mass_cap_factor: float = 100.0,
                  mass_cap: float | None = None) -> DensityField:
    """Simulate the density SPDE up to time t.

    The default time step is dx^2/3.  Zero boundary values are imposed at both
    ends of a domain covering the initial support plus 6 sqrt(t), unless a grid
    is given or ``periodic`` is set.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    if dt is None:
        dt = dx * dx / 3.0
    if dt > dx * dx / 2.0 * (1 + 1e-12):
        raise ValueError("dt must not exceed dx^2/2")
    if x_grid is None:
        x_grid = _grid_for(x0, t, dx)
    X = x0.on_grid(x_grid)
    nsteps = int(round(t / dt))
    if abs(nsteps * dt - t) > 1e-9 * t:
        nsteps = int(math.ceil(t / dt))
        dt = t / nsteps
    cap = mass_cap_factor * max(x0.total_mass, 1e-300) if mass_cap is None else mass_cap
    seed_numba(int(seed) & 0xFFFFFFFF)
    status, done = spde_run(X, dx, dt, nsteps, SCHEMES[scheme], periodic, cap)
    if status == 2:
        raise SimulationError(f"mass exceeded {cap} after {done} steps (seed {seed})")
    if status == 3:
        raise SimulationError(f"non-finite density after {done} steps (seed {seed})")
    if status == 1:
        X[:] = 0.0
    meta = {"dt": dt, "nsteps": nsteps, "extinct_step": done if status == 1 else None,
            "leak": float(X[0] + X[-1]) * dx}
    return DensityField(float(x_grid[0]), dx, X, t, int(seed), scheme, meta)


def refine_field(field: DensityField) -> DensityField:
    """Halve dx: old nodes kept, midpoints linearly interpolated (mass preserving to O(dx^2))."""
    X = field.values
    Y = np.empty(2 * X.size - 1)
    Y[0::2] = X
    Y[1::2] = 0.5 * (X[:-1] + X[1:])
    meta = dict(field.meta, refined_from=field.dx)
    return DensityField(field.x0, 0.5 * field.dx, Y, field.time, field.seed, field.scheme, meta)


def simulate_spde_graded(x0: InitialMeasure, t: float, dx_final: float, seed: int = 0,
                         dx_coarse: float = 0.02, window_nodes: float = 40.0,
                         scheme: str = "feller") -> DensityField:
    """Simulate to t, halving dx in the final stretch of time.

    Level k has dx_k = dx_final 2^k and is switched on at time
    t - (window_nodes dx_k)^2, the time a diffusive feature needs to travel
    ``window_nodes`` cells; structure finer than dx_k is generated afterwards.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    levels = max(0, int(math.floor(math.log2(dx_coarse / dx_final) + 1e-9)))
    dxs = [dx_final * 2.0 ** k for k in range(levels, -1, -1)]
    starts = [0.0] + [max(0.0, t - (window_nodes * d) ** 2) for d in dxs[1:]]
    ends = starts[1:] + [t]
    seeds = stream_seeds(seed, len(dxs))
    x_grid = _grid_for(x0, t, dxs[0])
    X = x0.on_grid(x_grid)
    field = DensityField(float(x_grid[0]), dxs[0], X, 0.0, int(seed), scheme, {})
    cap = 100.0 * max(x0.total_mass, 1e-300)
    for k, (d, a, b) in enumerate(zip(dxs, starts, ends)):
        if k > 0:
            field = refine_field(field)
        if b <= a:
            continue
        dt = d * d / 3.0
        nsteps = int(math.ceil((b - a) / dt))
        dt = (b - a) / nsteps
        seed_numba(int(seeds[k]))
        status, done = spde_run(field.values, d, dt, nsteps, SCHEMES[scheme], False, cap)
        if status in (2, 3):
            raise SimulationError(f"graded run failed with status {status} at level {k}")
        if status == 1:
            field.values[:] = 0.0
            break
    while field.dx > 1.5 * dxs[-1]:
        field = refine_field(field)
    meta = {"levels": dxs, "starts": starts, "window_nodes": window_nodes}
    return DensityField(field.x0, field.dx, field.values, t, int(seed), scheme, meta)


def simulate_replicates(x0: InitialMeasure, t: float, dx: float, n: int, root_seed: int,
                        keep_fields: bool = False, offset: int = 0, **kw):
    """Run n seeded replicates; returns (masses, fields or None, seeds)."""
    seeds = stream_seeds(root_seed, n, offset)
    masses = np.empty(n)
    fields = [] if keep_fields else None
    for i, s in enumerate(seeds):
        f = simulate_spde(x0, t, dx, seed=int(s), **kw)
        masses[i] = f.total_mass
        if keep_fields:
            fields.append(f)
    return masses, fields, seeds


# ----------------------------------------------------------------------------
# Branching Brownian particles
# ----------------------------------------------------------------------------

def _offspring_after(rng, n_parents: int, a: float) -> np.ndarray:
    """Descendant counts after time h of critical binary branching with a = rate*h/2.

    P(0) = a/(1+a); P(k) = (1-P(0))^2 P(0)^(k-1) for k >= 1.
    """
    p0 = a / (1.0 + a)
    alive = rng.random(n_parents) >= p0
    out = np.zeros(n_parents, dtype=np.int64)
    out[alive] = rng.geometric(1.0 - p0, size=int(alive.sum()))
    return out


def simulate_brw(x0: InitialMeasure, t: float, particles_per_mass: int,
                 branch_rate: float | None = None, seed: int = 0, dx: float = 0.02,
                 n_steps: int = 64, bandwidth: float | None = None,
                 max_particles: int = 50_000_000) -> DensityField:
    """Critical binary branching Brownian particles of mass 1/n, smoothed onto a grid.

    Counts follow the exact law of the branching process over each of the
    ``n_steps`` sub-intervals; descendants of one particle within a
    sub-interval receive independent Brownian increments.
    """
    n = int(round(particles_per_mass * x0.total_mass))
    if n < 1:
        raise ValueError("need at least one particle")
    rate = float(particles_per_mass if branch_rate is None else branch_rate)
    rng = np.random.default_rng(seed)
    pos = x0.sample_points(n, rng)
    h = t / n_steps
    a = rate * h / 2.0
    for _ in range(n_steps):
        if pos.size == 0:
            break
        counts = _offspring_after(rng, pos.size, a)
        if counts.sum() > max_particles:
            raise SimulationError("particle count exceeded the overflow guard")
        pos = np.repeat(pos, counts)
        pos = pos + math.sqrt(h) * rng.standard_normal(pos.size)
    x_grid = _grid_for(x0, t, dx)
    bw = dx if bandwidth is None else bandwidth
    vals = np.zeros(x_grid.size)
    if pos.size:
        # linear (hat) kernel of half-width bw, normalised to mass 1/n per particle
        lo = x_grid[0]
        u = (pos - lo) / dx
        j = np.floor(u).astype(int)
        f = u - j
        ok = (j >= 0) & (j + 1 < x_grid.size)
        np.add.at(vals, j[ok], (1 - f[ok]))
        np.add.at(vals, j[ok] + 1, f[ok])
        vals /= particles_per_mass * dx
    meta = {"particles": int(pos.size), "particles_per_mass": particles_per_mass,
            "branch_rate": rate, "bandwidth": bw, "n_steps": n_steps,
            "mass_exact": pos.size / particles_per_mass}
    return DensityField(float(x_grid[0]), dx, vals, t, int(seed), "brw", meta)


# ----------------------------------------------------------------------------
# Cluster decomposition
# ----------------------------------------------------------------------------

@dataclass
class ClusterEnsemble:
    """Poisson number of surviving clusters at time t on a common grid."""

    N: int
    seeds: np.ndarray
    clusters: list
    m0: float
    attempts: list
    t: float

    @property
    def acceptance_rate(self) -> float:
        tot = sum(self.attempts)
        return self.N / tot if tot else float("nan")

    def total_field(self) -> DensityField:
        if not self.clusters:
            raise ValueError("empty ensemble has no grid")
        c0 = self.clusters[0]
        vals = np.zeros_like(c0.values)
        for c in self.clusters:
            vals += c.values
        return DensityField(c0.x0, c0.dx, vals, self.t, c0.seed, c0.scheme, {"clusters": self.N})

    def total_mass(self) -> float:
        return float(sum(c.total_mass for c in self.clusters))


def sample_cluster(x: float, t: float, m0: float, dx: float, x_grid: np.ndarray,
                   rng: np.random.Generator, max_attempts: int, scheme: str = "feller"):
    """Rejection sample one cluster from x: returns (field, attempts)."""
    start = InitialMeasure.point(x, m0)
    for k in range(1, max_attempts + 1):
        # survivors carry mass of order t/2, far above m0
        f = simulate_spde(start, t, dx, seed=int(rng.integers(2 ** 32)), scheme=scheme,
                          x_grid=x_grid, mass_cap=100.0 * max(m0, t))
        if not f.extinct:
            f.meta["attempts"] = k
            return f, k
    raise SimulationError(f"no surviving cluster after {max_attempts} attempts; m0 too small")


def cluster_count(x0: InitialMeasure, t: float, rng: np.random.Generator) -> int:
    """Number of clusters surviving to t: Poisson(2 X0(1) / t)."""
    return int(rng.poisson(2.0 * x0.total_mass / t))


def cluster_counts(x0: InitialMeasure, t: float, seeds) -> np.ndarray:
    """The N that sample_cluster_decomposition draws for each seed, without simulating."""
    return np.array([cluster_count(x0, t, np.random.default_rng(int(s))) for s in seeds])


def sample_cluster_decomposition(x0: InitialMeasure, t: float, m0: float, seed: int,
                                 dx: float = 0.02, scheme: str = "feller",
                                 min_acceptance: float = 1e-4) -> ClusterEnsemble:
    """N ~ Poisson(2 X0(1)/t) clusters seeded iid from the normalised X0.

    Each cluster is the field started from m0 at its seed, conditioned on
    survival to t by rejection.  The conditioned law converges to the cluster
    law as m0/t -> 0, so fields are used without rescaling.
    """
    if m0 > 0.05 * t:
        raise ValueError("m0 must be at most 0.05 t")
    if t <= 0:
        raise ValueError("t must be positive")
    p_accept = -math.expm1(-2.0 * m0 / t)
    if p_accept < min_acceptance:
        raise ValueError("acceptance probability below threshold; m0 too small")
    rng = np.random.default_rng(seed)
    N = cluster_count(x0, t, rng)
    pts = x0.sample_points(N, rng) if N else np.empty(0)
    x_grid = _grid_for(x0, t, dx)
    clusters, attempts = [], []
    max_attempts = int(50 / p_accept) + 10
    for x in pts:
        f, k = sample_cluster(float(x), t, m0, dx, x_grid, rng, max_attempts, scheme)
        clusters.append(f)
        attempts.append(k)
    return ClusterEnsemble(N, pts, clusters, m0, attempts, t)


def conditioned_cluster_masses(t: float, m0: float, n: int, seed: int, dx: float = 0.02,
                               scheme: str = "feller") -> tuple[np.ndarray, int]:
    """Masses of n surviving clusters from 0; returns (masses, total attempts)."""
    rng = np.random.default_rng(seed)
    x_grid = _grid_for(InitialMeasure.point(0.0, m0), t, dx)
    p_accept = -math.expm1(-2.0 * m0 / t)
    masses = np.empty(n)
    total = 0
    for i in range(n):
        f, k = sample_cluster(0.0, t, m0, dx, x_grid, rng, int(50 / p_accept) + 10, scheme)
        masses[i] = f.total_mass
        total += k
    return masses, total
