"""Boundary local-time measures on a density grid, zero-set boundaries and their dimension."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .sbm_sim import ClusterEnsemble, DensityField

LAMBDA_INF = math.inf
# Richardson ladder base lam* = RESOLUTION_RATIO / dx; see l_hat.
RESOLUTION_RATIO = 0.32


@dataclass(frozen=True)
class GridMeasure:
    x_grid: np.ndarray
    weights: np.ndarray
    lambda_used: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != np.shape(self.x_grid):
            raise ValueError("weights and grid differ in shape")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonnegative")
        object.__setattr__(self, "weights", w)

    @property
    def total(self) -> float:
        return float(self.weights.sum())

    @property
    def dx(self) -> float:
        return float(self.x_grid[1] - self.x_grid[0])

    def to_csv(self, path) -> None:
        np.savetxt(path, np.column_stack([self.x_grid, self.weights]), delimiter=",",
                   header="x,weight", comments="")


@dataclass(frozen=True)
class BoundarySet:
    indices: np.ndarray
    x_grid: np.ndarray

    @property
    def points(self) -> np.ndarray:
        return self.x_grid[self.indices]

    def __len__(self) -> int:
        return int(self.indices.size)


def l_lambda(field: DensityField, lam: float, lambda0: float) -> GridMeasure:
    """Weights lam^{2 lambda_0} X_j exp(-lam X_j) dx."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    if not 0.5 < lambda0 < 1:
        raise ValueError("lambda0 must lie in (1/2, 1)")
    X = field.values
    w = lam ** (2 * lambda0) * X * np.exp(-lam * X) * field.dx
    return GridMeasure(field.x_grid, w, float(lam))


def mass_ceiling(field: DensityField, lam: float, lambda0: float) -> float:
    """lam^{2 lambda_0 - 1} e^{-1} |{X > 0}|, from x e^{-lam x} <= 1/(e lam)."""
    return lam ** (2 * lambda0 - 1) / math.e * np.count_nonzero(field.values > 0) * field.dx


def density_scale(field: DensityField) -> float:
    """Median of the positive density values."""
    pos = field.values[field.values > 0]
    if pos.size == 0:
        raise ValueError("field is extinct")
    return float(np.median(pos))


@dataclass
class LadderResult:
    lams: np.ndarray
    totals: np.ndarray
    estimate: float
    converged: bool
    method: str


def lambda_ladder(field: DensityField, lambda0: float, k_min: int = 0, k_max: int = 12,
                  rel_tol: float = 0.02) -> LadderResult:
    """lam_k = 2^k / (dx <X>) until successive totals differ by less than rel_tol.

    The last iterate is reported.
    """
    scale = density_scale(field)
    lams, totals = [], []
    converged = False
    for k in range(k_min, k_max + 1):
        lam = 2.0 ** k / (field.dx * scale)
        lams.append(lam)
        totals.append(l_lambda(field, lam, lambda0).total)
        if len(totals) > 1:
            prev = totals[-2]
            if prev == 0 or abs(totals[-1] - prev) < rel_tol * abs(prev):
                converged = True
                break
    return LadderResult(np.array(lams), np.array(totals), float(totals[-1]), converged, "ladder")


def l_hat(field: DensityField, lambda0: float, method: str = "richardson",
          ratio: float = RESOLUTION_RATIO) -> float:
    """Estimate of L_t(1) from a single field.

    ``richardson``: combine lam* = ratio/dx and 2 lam* against the
    lam^{-(2 lambda_0 - 1)} approach to the limit.  ``ladder``: the
    stop-rule ladder of ``lambda_ladder``.
    """
    if field.extinct:
        return 0.0
    if method == "ladder":
        return lambda_ladder(field, lambda0).estimate
    if method != "richardson":
        raise ValueError(f"unknown method {method!r}")
    lam = ratio / field.dx
    a = l_lambda(field, lam, lambda0).total
    b = l_lambda(field, 2 * lam, lambda0).total
    r = 2.0 ** (2 * lambda0 - 1)
    return (r * b - a) / (r - 1)


def l_hat_measure(field: DensityField, lambda0: float, ratio: float = RESOLUTION_RATIO
                  ) -> GridMeasure:
    """Node-wise Richardson combination, clipped at zero, as a measure."""
    lam = ratio / field.dx
    a = l_lambda(field, lam, lambda0).weights
    b = l_lambda(field, 2 * lam, lambda0).weights
    r = 2.0 ** (2 * lambda0 - 1)
    return GridMeasure(field.x_grid, np.maximum((r * b - a) / (r - 1), 0.0), LAMBDA_INF)


def boundary_set(field: DensityField) -> BoundarySet:
    """Nodes with X = 0 and a positive neighbour."""
    X = field.values
    zero = X == 0
    pos = X > 0
    nbr = np.zeros_like(pos)
    nbr[1:] |= pos[:-1]
    nbr[:-1] |= pos[1:]
    return BoundarySet(np.flatnonzero(zero & nbr), field.x_grid)


def mass_near_boundary(mu: GridMeasure, bset: BoundarySet, radius_nodes: int = 3) -> float:
    """Share of the measure within radius_nodes nodes of the boundary set."""
    if mu.total == 0:
        return math.nan
    near = np.zeros(mu.weights.size, dtype=bool)
    for k in range(-radius_nodes, radius_nodes + 1):
        idx = bset.indices + k
        near[idx[(idx >= 0) & (idx < near.size)]] = True
    return float(mu.weights[near].sum() / mu.total)


# ----------------------------------------------------------------------------
# Box counting
# ----------------------------------------------------------------------------

@dataclass
class BoxFit:
    scales: np.ndarray
    counts: np.ndarray
    slope: float
    stderr: float
    window: tuple
    reliable: bool

    def to_json(self) -> str:
        return json.dumps({"scales": self.scales.tolist(), "counts": self.counts.tolist(),
                           "slope": self.slope, "stderr": self.stderr,
                           "window": list(self.window), "reliable": self.reliable})


def default_scales(dx: float, domain: float, per_decade: int = 6, min_decades: float = 2.0
                   ) -> np.ndarray:
    lo, hi = 4 * dx, domain / 8
    if math.log10(hi / lo) < min_decades:
        raise ValueError(f"need at least {min_decades} decades between 4 dx and domain/8")
    n = int(math.floor(per_decade * math.log10(hi / lo))) + 1
    return np.geomspace(lo, hi, n)


def box_counts(points, scales, origin: float = 0.0) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    return np.array([np.unique(np.floor((pts - origin) / e)).size for e in scales])


def box_dimension(points, scales, origin: float | None = None, min_points: int = 20
                  ) -> tuple[float, BoxFit]:
    """Slope of log N(eps) against log(1/eps), dropping the two smallest scales and the largest."""
    pts = points.points if isinstance(points, BoundarySet) else np.asarray(points, dtype=float)
    scales = np.sort(np.asarray(scales, dtype=float))
    if scales.size < 6:
        raise ValueError("need at least six scales")
    if pts.size == 0:
        raise ValueError("empty point set")
    # box edges fixed off the grid so that lattice points do not straddle edges
    org = float(pts.min()) - 0.5 * scales[0] * (math.sqrt(5) - 1) if origin is None else origin
    counts = box_counts(pts, scales, org)
    window = (2, scales.size - 1)
    x = np.log(1 / scales[window[0]:window[1]])
    y = np.log(counts[window[0]:window[1]])
    A = np.column_stack([x, np.ones_like(x)])
    coef, res, *_ = np.linalg.lstsq(A, y, rcond=None)
    dof = max(x.size - 2, 1)
    resid = y - A @ coef
    s2 = float(resid @ resid) / dof
    se = math.sqrt(s2 / float(np.sum((x - x.mean()) ** 2)))
    fit = BoxFit(scales, counts, float(coef[0]), se, window, bool(pts.size >= min_points))
    return float(coef[0]), fit


# ----------------------------------------------------------------------------
# Energy integrals
# ----------------------------------------------------------------------------

def cell_self_energy(dx: float, p: float) -> float:
    """(1/dx^2) int int over a cell of |u - v|^{-p}: uniform mass in one cell."""
    return 2.0 / ((1 - p) * (2 - p)) * dx ** (-p)


def energy_integral(mu: GridMeasure, p: float, chunk: int = 2048) -> float:
    """sum_{j != k} w_j w_k |x_j - x_k|^{-p} plus the uniform-in-cell diagonal."""
    if not 0 < p < 1:
        raise ValueError("p must lie in (0, 1)")
    nz = np.flatnonzero(mu.weights > 0)
    if nz.size == 0:
        return 0.0
    x = mu.x_grid[nz]
    w = mu.weights[nz]
    total = float(np.sum(w * w)) * cell_self_energy(mu.dx, p)
    for i in range(0, nz.size, chunk):
        xi = x[i:i + chunk, None]
        d = np.abs(xi - x[None, :])
        with np.errstate(divide="ignore"):
            k = np.where(d > 0, d ** (-p), 0.0)
        total += float(w[i:i + chunk] @ k @ w)
    return total


def atom_share(mu: GridMeasure) -> float:
    """Largest single-node share of the measure."""
    return float(mu.weights.max() / mu.total) if mu.total > 0 else math.nan


# ----------------------------------------------------------------------------
# Cluster recombination
# ----------------------------------------------------------------------------

def snap_to_boundary(mu: GridMeasure, field: DensityField) -> GridMeasure:
    """Move each weight to the nearest zero node of ``field`` (ties split evenly).

    Approximating measures live on {X > 0}; their limits live on the zero-set
    boundary.  Snapping gives grid measures supported on the field's own zeros.
    """
    X = field.values
    n = X.size
    idx = np.arange(n)
    zero = X == 0
    if not zero.any():
        raise ValueError("field has no zero nodes")
    left = np.where(zero, idx, -1)
    left = np.maximum.accumulate(left)
    right = np.where(zero, idx, n)
    right = np.minimum.accumulate(right[::-1])[::-1]
    dl = np.where(left >= 0, idx - left, n + 1)
    dr = np.where(right < n, right - idx, n + 1)
    out = np.zeros(n)
    w = mu.weights
    only_l = dl < dr
    only_r = dr < dl
    tie = dl == dr
    np.add.at(out, left[only_l], w[only_l])
    np.add.at(out, right[only_r], w[only_r])
    np.add.at(out, left[tie], 0.5 * w[tie])
    np.add.at(out, right[tie], 0.5 * w[tie])
    return GridMeasure(mu.x_grid, out, mu.lambda_used)


def recombine(ensemble: ClusterEnsemble, cluster_measures) -> GridMeasure:
    """1{X = 0} sum_i L^i, checked node-exactly against sum_i 1{sum_{k != i} X^k = 0} L^i.

    Each cluster measure must vanish where its own cluster is positive
    (see ``snap_to_boundary``).
    """
    fields = ensemble.clusters
    if len(fields) != len(cluster_measures):
        raise ValueError("one measure per cluster required")
    if not fields:
        raise ValueError("empty ensemble")
    x = fields[0].x_grid
    for f, m in zip(fields, cluster_measures):
        if f.values.shape != x.shape or m.weights.shape != x.shape or \
                not np.array_equal(f.x_grid, x) or not np.array_equal(m.x_grid, x):
            raise ValueError("grid mismatch between clusters and measures")
        if np.any(m.weights[f.values > 0] > 0):
            raise ValueError("cluster measure charges the cluster's own support")
    positive = np.array([f.values > 0 for f in fields])
    weights = np.array([m.weights for m in cluster_measures])
    zero_total = ~positive.any(axis=0)
    acc = np.zeros(x.shape)
    for w in weights:
        acc += w
    first = np.where(zero_total, acc, 0.0)
    n_pos = positive.sum(axis=0)
    second = np.zeros_like(first)
    for i in range(len(fields)):
        others_zero = (n_pos - positive[i]) == 0
        second += np.where(others_zero, weights[i], 0.0)
    if not np.array_equal(first, second):
        raise AssertionError("the two recombination forms disagree")
    return GridMeasure(x, first, cluster_measures[0].lambda_used)
