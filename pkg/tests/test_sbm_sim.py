import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

import ensembles
from sbm_localtime.sbm_sim import (ClusterEnsemble, DensityField, InitialMeasure, SimulationError,
                                   cluster_counts, refine_field, sample_cluster_decomposition,
                                   simulate_brw, simulate_spde, simulate_spde_graded,
                                   stream_seeds)

X0 = InitialMeasure.point(0.0, 1.0)


def test_stream_seeds_deterministic_and_distinct():
    a = stream_seeds(5, 100)
    assert np.array_equal(a, stream_seeds(5, 100))
    assert np.unique(a).size == 100
    assert np.array_equal(stream_seeds(5, 10, offset=90), a[90:])
    assert not np.array_equal(stream_seeds(6, 100), a)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(-2, 2), st.floats(0, 3)), min_size=1, max_size=4))
def test_atoms_on_grid_preserve_mass_and_mean(atoms):
    mu = InitialMeasure(tuple(atoms))
    x = np.linspace(-3, 3, 601)
    g = mu.on_grid(x)
    dx = x[1] - x[0]
    assert np.all(g >= 0)
    assert abs(g.sum() * dx - mu.total_mass) < 1e-9 * max(1.0, mu.total_mass)
    if mu.total_mass > 0:
        mean = sum(a * m for a, m in atoms)
        assert abs((g * x).sum() * dx - mean) < 1e-9 * max(1.0, mu.total_mass)


def test_initial_measure_validation():
    with pytest.raises(ValueError):
        InitialMeasure(((0.0, -1.0),))
    with pytest.raises(ValueError):
        X0.on_grid(np.linspace(2, 3, 11))
    dens = InitialMeasure(density_x=np.linspace(-1, 1, 201), density=np.full(201, 0.5))
    assert abs(dens.total_mass - 1.0) < 1e-12
    assert dens.support() == (-1.0, 1.0)


@pytest.mark.parametrize("scheme", ["feller", "euler"])
def test_field_nonnegative_with_exact_zeros(scheme):
    f = simulate_spde(X0, 0.5, 0.05, seed=3, scheme=scheme)
    assert np.all(f.values >= 0)
    assert np.any(f.values == 0)
    assert math.isfinite(f.total_mass)
    assert f.meta["leak"] == 0.0


def test_seed_determinism():
    a = simulate_spde(X0, 0.5, 0.05, seed=11)
    b = simulate_spde(X0, 0.5, 0.05, seed=11)
    c = simulate_spde(X0, 0.5, 0.05, seed=12)
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)


def test_translation_equivariance_periodic():
    x = 0.05 * np.arange(-120, 121)
    k = 7
    a = simulate_spde(X0, 0.3, 0.05, seed=5, periodic=True, x_grid=x)
    b = simulate_spde(InitialMeasure.point(k * 0.05, 1.0), 0.3, 0.05, seed=5, periodic=True,
                      x_grid=x)
    assert a.values[:10].sum() == 0 and a.values[-10:].sum() == 0
    assert np.array_equal(np.roll(a.values, k), b.values)


def test_rejects_unstable_step_and_scheme():
    with pytest.raises(ValueError):
        simulate_spde(X0, 0.1, 0.05, dt=0.01)
    with pytest.raises(ValueError):
        simulate_spde(X0, 0.1, 0.05, scheme="rk4")


def test_mass_cap_aborts():
    with pytest.raises(SimulationError):
        simulate_spde(X0, 1.0, 0.05, seed=1, mass_cap=1e-3)


def test_extinct_field():
    f = simulate_spde(InitialMeasure.point(0.0, 1e-4), 1.0, 0.05, seed=2)
    assert f.extinct and f.total_mass == 0.0


def test_binary_roundtrip(tmp_path):
    f = simulate_spde(X0, 0.2, 0.05, seed=9)
    p = tmp_path / "f.bin"
    f.to_binary(p)
    raw = p.read_bytes()
    n, dx, t, seed = struct.unpack("<QddQ", raw[:32])
    assert (n, dx, t, seed) == (f.values.size, f.dx, f.time, f.seed)
    assert len(raw) == 32 + 8 * n
    g = DensityField.from_binary(p, x0=f.x0)
    assert np.array_equal(g.values, f.values)


def test_csv_export(tmp_path):
    f = simulate_spde(X0, 0.2, 0.05, seed=9)
    p = tmp_path / "f.csv"
    f.to_csv(p)
    data = np.loadtxt(p, delimiter=",", skiprows=1)
    assert np.array_equal(data[:, 1], f.values)


def test_refine_preserves_mass():
    f = simulate_spde(X0, 0.5, 0.04, seed=4)
    g = refine_field(f)
    assert g.dx == 0.02 and g.values.size == 2 * f.values.size - 1
    assert abs(g.total_mass - f.total_mass) <= f.values.max() * f.dx


def test_graded_field_shape_and_determinism():
    a = simulate_spde_graded(X0, 1.0, 0.004, 21, dx_coarse=0.016)
    b = simulate_spde_graded(X0, 1.0, 0.004, 21, dx_coarse=0.016)
    assert a.dx == pytest.approx(0.004)
    assert np.array_equal(a.values, b.values)
    assert a.meta["levels"] == pytest.approx([0.016, 0.008, 0.004])


def test_feller_mass_moments_small_ensemble():
    masses = np.array([simulate_spde(X0, 1.0, 0.05, seed=int(s)).total_mass
                       for s in stream_seeds(8, 400)])
    se = masses.std(ddof=1) / math.sqrt(masses.size)
    assert abs(masses.mean() - 1) < 3 * se
    p = math.exp(-2)
    ext = np.mean(masses == 0)
    assert abs(ext - p) < 3 * math.sqrt(p * (1 - p) / masses.size)


def test_brw_exact_particle_counts():
    f = simulate_brw(X0, 1.0, 200, seed=3)
    assert f.meta["particles"] == round(f.meta["mass_exact"] * 200)
    with pytest.raises(ValueError):
        simulate_brw(InitialMeasure.point(0.0, 1e-6), 1.0, 10)
    with pytest.raises(SimulationError):
        simulate_brw(X0, 1.0, 1000, seed=1, max_particles=10)


def test_brw_moments_and_extinction():
    m = ensembles.brw_delta()["mass"]
    n = m.size
    se = m.std(ddof=1) / math.sqrt(n)
    assert abs(m.mean() - 1) < 3 * se
    mu4 = np.mean((m - m.mean()) ** 4)
    var = m.var(ddof=1)
    assert abs(var - 1) < 5 * math.sqrt((mu4 - var ** 2) / n)
    p = math.exp(-2)
    assert abs(np.mean(m == 0) - p) < 3 * math.sqrt(p * (1 - p) / n)


def test_spde_and_brw_mass_laws_agree():
    a = ensembles.spde_delta()["mass"]
    b = ensembles.brw_delta()["mass"]
    assert stats.ks_2samp(a, b).pvalue > 0.01


def test_extinction_stable_under_refinement():
    fine = ensembles.spde_delta()["mass"] == 0
    coarse = ensembles.spde_delta(dx=0.04)["mass"] == 0
    se = math.sqrt(fine.var() / fine.size + coarse.var() / coarse.size)
    assert abs(fine.mean() - coarse.mean()) < se


def test_cluster_count_mean():
    N = cluster_counts(X0, 1.0, stream_seeds(4, 5000))
    assert abs(N.mean() - 2.0) < 3 * math.sqrt(2.0 / N.size)


def test_cluster_ensemble_structure():
    e = sample_cluster_decomposition(InitialMeasure(((0.0, 0.5), (1.0, 0.5))), 1.0, 0.01, 8)
    assert isinstance(e, ClusterEnsemble)
    assert len(e.clusters) == e.N == len(e.attempts)
    assert all(c.total_mass > 0 for c in e.clusters)
    assert set(np.round(e.seeds, 12)) <= {0.0, 1.0}
    if e.N:
        tot = e.total_field()
        assert np.max(np.abs(tot.values - sum(c.values for c in e.clusters))) <= 1e-12
        assert 0 < e.acceptance_rate <= 1
    assert cluster_counts(X0, 1.0, [8])[0] == sample_cluster_decomposition(X0, 1.0, 0.01, 8).N


def test_cluster_rejects_bad_mass():
    with pytest.raises(ValueError):
        sample_cluster_decomposition(X0, 1.0, 0.1, 1)
    with pytest.raises(ValueError):
        sample_cluster_decomposition(X0, 1.0, 1e-6, 1)


def test_conditional_cluster_mass():
    pool = ensembles.cluster_pool()
    m = pool["cluster_mass"]
    assert abs(m.mean() - 0.5) < 3 * m.std(ddof=1) / math.sqrt(m.size)


def test_superposed_clusters_match_direct_simulation():
    pool = ensembles.cluster_pool()
    direct = ensembles.spde_delta()["mass"]
    assert stats.ks_2samp(pool["mass"], direct).pvalue > 0.01
