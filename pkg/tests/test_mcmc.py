"""Sampler checks: exact-distribution chi-squares, heights, stiffness."""

import numpy as np
import pytest

import dimerlab as dl
from dimerlab import kasteleyn, mcmc
from dimerlab.errors import (DimensionMismatch, InsufficientStatistics,
                             NotLiquidPhase)

from conftest import random_cell_spec


@pytest.fixture(scope="module")
def tiny_uniform():
    graph = dl.build_graph(dl.uniform_spec(4), 1)
    tables = mcmc.MoveTables(graph)
    return graph, tables


def test_serial_chain_matches_exact_uniform(tiny_uniform):
    graph, tables = tiny_uniform
    _, ids, counters = mcmc.run_serial(graph, 200_000, seed=7, thin=20,
                                       tables=tables)
    assert len(ids) == 10_000
    assert counters[4] == 0  # no aborted worms
    stat, pval, dof = mcmc.chi_square_vs_exact(graph, ids, tables=tables)
    assert dof > 200
    assert pval > 0.01
    # every state of the 4x4 torus is actually reachable and reached
    assert len(np.unique(ids)) == 272


def test_vectorized_chain_matches_exact(tiny_uniform):
    graph, tables = tiny_uniform
    chain = mcmc.CheckerboardChain(graph, seed=11, tables=tables)
    chain.sweep(200)
    ids = np.empty(20_000, dtype=np.int64)
    for t in range(len(ids)):
        chain.sweep(2)
        ids[t] = chain.config_id()
    stat, pval, _ = mcmc.chi_square_vs_exact(graph, ids, tables=tables)
    assert pval > 0.01
    assert len(np.unique(ids)) == 272


def test_bridge_chain_matches_exact():
    graph = dl.build_graph(dl.row_bridge_spec(4), 1, lam=0.3)
    tables = mcmc.MoveTables(graph)
    _, ids, _ = mcmc.run_serial(graph, 200_000, seed=17, thin=20,
                                tables=tables)
    stat, pval, _ = mcmc.chi_square_vs_exact(graph, ids, tables=tables)
    assert pval > 0.01
    # bridge occupation frequency against the exact marginal
    dist = mcmc.exact_distribution(graph, tables=tables)
    exact_on = sum(p for cid, p in dist.items()
                   if (tables.decode_id(cid) >= 4).any())
    on = np.mean([(tables.decode_id(i) >= 4).any() for i in ids])
    assert exact_on > 0.01
    assert abs(on - exact_on) < 0.01


def test_random_weight_bridge_chain(rng):
    spec = random_cell_spec(rng)
    graph = dl.build_graph(spec, 1, lam=0.2)
    tables = mcmc.MoveTables(graph)
    _, ids, _ = mcmc.run_serial(graph, 150_000, seed=23, thin=15,
                                tables=tables)
    _, pval, _ = mcmc.chi_square_vs_exact(graph, ids, tables=tables)
    assert pval > 0.01


def test_chi_square_flags_wrong_weights(tiny_uniform):
    graph, tables = tiny_uniform
    _, ids, _ = mcmc.run_serial(graph, 100_000, seed=3, thin=10,
                                tables=tables)
    spec = dl.uniform_spec(4)
    for ell in range(1, 9):
        spec.planar_weights[(ell, 2)] = 2.5  # skew all north edges
    skewed = dl.build_graph(spec, 1)
    _, pval, _ = mcmc.chi_square_vs_exact(skewed, ids)
    assert pval < 1e-6


def test_serial_chain_reproducible(tiny_uniform):
    graph, tables = tiny_uniform
    _, a, _ = mcmc.run_serial(graph, 5_000, seed=41, thin=10, tables=tables)
    _, b, _ = mcmc.run_serial(graph, 5_000, seed=41, thin=10, tables=tables)
    _, c, _ = mcmc.run_serial(graph, 5_000, seed=42, thin=10, tables=tables)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_negative_fugacity_rejected():
    graph = dl.build_graph(dl.row_bridge_spec(4), 1, lam=-0.3)
    with pytest.raises(ValueError, match="negative"):
        mcmc.run_serial(graph, 10)


def test_height_path_independence(tiny_uniform):
    graph, tables = tiny_uniform
    direct = mcmc.corridor_path(graph, (0, 0), (2, 2))
    leg_a = mcmc.corridor_path(graph, (0, 0), (0, 2))
    leg_b = mcmc.corridor_path(graph, (0, 2), (2, 2))

    def increment(path, dirv):
        b, j, s = path
        return float(np.sum((dirv[b] == j) * s))

    dist = mcmc.exact_distribution(graph, tables=tables)
    for cid in list(dist)[:80]:
        dirv = tables.decode_id(cid)
        lhs = increment(direct, dirv)
        rhs = increment(leg_a, dirv) + increment(leg_b, dirv)
        assert lhs == pytest.approx(rhs, abs=1e-12)
        assert lhs == pytest.approx(round(lhs), abs=1e-12)  # integers


def test_sampled_heights_match_exact_moments(tiny_uniform):
    graph, tables = tiny_uniform
    probe = mcmc.HeightProbe(graph, (0, 0),
                             [(1, 1), (2, 2), (2, 0), (0, 2), (3, 1)])
    m1, cov = mcmc.exact_height_moments(graph, probe, tables=tables)
    _, ids, _ = mcmc.run_serial(graph, 400_000, seed=5, thin=10,
                                tables=tables)
    hs = np.array([probe.measure(tables.decode_id(i)) for i in ids])
    n_eff = len(ids) / 4.0  # generous autocorrelation allowance
    se_mean = np.sqrt(np.diag(cov) / n_eff)
    assert np.all(np.abs(hs.mean(axis=0) - m1) < 5 * se_mean)
    se_var = np.diag(cov) * np.sqrt(2.0 / n_eff)
    assert np.all(np.abs(hs.var(axis=0) - np.diag(cov)) < 5 * se_var)


def test_exact_height_moments_need_lattice_measure():
    graph = dl.build_graph(dl.row_bridge_spec(4), 1, lam=0.3)
    probe = mcmc.HeightProbe(graph, (0, 0), [(2, 2)])
    with pytest.raises(DimensionMismatch):
        mcmc.exact_height_moments(graph, probe)


def test_vectorized_heights_match_exact_torus_moments():
    # medium torus: no enumeration, but the sector-weighted Kasteleyn
    # inverses give the exact variance of every height difference
    spec = dl.anisotropic_spec(4, west=1.3)
    L = 16
    graph = dl.build_graph(spec, L)
    base = divmod(graph.cell_corner_face(L // 2, L // 2), graph.n)
    targets = [(2, 0), (0, 2), (2, 2), (3, 0)]
    faces = [divmod(graph.cell_corner_face(L // 2 + a, L // 2 + b),
                    graph.n) for a, b in targets]
    probe = mcmc.HeightProbe(graph, base, faces)

    eids = sorted({4 * int(b) + int(j)
                   for b, j in zip(probe._b, probe._j)})
    pos = {e: i for i, e in enumerate(eids)}
    _, cov = kasteleyn.edge_moments(graph, eids)
    exact = []
    for t in range(len(targets)):
        s, e = probe._ptr[t], probe._ptr[t + 1]
        idx = [pos[4 * int(b) + int(j)]
               for b, j in zip(probe._b[s:e], probe._j[s:e])]
        sg = probe._s[s:e]
        exact.append(float(sg @ cov[np.ix_(idx, idx)] @ sg))
    exact = np.array(exact)

    tables = mcmc.MoveTables(graph)
    per_chain = []
    for seed in range(4):
        chain = mcmc.CheckerboardChain(graph, seed=100 + seed,
                                       tables=tables, worms_per_sweep=2)
        chain.sweep(400)
        hs = np.empty((800, len(targets)))
        for t in range(len(hs)):
            chain.sweep(4)
            hs[t] = probe.measure(chain.dirv)
        per_chain.append(hs.var(axis=0, ddof=1))
    per_chain = np.array(per_chain)
    est = per_chain.mean(axis=0)
    se = per_chain.std(axis=0, ddof=1) / 2.0
    assert np.all(np.abs(est - exact) < 5 * se)


def test_stiffness_uniform_spec_is_degenerate():
    with pytest.raises(NotLiquidPhase):
        mcmc.estimate_stiffness(dl.uniform_spec(4), 16)


def test_stiffness_insufficient_statistics():
    spec = dl.anisotropic_spec(4, west=1.3)
    with pytest.raises(InsufficientStatistics):
        mcmc.estimate_stiffness(spec, 8, n_chains=2, n_samples=20,
                                thin=1, burn=20)


def test_planar_height_moments_match_enumeration(tiny_uniform):
    graph, tables = tiny_uniform
    probe = mcmc.HeightProbe(graph, (0, 0),
                             [(1, 1), (2, 2), (2, 0), (0, 2), (3, 1)])
    m1_en, cov_en = mcmc.exact_height_moments(graph, probe, tables=tables)
    m1_ka, cov_ka = mcmc.planar_height_moments(graph, probe)
    assert np.abs(m1_ka - m1_en).max() < 1e-10
    assert np.abs(cov_ka - cov_en).max() < 1e-10
