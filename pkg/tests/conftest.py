import logging

import numpy as np
import pytest

import dimerlab as dl
from dimerlab import enumeration as en

logging.getLogger("dimerlab").setLevel(logging.WARNING)


@pytest.fixture
def rng():
    return np.random.default_rng(20260819)


def random_cell_spec(rng, m=4):
    """Random valid cell: jittered weights plus the standard row bridge.

    The bridge geometry (and hence its crossing list) is kept as
    constructed -- the crossing list must describe an actual drawing --
    while every weight is drawn at random.
    """
    spec = dl.row_bridge_spec(m)
    ntypes = m * m // 2
    for ell in range(1, ntypes + 1):
        for j in range(1, 5):
            spec.planar_weights[(ell, j)] = float(rng.uniform(0.6, 1.7))
    for br in spec.bridges:
        br.weight = float(rng.uniform(0.5, 1.5))
    violations = dl.validate_spec(spec)
    assert violations == [], violations
    return spec


@pytest.fixture(scope="session")
def sector_cache():
    """Session cache of sector tables keyed by (spec-id, L)."""
    cache = {}

    def get(key, graph):
        if key not in cache:
            cache[key] = en.enumerate_sectors(graph)
        return cache[key]

    return get


def adjudicate_sectors(graph, table):
    """Compare the constructive sign of every populated sector of an
    exact sector table against the enumeration-backed oracle.

    Returns (sectors checked, mismatches); the factorization over cells
    is exercised implicitly because the constructive side is assembled
    as a product of per-cell signs.
    """
    from dimerlab import grassmann as gr

    ctable = gr.cell_sectors(graph.spec)
    nk = len(graph.spec.bridges)
    slot_eid = table.crossed_eids
    checked = mismatches = 0
    for (jmask, smask), _val in sorted(table.sums.items()):
        if jmask == 0:
            continue
        insts = [i for i in range(graph.n_bridges) if jmask >> i & 1]
        eids = [slot_eid[t] for t in range(len(slot_eid)) if smask >> t & 1]
        cell_j, cell_s = {}, {}
        for i in insts:
            x1, x2 = map(int, graph.bridge_cell[i])
            cell_j.setdefault((x1, x2), []).append(i % nk)
        for eid in eids:
            b = eid // 4
            u1, u2 = map(int, graph.black_coord[b])
            key = (u1 // graph.m, u2 // graph.m)
            cell_s.setdefault(key, []).append(
                (int(graph.black_type[b]), eid % 4 + 1))
        sign = 1
        for cell in set(cell_j) | set(cell_s):
            jm = sum(1 << k for k in cell_j.get(cell, []))
            cr = tuple(sorted(cell_s.get(cell, [])))
            sign *= ctable[(jm, cr)].epsilon
        oracle = gr.epsilon_sign_oracle(graph, insts, eids, table=table)
        checked += 1
        if oracle != sign:
            mismatches += 1
    return checked, mismatches
