"""Sector expansion of the decorated torus into signed Kasteleyn minors.

Matchings are grouped by which bridges they use (J) and which of the
edges crossed by those bridges they cover (S).  Within one sector the
matching sum is a minor of the lattice matrix with the crossed edges
zeroed, times an overall sign that factorizes over cells.  The sign of
each cell sector is built constructively:

  * delete the crossed edges from a planar patch of the covering lattice
    around the cell and re-walk the face boundaries;
  * re-pair the endpoints of J u S by non-crossing chords drawn inside
    those faces (greedy adjacent pairing along the boundary);
  * orient every chord by the unique arrow that keeps both halves of the
    split face clockwise-odd;
  * collect the chord arrows, the permutation relating the chord pairing
    to the defining edge order, and the basic-orientation signs of the
    covered crossed edges.

Everything sign-like is exact integer arithmetic; floats only enter the
determinants.  The expansion is organised as coefficient tables in the
bridge fugacity, so one pass serves every fugacity value.
"""

import itertools
import logging
import math
import os
from dataclasses import dataclass

import numpy as np

from . import kasteleyn
from .enumeration import _normalize_edge
from .errors import (
    BudgetExceeded,
    DimensionMismatch,
    NotClockwiseOdd,
    PairingImpossible,
    RatioNotUnit,
)
from .lattice import _STEP, black_offsets, white_offsets

logger = logging.getLogger(__name__)

DEFAULT_BUDGET = 10 ** 6


def _resolve_budget(budget):
    if budget is not None:
        return int(budget)
    env = os.environ.get("DIMERLAB_BUDGET")
    return int(env) if env else DEFAULT_BUDGET


def crossed_edges(graph, bridges):
    """Union of the crossing lists of the given bridge instances.

    Returns sorted planar edge ids, de-duplicated.
    """
    out = set()
    for i in bridges:
        if not 0 <= int(i) < graph.n_bridges:
            raise DimensionMismatch(f"bridge index {i} out of range")
        out.update(int(e) for e in graph.bridge_crossings[int(i)])
    return sorted(out)


# ---------------------------------------------------------------------------
# covering-lattice patch around one cell

def _is_black(v):
    return (v[0] + v[1]) % 2 == 0


def _ekey(u, v):
    return (u, v) if u <= v else (v, u)


def _cover_edge_sign(u, v):
    """+1 when the basic orientation points black -> white on edge (u, v).

    Horizontal edges point east; vertical edges point up in even columns
    and down in odd columns (python mod keeps negatives consistent).
    """
    if u[1] == v[1]:
        tail = u if u[0] < v[0] else v
    else:
        lo = u if u[1] < v[1] else v
        hi = v if u[1] < v[1] else u
        tail = lo if lo[0] % 2 == 0 else hi
    return 1 if _is_black(tail) else -1


class CellWindow:
    """Planar patch of the covering lattice around one cell.

    Sites (u1, u2) with -1 <= ui <= m; all lattice edges between them
    except the central-cell copies of ``removed`` (given as canonical
    vertex-pair keys).  Rotation order at every vertex is E, N, W, S.
    """

    def __init__(self, m, removed=()):
        self.m = m
        self.removed = set(removed)
        self.nbrs = {}
        rng_sites = range(-1, m + 1)
        for u1 in rng_sites:
            for u2 in rng_sites:
                u = (u1, u2)
                ring = []
                for j in (1, 2, 3, 4):
                    d1, d2 = _STEP[j]
                    v = (u1 + d1, u2 + d2)
                    if not (-1 <= v[0] <= m and -1 <= v[1] <= m):
                        continue
                    if _ekey(u, v) in self.removed:
                        continue
                    ring.append(v)
                self.nbrs[u] = ring
        self.svals = {}
        for u, ring in self.nbrs.items():
            for v in ring:
                key = _ekey(u, v)
                if key not in self.svals:
                    self.svals[key] = _cover_edge_sign(u, v)
        self._chords = 0

    def interior_faces(self):
        """Boundary walks of all bounded faces, counter-clockwise.

        Each walk is a list of steps (tail, head, edge key).  The outer
        boundary (negative signed area) is dropped.
        """
        visited = set()
        faces = []
        for u in sorted(self.nbrs):
            for v in self.nbrs[u]:
                if (u, v) in visited:
                    continue
                walk = []
                a, b = u, v
                while (a, b) not in visited:
                    visited.add((a, b))
                    walk.append((a, b, _ekey(a, b)))
                    ring = self.nbrs[b]
                    c = ring[(ring.index(a) - 1) % len(ring)]
                    a, b = b, c
                area = 0
                for a, b, _ in walk:
                    area += a[0] * b[1] - b[0] * a[1]
                if area > 0:
                    faces.append(walk)
        return faces

    def new_chord_key(self):
        self._chords += 1
        return ("c", self._chords)


def _cw_odd(walk, svals):
    """Clockwise-odd test of a closed walk given counter-clockwise.

    A step (a -> b) runs against the edge arrow exactly when the arrow
    leaves b; the face is clockwise-odd when the number of such steps is
    odd.
    """
    anti = 0
    for _, b, key in walk:
        s = svals[key]
        if (s == 1) == _is_black(b):
            anti += 1
    return anti % 2 == 1


def extend_orientation(window, walk, slot_a, slot_b):
    """Split a clockwise-odd face by a chord and orient the chord.

    The chord joins the tail vertices of ``slot_a`` and ``slot_b`` (which
    must have opposite colors).  Exactly one arrow direction leaves both
    halves clockwise-odd; its sign (+1 = black -> white) is recorded in
    the window and returned together with the two sub-walks, the one
    containing the remainder of the boundary first.
    """
    if not _cw_odd(walk, window.svals):
        raise NotClockwiseOdd("face to split is not clockwise-odd")
    if slot_a == slot_b:
        raise DimensionMismatch("chord endpoints must be distinct slots")
    walk = walk[slot_a:] + walk[:slot_a]
    q = (slot_b - slot_a) % len(walk)
    a = walk[0][0]
    b = walk[q][0]
    if _is_black(a) == _is_black(b):
        raise DimensionMismatch("chord endpoints must have opposite colors")
    key = window.new_chord_key()
    inner = [(b, a, key)] + walk[:q]
    outer = [(a, b, key)] + walk[q:]
    good = []
    for s in (1, -1):
        window.svals[key] = s
        if _cw_odd(inner, window.svals) and _cw_odd(outer, window.svals):
            good.append(s)
    if len(good) != 1:
        raise NotClockwiseOdd(
            f"chord orientation dichotomy failed ({len(good)} candidates)"
        )
    window.svals[key] = good[0]
    return good[0], outer, inner, key


def pair_face_endpoints(window, walk, unpaired, rng=None):
    """Greedy non-crossing pairing of marked endpoints on one face.

    ``unpaired`` is a mutable set of defect vertices; every chord joins
    two cyclically adjacent marks of opposite colors, is oriented via
    :func:`extend_orientation`, and the search continues on the half
    containing the remaining marks.  Returns chords as
    (black vertex, white vertex, sign) in insertion order.
    """
    chords = []
    while True:
        marks = [i for i, step in enumerate(walk) if step[0] in unpaired]
        if not marks:
            return chords
        cands = []
        nm = len(marks)
        for t in range(nm):
            p, q = marks[t], marks[(t + 1) % nm]
            if p == q:
                continue
            va, vb = walk[p][0], walk[q][0]
            if va == vb or _is_black(va) == _is_black(vb):
                continue
            cands.append((p, q))
        if not cands:
            return chords
        if rng is None:
            p, q = cands[0]
        else:
            p, q = cands[int(rng.integers(len(cands)))]
        va, vb = walk[p][0], walk[q][0]
        sigma, walk, _, _ = extend_orientation(window, walk, p, q)
        if _is_black(va):
            chords.append((va, vb, sigma))
        else:
            chords.append((vb, va, sigma))
        unpaired.discard(va)
        unpaired.discard(vb)


def _chords_for_sector(m, removed_keys, defects, rng=None):
    """Non-crossing re-pairing of the defect vertices with arrow signs."""
    window = CellWindow(m, removed_keys)
    unpaired = set(defects)
    chords = []
    for walk in window.interior_faces():
        if not unpaired:
            break
        chords.extend(pair_face_endpoints(window, walk, unpaired, rng=rng))
    if unpaired:
        raise PairingImpossible(
            f"unpaired defect vertices remain: {sorted(unpaired)}"
        )
    return chords


# ---------------------------------------------------------------------------
# per-cell sectors and their signs

@dataclass(frozen=True)
class CellSector:
    """One admissible cell sector with its exact sign.

    ``bridges`` are indices into the cell's bridge list, ``crossed`` the
    covered crossed edges as (type, direction) keys.  ``epsilon`` is the
    full sector sign; ``pairing_sign`` has the basic-orientation signs of
    the covered crossed edges divided back out (the combination that
    multiplies plain edge weights in the expansion).
    """

    bridges: tuple
    crossed: tuple
    epsilon: int
    pairing_sign: int


def _bridge_endpoints(spec, k):
    boffs = black_offsets(spec.m)
    woffs = white_offsets(spec.m)
    br = spec.bridges[k]
    return boffs[br.bl - 1], woffs[br.wh - 1]


def _crossed_endpoints(spec, ell, j):
    boffs = black_offsets(spec.m)
    b = boffs[ell - 1]
    d1, d2 = _STEP[j]
    return b, (b[0] + d1, b[1] + d2)


def _cell_crossings(spec, bridges):
    out = set()
    for k in bridges:
        out.update(spec.bridges[k].crossings)
    return sorted(out)


def _sector_sign(spec, bridges, crossed, rng=None):
    """(epsilon, pairing_sign) for one vertex-disjoint cell sector."""
    if not bridges and not crossed:
        return 1, 1
    removed = set()
    for ell, j in _cell_crossings(spec, bridges):
        b, w = _crossed_endpoints(spec, ell, j)
        removed.add(_ekey(b, w))
    ref_word = []
    for k in bridges:
        b, w = _bridge_endpoints(spec, k)
        ref_word += [b, w]
    for ell, j in crossed:
        b, w = _crossed_endpoints(spec, ell, j)
        ref_word += [b, w]
    defects = set(ref_word)
    chords = _chords_for_sector(spec.m, removed, defects, rng=rng)
    chord_word = []
    sigma_prod = 1
    for b, w, sigma in chords:
        chord_word += [b, w]
        sigma_prod *= sigma
    pos = {v: i for i, v in enumerate(ref_word)}
    perm = np.array([pos[v] for v in chord_word], dtype=np.int64)
    pi = kasteleyn.perm_parity(perm)
    pairing_sign = pi * sigma_prod
    s_crossed = 1
    for ell, j in crossed:
        b, w = _crossed_endpoints(spec, ell, j)
        s_crossed *= _cover_edge_sign(b, w)
    return pairing_sign * s_crossed, pairing_sign


def _spec_structure_key(spec):
    return (
        spec.m,
        tuple((br.bl, br.wh, tuple(br.crossings)) for br in spec.bridges),
    )


_SECTOR_CACHE = {}


def cell_sectors(spec):
    """All vertex-disjoint sectors of one cell, keyed (jmask, crossed).

    The table depends only on the cell structure, never on weights, so it
    is cached per structure.
    """
    key = _spec_structure_key(spec)
    if key in _SECTOR_CACHE:
        return _SECTOR_CACHE[key]
    table = {}
    nb = len(spec.bridges)
    for jmask in range(1 << nb):
        bridges = tuple(k for k in range(nb) if jmask >> k & 1)
        verts = []
        for k in bridges:
            b, w = _bridge_endpoints(spec, k)
            verts += [b, w]
        if len(set(verts)) < len(verts):
            continue
        pool = _cell_crossings(spec, bridges)
        for r in range(len(pool) + 1):
            for crossed in itertools.combinations(pool, r):
                cverts = list(verts)
                for ell, j in crossed:
                    b, w = _crossed_endpoints(spec, ell, j)
                    cverts += [b, w]
                if len(set(cverts)) < len(cverts):
                    continue
                eps, psign = _sector_sign(spec, bridges, crossed)
                table[(jmask, crossed)] = CellSector(
                    bridges=bridges, crossed=crossed,
                    epsilon=eps, pairing_sign=psign,
                )
    _SECTOR_CACHE[key] = table
    logger.debug("cell sector table built: %d sectors", len(table))
    return table


def epsilon_sign(spec, bridges, crossed, rng=None):
    """Sector sign of one cell sector, by the constructive pipeline.

    ``bridges``: cell bridge indices, ``crossed``: (type, direction) keys
    of covered crossed edges.  ``rng`` re-runs the pairing with random
    admissible choices instead of the cached deterministic ones (the
    result must not change; used by the invariance tests).
    """
    bridges = tuple(sorted(int(k) for k in bridges))
    crossed = tuple(sorted(tuple(c) for c in crossed))
    pool = set(_cell_crossings(spec, bridges))
    if not set(crossed) <= pool:
        raise DimensionMismatch("crossed edges not covered by the bridges")
    if rng is not None:
        eps, _ = _sector_sign(spec, bridges, crossed, rng=rng)
        return eps
    table = cell_sectors(spec)
    try:
        return table[(sum(1 << k for k in bridges), crossed)].epsilon
    except KeyError:
        raise DimensionMismatch(
            "sector vanishes identically (edges share a vertex)"
        ) from None


# ---------------------------------------------------------------------------
# global expansion into signed minors

def _instance_index(graph, x1, x2, k):
    return (x1 * graph.L + x2) * len(graph.spec.bridges) + k


def _cell_site(graph, x1, x2, offset):
    u1 = x1 * graph.m + offset[0]
    u2 = x2 * graph.m + offset[1]
    return int(graph.color_index[u1, u2])


def _cell_edge_eid(graph, x1, x2, ell, j):
    boffs = black_offsets(graph.m)
    b = _cell_site(graph, x1, x2, boffs[ell - 1])
    return 4 * b + (j - 1)


def _order_counts(table, n_bridges):
    counts = np.zeros(n_bridges + 1, dtype=np.int64)
    for (jmask, _crossed) in table:
        counts[bin(jmask).count("1")] += 1
    return counts


def _global_budget_check(counts, n_cells, max_order, budget):
    poly = np.array([1], dtype=object)
    for _ in range(n_cells):
        poly = np.convolve(poly, counts.astype(object))
        if max_order is not None:
            poly = poly[: max_order + 1]
    total = int(poly.sum())
    if total > budget:
        raise BudgetExceeded(
            f"{total} global sectors exceed the budget of {budget}; "
            "raise it or lower max_order"
        )
    return total


def _polymer_coeffs(graph, queries, max_order=None, budget=None):
    """Fugacity-power coefficient table of the sector expansion.

    ``queries[q]`` is a tuple of extra insertions, each either
    ``("pair", black, white)`` (a bare source pair appended to the minor)
    or ``("edge", token)`` (a dimer indicator, token as in the
    enumeration module).  Returns an array ``c[q, k]`` with the value of
    query q equal to ``sum_k c[q, k] * lam**k``; values are normalized by
    the reference-matching sign but not divided by Z.
    """
    spec = graph.spec
    table = cell_sectors(spec)
    cells = [(x1, x2) for x1 in range(graph.L) for x2 in range(graph.L)]
    n_cells = len(cells)
    counts = _order_counts(table, len(spec.bridges))
    budget = _resolve_budget(budget)
    total = _global_budget_check(counts, n_cells, max_order, budget)
    logger.debug("sector sum over %d global sectors, %d queries",
                 total, len(queries))

    max_k = len(spec.bridges) * n_cells
    if max_order is not None:
        max_k = min(max_k, int(max_order))
    coeffs = np.zeros((len(queries), max_k + 1), dtype=np.float64)
    s0 = kasteleyn.reference_sign(graph)
    thetas = kasteleyn.THETAS
    cth = [kasteleyn.theta_coefficient(t) for t in thetas]
    evals = [kasteleyn.edge_values(graph, t) for t in thetas]

    by_jmask = {}
    for (jmask, _crossed), sec in table.items():
        by_jmask.setdefault(jmask, []).append(sec)
    jmasks = sorted(by_jmask)

    for jcombo in itertools.product(jmasks, repeat=n_cells):
        order = sum(bin(jm).count("1") for jm in jcombo)
        if max_order is not None and order > max_order:
            continue
        zeroed = []
        jset = set()
        for (x1, x2), jm in zip(cells, jcombo):
            for k in range(len(spec.bridges)):
                if jm >> k & 1:
                    inst = _instance_index(graph, x1, x2, k)
                    jset.add(inst)
                    zeroed.extend(graph.bridge_crossings[inst])
        pj = set(zeroed)
        kmats = [kasteleyn.kasteleyn_matrix(graph, t, zeroed) for t in thetas]

        for scombo in itertools.product(*[by_jmask[jm] for jm in jcombo]):
            sign = 1
            weight = 1.0
            par = 0
            rows, cols = [], []
            sglobal = set()
            for (x1, x2), sec in zip(cells, scombo):
                sign *= sec.pairing_sign
                par += len(sec.bridges) + len(sec.crossed)
                for k in sec.bridges:
                    inst = _instance_index(graph, x1, x2, k)
                    weight *= graph.bridge_weight[inst]
                    rows.append(int(graph.bridge_black[inst]))
                    cols.append(int(graph.bridge_white[inst]))
                for ell, j in sec.crossed:
                    eid = _cell_edge_eid(graph, x1, x2, ell, j)
                    sglobal.add(eid)
                    b, r = divmod(eid, 4)
                    weight *= graph.edge_weight[b, r]
                    rows.append(b)
                    cols.append(int(graph.white_neighbor[b, r]))
            pre = sign * (-1) ** par * weight

            for qi, query in enumerate(queries):
                rr, cc = list(rows), list(cols)
                dead = False
                extra = []  # theta-dependent scalar factors, as (b, r)
                for ins in query:
                    if ins[0] == "pair":
                        rr.append(int(ins[1]))
                        cc.append(int(ins[2]))
                        continue
                    token = ins[1]
                    if token[0] == "b":
                        if int(token[1]) not in jset:
                            dead = True
                            break
                        continue
                    eid = int(token[1])
                    if eid in sglobal:
                        continue
                    if eid in pj:
                        dead = True
                        break
                    b, r = divmod(eid, 4)
                    rr.append(b)
                    cc.append(int(graph.white_neighbor[b, r]))
                    extra.append((b, r))
                if dead:
                    continue
                acc = 0.0
                for ti in range(4):
                    scal = 1.0
                    for b, r in extra:
                        scal *= -evals[ti][b, r]
                    if scal == 0.0:
                        continue
                    acc += 0.5 * cth[ti] * scal * kasteleyn.signed_minor(
                        kmats[ti], rr, cc)
                coeffs[qi, order] += pre * acc / s0
    return coeffs


def _lam_powers(lam, n):
    return float(lam) ** np.arange(n)


def nonplanar_partition(graph, lam=None, max_order=None, budget=None):
    """Partition function from the sector expansion.

    ``max_order`` truncates the expansion at that total bridge count
    (perturbative mode); the exact value needs no truncation.
    """
    if lam is None:
        lam = graph.lam
    coeffs = _polymer_coeffs(graph, [()], max_order=max_order, budget=budget)
    return float(coeffs[0] @ _lam_powers(lam, coeffs.shape[1]))


def partition_coefficients(graph, max_order=None, budget=None):
    """Coefficients of Z as a polynomial in the bridge fugacity."""
    coeffs = _polymer_coeffs(graph, [()], max_order=max_order, budget=budget)
    return coeffs[0].copy()


def edge_occupation(graph, e, lam=None, max_order=None, budget=None):
    """Occupation probability of one edge from the sector expansion."""
    if lam is None:
        lam = graph.lam
    token = _normalize_edge(graph, e)
    coeffs = _polymer_coeffs(graph, [(), (("edge", token),)],
                             max_order=max_order, budget=budget)
    pw = _lam_powers(lam, coeffs.shape[1])
    z = float(coeffs[0] @ pw)
    return float(coeffs[1] @ pw) / z


def nonplanar_observables(graph, e1, e2, lam=None, max_order=None,
                          budget=None):
    """((P(e1), P(e2)), truncated correlation) from the sector expansion.

    Coincident edges reduce to P(1-P), matching the enumeration oracle.
    """
    if lam is None:
        lam = graph.lam
    t1 = _normalize_edge(graph, e1)
    t2 = _normalize_edge(graph, e2)
    if t1 == t2:
        p = edge_occupation(graph, e1, lam=lam, max_order=max_order,
                            budget=budget)
        return (p, p), p * (1.0 - p)
    q1 = (("edge", t1),)
    q2 = (("edge", t2),)
    coeffs = _polymer_coeffs(graph, [(), q1, q2, q1 + q2],
                             max_order=max_order, budget=budget)
    pw = _lam_powers(lam, coeffs.shape[1])
    z, n1, n2, n12 = (float(c @ pw) for c in coeffs)
    p1, p2 = n1 / z, n2 / z
    return (p1, p2), n12 / z - p1 * p2


def _site_edges(graph, site, color):
    """Edge tokens incident to one site of the given color."""
    out = []
    if color == "black":
        for r in range(4):
            out.append(("p", 4 * site + r))
        for i in range(graph.n_bridges):
            if int(graph.bridge_black[i]) == site:
                out.append(("b", i))
    else:
        eids = np.nonzero(graph.white_neighbor == site)
        for b, r in zip(*eids):
            out.append(("p", int(4 * b + r)))
        for i in range(graph.n_bridges):
            if int(graph.bridge_white[i]) == site:
                out.append(("b", i))
    return out


def ward_residual(graph, x, y, z, types=(1, 1, 1), lam=None, max_order=None,
                  budget=None):
    """Residual of the vertex gauge identity with one source pair.

    ``x``, ``y``, ``z`` are cell coordinates; ``types`` = (tx, ty, tz)
    picks the black vertex of type tx at cell x (and its white twin for
    the mirrored identity), the white source of type ty at cell y, and
    the black source of type tz at cell z.  For every vertex v the
    truncated correlations of the source pair with the dimer indicators
    at v sum to the negative of the bare pair correlation whenever v
    carries the matching source, and to zero otherwise; the maximum
    absolute violation over the black and white identities is returned.
    """
    if lam is None:
        lam = graph.lam
    tx, ty, tz = types
    boffs = black_offsets(graph.m)
    woffs = white_offsets(graph.m)
    bx = _cell_site(graph, x[0], x[1], boffs[tx - 1])
    wx = _cell_site(graph, x[0], x[1], woffs[tx - 1])
    wy = _cell_site(graph, y[0], y[1], woffs[ty - 1])
    bz = _cell_site(graph, z[0], z[1], boffs[tz - 1])
    pair = ("pair", bz, wy)

    black_edges = _site_edges(graph, bx, "black")
    white_edges = _site_edges(graph, wx, "white")
    queries = [(), (pair,)]
    for tok in black_edges + white_edges:
        queries.append((("edge", tok),))
        queries.append((("edge", tok), pair))
    coeffs = _polymer_coeffs(graph, queries, max_order=max_order,
                             budget=budget)
    pw = _lam_powers(lam, coeffs.shape[1])
    vals = coeffs @ pw
    d, dzy = vals[0], vals[1]
    if d == 0.0:
        raise DimensionMismatch("partition function vanishes")
    g_pair = dzy / d

    def identity(tokens, offset, delta):
        acc = 0.0
        for t in range(len(tokens)):
            n_e = vals[offset + 2 * t]
            n_ezy = vals[offset + 2 * t + 1]
            acc += n_ezy / d - (n_e / d) * g_pair
        return acc + (g_pair if delta else 0.0)

    res_black = identity(black_edges, 2, bx == bz)
    res_white = identity(white_edges, 2 + 2 * len(black_edges), wx == wy)
    return max(abs(res_black), abs(res_white))


# ---------------------------------------------------------------------------
# the defining identity as an oracle (enumeration-backed)

def epsilon_sign_oracle(graph, bridges, crossed, rtol=1e-9, table=None):
    """Sector sign extracted from the matching sums themselves.

    ``graph`` must be small enough for exact enumeration.  The restricted
    matching sum of the sector is divided by the sector's signed-minor
    value with the sign left out; the quotient must be +1 or -1, which is
    the sector sign.  A quotient away from the unit circle signals
    inconsistent crossing data.  Pass a precomputed sector ``table`` (from
    :func:`dimerlab.enumeration.enumerate_sectors`) to amortize the sweep
    over many sectors of the same graph.
    """
    from .enumeration import restricted_sum

    bridges = sorted(int(i) for i in bridges)
    crossed_eids = sorted(int(e) for e in crossed)
    if table is None:
        num = restricted_sum(graph, bridges, crossed_eids, lam=1.0)
    else:
        if not set(crossed_eids) <= set(crossed_edges(graph, bridges)):
            raise DimensionMismatch(
                "crossed edges not covered by the chosen bridges")
        slot = {eid: t for t, eid in enumerate(table.crossed_eids)}
        jmask = sum(1 << i for i in bridges)
        smask = sum(1 << slot[eid] for eid in crossed_eids)
        num = table.restricted(jmask, smask)

    pj = crossed_edges(graph, bridges)
    rows, cols = [], []
    weight = 1.0
    for i in bridges:
        rows.append(int(graph.bridge_black[i]))
        cols.append(int(graph.bridge_white[i]))
        weight *= graph.bridge_weight[i]
    for eid in crossed_eids:
        b, r = divmod(eid, 4)
        rows.append(b)
        cols.append(int(graph.white_neighbor[b, r]))
    par = (-1) ** (len(bridges) + len(crossed_eids))
    s0 = kasteleyn.reference_sign(graph)
    acc = 0.0
    for t in kasteleyn.THETAS:
        kvals = kasteleyn.edge_values(graph, t)
        scal = 1.0
        for eid in crossed_eids:
            b, r = divmod(eid, 4)
            scal *= kvals[b, r]
        km = kasteleyn.kasteleyn_matrix(graph, t, pj)
        acc += 0.5 * kasteleyn.theta_coefficient(t) * scal * \
            kasteleyn.signed_minor(km, rows, cols)
    den = par * weight * acc / s0
    if den == 0.0 or num == 0.0:
        raise RatioNotUnit(
            f"sector value degenerate (restricted={num}, minor={den})"
        )
    ratio = num / den
    if abs(abs(ratio) - 1.0) > rtol:
        raise RatioNotUnit(f"sector quotient {ratio} is not a unit")
    return 1 if ratio > 0 else -1


# ---------------------------------------------------------------------------
# cell potential

@dataclass
class CellPotential:
    """Formal even polynomial generating one cell's sector weights.

    ``f_terms`` maps frozensets of edge symbols to coefficients (the
    nonconstant part of 1 + F); ``v_terms`` is its formal logarithm.
    Edge symbols are ("b", k) for bridges and ("s", ell, j) for crossed
    edges; the symbols carry the edge weights, so coefficients are pure
    signs and log-series rationals.
    """

    f_terms: dict
    v_terms: dict
    endpoints: dict


def _poly_mul(a, b, endpoints):
    out = {}
    for ka, ca in a.items():
        va = set()
        for e in ka:
            va.update(endpoints[e])
        for kb, cb in b.items():
            shared = False
            for e in kb:
                p, q = endpoints[e]
                if p in va or q in va:
                    shared = True
                    break
            if shared:
                continue
            key = ka | kb
            out[key] = out.get(key, 0.0) + ca * cb
    return {k: v for k, v in out.items() if v != 0.0}


def cell_potential(spec):
    """Log of the cell's sector generating polynomial.

    The series for log(1 + F) truncates because repeated monomials share
    vertices and vanish.
    """
    table = cell_sectors(spec)
    endpoints = {}
    for k in range(len(spec.bridges)):
        endpoints[("b", k)] = _bridge_endpoints(spec, k)
    f_terms = {}
    for (jmask, crossed), sec in table.items():
        if jmask == 0 and not crossed:
            continue
        mono = set()
        for k in sec.bridges:
            mono.add(("b", k))
        for ell, j in crossed:
            endpoints[("s", ell, j)] = _crossed_endpoints(spec, ell, j)
            mono.add(("s", ell, j))
        f_terms[frozenset(mono)] = float(sec.epsilon)
    v_terms = {}
    power = dict(f_terms)
    n = 1
    while power:
        coef = (-1.0) ** (n - 1) / n
        for k, v in power.items():
            v_terms[k] = v_terms.get(k, 0.0) + coef * v
        power = _poly_mul(power, f_terms, endpoints)
        n += 1
    v_terms = {k: v for k, v in v_terms.items() if v != 0.0}
    return CellPotential(f_terms=f_terms, v_terms=v_terms,
                         endpoints=endpoints)


def exp_terms(potential):
    """Re-exponentiated potential as formal terms (should equal 1 + F)."""
    out = {frozenset(): 1.0}
    power = {frozenset(): 1.0}
    n = 1
    while True:
        power = _poly_mul(power, potential.v_terms, potential.endpoints)
        if not power:
            break
        for k, v in power.items():
            out[k] = out.get(k, 0.0) + v / float(math.factorial(n))
        n += 1
    return {k: v for k, v in out.items() if abs(v) > 1e-15}


# ---------------------------------------------------------------------------
# exports

def export_sector_signs(graph, path):
    """Write the per-cell sector sign table as CSV.

    Columns: cell index (x1 * L + x2), bridge mask, crossed-edge mask
    (bits in the order of the cell's sorted crossing list), sign.
    """
    import csv

    table = cell_sectors(graph.spec)
    pool = _cell_crossings(graph.spec, range(len(graph.spec.bridges)))
    slot = {key: t for t, key in enumerate(pool)}
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["cell", "bridge_mask", "crossed_mask", "epsilon"])
        for x1 in range(graph.L):
            for x2 in range(graph.L):
                cell = x1 * graph.L + x2
                for (jmask, crossed), sec in sorted(table.items()):
                    smask = 0
                    for key in crossed:
                        smask |= 1 << slot[key]
                    wr.writerow([cell, jmask, smask, sec.epsilon])
    logger.info("sector sign table written to %s", path)
