"""Exact enumeration of perfect matchings on small decorated tori.

Backtracking over black sites in index order with a bitmask of used white
sites.  A single sweep accumulates, for every complete matching, its
weight into a table indexed by (set of bridge edges used, set of crossed
lattice edges used); everything downstream -- partition functions at any
bridge fugacity, restricted sector sums, contracted-edge derivatives --
is a cheap reduction of that table, so the expensive sweep runs once.

Hard caps: at most ``MAX_SITES`` sites (the white bitmask must fit one
machine word with room to spare), and the sector table must fit in
``2**MASK_BITS_CAP`` bins.
"""

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import DimensionMismatch, TooLarge

logger = logging.getLogger(__name__)

MAX_SITES = 100
MASK_BITS_CAP = 22


@njit(cache=True, nogil=True)
def _sweep(order, estart, ewhite, eweight, esbit, ejbit, init_used, shift,
           prune_mask, acc):
    """Iterative backtracking sweep; returns the number of leaves.

    ``prune_mask[d]`` is a set of whites that must already be matched when
    depth ``d`` is entered (whites no later black can reach); subtrees
    violating it are cut immediately.
    """
    n_active = order.shape[0]
    if n_active == 0:
        acc[0] += 1.0
        return np.int64(1)
    ci = np.empty(n_active, dtype=np.int64)
    wbit = np.zeros(n_active, dtype=np.uint64)
    prod = np.empty(n_active + 1, dtype=np.float64)
    jm = np.empty(n_active + 1, dtype=np.uint64)
    sm = np.empty(n_active + 1, dtype=np.uint64)
    prod[0] = 1.0
    jm[0] = np.uint64(0)
    sm[0] = np.uint64(0)
    used = init_used
    leaves = np.int64(0)
    d = 0
    ci[0] = estart[order[0]]
    while d >= 0:
        b = order[d]
        i = ci[d]
        if i >= estart[b + 1]:
            d -= 1
            if d >= 0:
                used &= ~wbit[d]
                ci[d] += 1
            continue
        bit = np.uint64(1) << np.uint64(ewhite[i])
        if used & bit:
            ci[d] += 1
            continue
        prod[d + 1] = prod[d] * eweight[i]
        jm[d + 1] = jm[d] | ejbit[i]
        sm[d + 1] = sm[d] | esbit[i]
        if d + 1 == n_active:
            acc[np.int64((jm[d + 1] << np.uint64(shift)) | sm[d + 1])] += prod[d + 1]
            leaves += 1
            ci[d] += 1
            continue
        nxt = used | bit
        if (nxt & prune_mask[d + 1]) != prune_mask[d + 1]:
            ci[d] += 1
            continue
        used = nxt
        wbit[d] = bit
        d += 1
        ci[d] = estart[order[d]]
    return leaves


@njit(cache=True, nogil=True)
def _sweep_pair(order, estart, ewhite, eweight, ejbit, init_used,
                prune_mask, coef1, coef2, acc):
    """Sweep accumulating joint moments of two signed edge sums.

    For every complete matching of weight ``w`` that uses ``k`` bridge
    slots, adds ``w * (1, D1, D2, D1*D2)`` into ``acc[k, :]`` where
    ``Di`` is the sum of ``coefi`` over the chosen slots.  Fugacity
    powers are applied afterwards, so one sweep serves every lam.
    """
    n_active = order.shape[0]
    if n_active == 0:
        acc[0, 0] += 1.0
        return np.int64(1)
    ci = np.empty(n_active, dtype=np.int64)
    wbit = np.zeros(n_active, dtype=np.uint64)
    prod = np.empty(n_active + 1, dtype=np.float64)
    kb = np.empty(n_active + 1, dtype=np.int64)
    d1 = np.empty(n_active + 1, dtype=np.float64)
    d2 = np.empty(n_active + 1, dtype=np.float64)
    prod[0] = 1.0
    kb[0] = 0
    d1[0] = 0.0
    d2[0] = 0.0
    used = init_used
    leaves = np.int64(0)
    d = 0
    ci[0] = estart[order[0]]
    while d >= 0:
        b = order[d]
        i = ci[d]
        if i >= estart[b + 1]:
            d -= 1
            if d >= 0:
                used &= ~wbit[d]
                ci[d] += 1
            continue
        bit = np.uint64(1) << np.uint64(ewhite[i])
        if used & bit:
            ci[d] += 1
            continue
        prod[d + 1] = prod[d] * eweight[i]
        kb[d + 1] = kb[d] + (1 if ejbit[i] != np.uint64(0) else 0)
        d1[d + 1] = d1[d] + coef1[i]
        d2[d + 1] = d2[d] + coef2[i]
        if d + 1 == n_active:
            w = prod[d + 1]
            k = kb[d + 1]
            acc[k, 0] += w
            acc[k, 1] += w * d1[d + 1]
            acc[k, 2] += w * d2[d + 1]
            acc[k, 3] += w * d1[d + 1] * d2[d + 1]
            leaves += 1
            ci[d] += 1
            continue
        nxt = used | bit
        if (nxt & prune_mask[d + 1]) != prune_mask[d + 1]:
            ci[d] += 1
            continue
        used = nxt
        wbit[d] = bit
        d += 1
        ci[d] = estart[order[d]]
    return leaves


def _edge_csr(graph, include_bridges=True, unit_weights=False):
    """Flatten the adjacency into CSR arrays for the sweep.

    Edge order per black: the four lattice directions, then any bridges
    anchored at that black.  Returns the CSR arrays together with the
    global list of crossed edge ids (the bit slots of the sector table).
    """
    nb = graph.n_black
    crossed = sorted({eid for cr in graph.bridge_crossings for eid in cr})
    slot = {eid: t for t, eid in enumerate(crossed)}
    bridges_at = [[] for _ in range(nb)]
    if include_bridges:
        for i in range(graph.n_bridges):
            bridges_at[graph.bridge_black[i]].append(i)

    estart = np.zeros(nb + 1, dtype=np.int64)
    ewhite, eweight, esbit, ejbit = [], [], [], []
    for b in range(nb):
        for j in range(4):
            eid = 4 * b + j
            ewhite.append(graph.white_neighbor[b, j])
            eweight.append(1.0 if unit_weights else graph.edge_weight[b, j])
            esbit.append(1 << slot[eid] if eid in slot else 0)
            ejbit.append(0)
        for i in bridges_at[b]:
            ewhite.append(graph.bridge_white[i])
            eweight.append(1.0 if unit_weights else graph.bridge_weight[i])
            esbit.append(0)
            ejbit.append(1 << i)
        estart[b + 1] = len(ewhite)
    return (
        estart,
        np.array(ewhite, dtype=np.int64),
        np.array(eweight, dtype=np.float64),
        np.array(esbit, dtype=np.uint64),
        np.array(ejbit, dtype=np.uint64),
        crossed,
    )


@dataclass
class SectorTable:
    """Sector-resolved matching sums.

    ``sums[(jmask, smask)]`` is the total weight (bridge fugacity stripped,
    bare bridge weights included) of matchings using exactly the bridges
    in ``jmask`` and whose overlap with the edges crossed by those bridges
    is ``smask``.  ``crossed_eids`` lists the global bit slots of the
    smask; ``bridge_cross_masks[i]`` is the slot mask crossed by bridge i.
    """

    sums: dict
    crossed_eids: list
    n_bridges: int
    bridge_cross_masks: list
    leaves: int

    def partition_function(self, lam):
        z = 0.0
        for (jmask, _), v in sorted(self.sums.items()):
            z += v * lam ** int(bin(jmask).count("1"))
        return z

    def restricted(self, jmask, smask):
        """Total weight of matchings in one sector (no fugacity power)."""
        return self.sums.get((jmask, smask), 0.0)


def _prune_table(n_black, order, estart, ewhite, removed_whites=()):
    """Frontier-pruning table: once every black adjacent to a white has
    made its choice, that white must already be matched; ``table[d]`` is
    the set of whites required before entering depth ``d``."""
    n_active = order.shape[0]
    last = np.full(n_black, -1, dtype=np.int64)
    for d, b in enumerate(order):
        for i in range(estart[b], estart[b + 1]):
            w = ewhite[i]
            if d > last[w]:
                last[w] = d
    expire = np.zeros(n_active + 2, dtype=np.uint64)
    for w in range(n_black):
        if w in removed_whites:
            continue
        d_req = min(int(last[w]) + 1, n_active + 1)
        expire[d_req] |= np.uint64(1) << np.uint64(w)
    table = np.zeros(n_active + 1, dtype=np.uint64)
    run = np.uint64(0)
    for d in range(n_active + 1):
        run |= expire[d]
        table[d] = run
    return table


def _check_size(graph):
    if graph.n * graph.n > MAX_SITES:
        raise TooLarge(
            f"exact enumeration capped at {MAX_SITES} sites, "
            f"got {graph.n * graph.n}"
        )


def enumerate_sectors(graph, removed_blacks=(), removed_whites=(),
                      include_bridges=True, unit_weights=False):
    """Run the sweep once and return the sector table.

    ``removed_blacks`` / ``removed_whites`` delete sites before the sweep
    (used for contracted-edge identities); their incident edges simply
    never match.
    """
    _check_size(graph)
    estart, ewhite, eweight, esbit, ejbit, crossed = _edge_csr(
        graph, include_bridges=include_bridges, unit_weights=unit_weights
    )
    n_bridges = graph.n_bridges if include_bridges else 0
    shift = len(crossed)
    bits = shift + n_bridges
    if bits > MASK_BITS_CAP:
        raise TooLarge(
            f"sector table needs {bits} mask bits, cap is {MASK_BITS_CAP}"
        )
    removed_blacks = set(int(b) for b in removed_blacks)
    removed_whites = set(int(w) for w in removed_whites)
    if len(removed_blacks) != len(removed_whites):
        raise DimensionMismatch(
            "removed blacks and whites must balance for perfect matchings"
        )
    order = np.array(
        [b for b in range(graph.n_black) if b not in removed_blacks],
        dtype=np.int64,
    )
    init_used = np.uint64(0)
    for w in removed_whites:
        init_used |= np.uint64(1) << np.uint64(w)
    prune_mask = _prune_table(graph.n_black, order, estart, ewhite,
                              removed_whites)

    acc = np.zeros(1 << bits, dtype=np.float64)
    leaves = _sweep(order, estart, ewhite, eweight, esbit, ejbit,
                    init_used, shift, prune_mask, acc)
    logger.debug("sweep done: %d leaves, %d nonzero bins",
                 leaves, int(np.count_nonzero(acc)))

    cmask = []
    for i in range(graph.n_bridges):
        msk = 0
        for eid in graph.bridge_crossings[i]:
            msk |= 1 << crossed.index(eid)
        cmask.append(msk)

    # a matching may also cover edges crossed by *unused* bridges; the
    # sector label only keeps the overlap with the used bridges' crossings
    sums = {}
    for idx in np.nonzero(acc)[0]:
        jmask = int(idx) >> shift
        sfull = int(idx) & ((1 << shift) - 1)
        pj = 0
        for i in range(n_bridges):
            if jmask >> i & 1:
                pj |= cmask[i]
        key = (jmask, sfull & pj)
        sums[key] = sums.get(key, 0.0) + float(acc[idx])
    return SectorTable(sums=sums, crossed_eids=crossed, n_bridges=n_bridges,
                       bridge_cross_masks=cmask, leaves=int(leaves))


def partition_function_exact(graph, lam=None, removed_blacks=(),
                             removed_whites=()):
    """Exact partition function by enumeration; bridges weigh lam * t.

    ``lam=None`` uses the fugacity stored on the graph.
    """
    if lam is None:
        lam = graph.lam
    table = enumerate_sectors(graph, removed_blacks, removed_whites,
                              include_bridges=(lam != 0.0))
    return table.partition_function(lam)


def count_matchings(graph, include_bridges=False):
    """Number of perfect matchings (unit weights)."""
    table = enumerate_sectors(graph, include_bridges=include_bridges,
                              unit_weights=True)
    total = sum(table.sums.values())
    return int(round(total))


# ---------------------------------------------------------------------------
# pure-python reference path (tiny graphs, cross-checks, state lists)

_ITER_CAP = 36


def matchings_iter(graph, include_bridges=True):
    """Yield every perfect matching as a sorted tuple of edge tokens.

    Tokens are ``("p", eid)`` for lattice edges and ``("b", i)`` for
    bridge instances.  Recursive reference implementation, deliberately
    independent of the compiled sweep; capped at `_ITER_CAP` sites.
    """
    if graph.n * graph.n > _ITER_CAP:
        raise TooLarge(
            f"reference enumeration capped at {_ITER_CAP} sites, "
            f"got {graph.n * graph.n}"
        )
    nb = graph.n_black
    bridges_at = [[] for _ in range(nb)]
    if include_bridges:
        for i in range(graph.n_bridges):
            bridges_at[graph.bridge_black[i]].append(i)
    used = set()
    chosen = []

    def rec(b):
        if b == nb:
            yield tuple(sorted(chosen))
            return
        for j in range(4):
            w = int(graph.white_neighbor[b, j])
            if w not in used:
                used.add(w)
                chosen.append(("p", 4 * b + j))
                yield from rec(b + 1)
                chosen.pop()
                used.remove(w)
        for i in bridges_at[b]:
            w = int(graph.bridge_white[i])
            if w not in used:
                used.add(w)
                chosen.append(("b", i))
                yield from rec(b + 1)
                chosen.pop()
                used.remove(w)

    yield from rec(0)


def matching_weight(graph, tokens, lam=None):
    if lam is None:
        lam = graph.lam
    w = 1.0
    for kind, idx in tokens:
        if kind == "p":
            b, r = divmod(idx, 4)
            w *= graph.edge_weight[b, r]
        else:
            w *= lam * graph.bridge_weight[idx]
    return float(w)


def edge_marginals(graph, lam=None):
    """Dimer occupation probability of every edge, by direct enumeration.

    Returns ``(planar, bridge)`` arrays of shape ``(n_black, 4)`` and
    ``(n_bridges,)``.  Tiny graphs only.
    """
    if lam is None:
        lam = graph.lam
    z = 0.0
    planar = np.zeros((graph.n_black, 4), dtype=np.float64)
    bridge = np.zeros(graph.n_bridges, dtype=np.float64)
    for mtokens in matchings_iter(graph, include_bridges=(lam != 0.0)):
        w = matching_weight(graph, mtokens, lam)
        if w == 0.0:
            continue
        z += w
        for kind, idx in mtokens:
            if kind == "p":
                planar[divmod(idx, 4)] += w
            else:
                bridge[idx] += w
    if z == 0.0:
        raise TooLarge("graph admits no matching of nonzero weight")
    return planar / z, bridge / z


# ---------------------------------------------------------------------------
# exact observables: marginals, truncated correlations, height covariances

def _normalize_edge(graph, e):
    """Edge spec -> internal token.

    Accepts ``("p", black, j)`` with j in 1..4 for a lattice edge or
    ``("b", i)`` for the i-th bridge instance.
    """
    kind = e[0]
    if kind == "p" and len(e) == 3:
        b, j = int(e[1]), int(e[2])
        if not (0 <= b < graph.n_black and 1 <= j <= 4):
            raise DimensionMismatch(f"edge spec {e!r} out of range")
        return ("p", 4 * b + (j - 1))
    if kind == "b" and len(e) == 2:
        i = int(e[1])
        if not 0 <= i < graph.n_bridges:
            raise DimensionMismatch(f"bridge index in {e!r} out of range")
        return ("b", i)
    raise DimensionMismatch(
        f"edge spec {e!r}; want ('p', black, j) or ('b', i)"
    )


def _token_slot(graph, estart, token):
    # relies on the slot layout fixed by _edge_csr: four lattice
    # directions per black, then that black's bridges in index order
    kind, idx = token
    if kind == "p":
        b, r = divmod(int(idx), 4)
        return int(estart[b]) + r
    b = int(graph.bridge_black[idx])
    rank = int(np.sum(graph.bridge_black[:idx] == b))
    return int(estart[b]) + 4 + rank


def _joint_moments(graph, coef_map1, coef_map2, lam):
    """(Z, E[D1], E[D2], E[D1*D2]) at fugacity lam.

    ``coef_mapi`` sends edge tokens to real coefficients; ``Di`` is the
    corresponding signed sum of dimer indicators.
    """
    _check_size(graph)
    estart, ewhite, eweight, _, ejbit, _ = _edge_csr(graph)
    coef1 = np.zeros(ewhite.shape[0], dtype=np.float64)
    coef2 = np.zeros(ewhite.shape[0], dtype=np.float64)
    for token, c in coef_map1.items():
        coef1[_token_slot(graph, estart, token)] += c
    for token, c in coef_map2.items():
        coef2[_token_slot(graph, estart, token)] += c
    order = np.arange(graph.n_black, dtype=np.int64)
    prune_mask = _prune_table(graph.n_black, order, estart, ewhite)
    acc = np.zeros((graph.n_bridges + 1, 4), dtype=np.float64)
    _sweep_pair(order, estart, ewhite, eweight, ejbit, np.uint64(0),
                prune_mask, coef1, coef2, acc)
    lam_pow = float(lam) ** np.arange(graph.n_bridges + 1)
    z = float(acc[:, 0] @ lam_pow)
    if z <= 0.0:
        raise TooLarge("graph admits no matching of nonzero weight")
    return (z, float(acc[:, 1] @ lam_pow) / z,
            float(acc[:, 2] @ lam_pow) / z,
            float(acc[:, 3] @ lam_pow) / z)


def weighted_sum(graph, lam=None):
    """Total weight of all matchings (the exact partition function)."""
    return partition_function_exact(graph, lam=lam)


def edge_marginal(graph, e, lam=None):
    """Occupation probability of one edge."""
    if lam is None:
        lam = graph.lam
    token = _normalize_edge(graph, e)
    _, p, _, _ = _joint_moments(graph, {token: 1.0}, {}, lam)
    return p


def truncated_corr(graph, e1, e2, lam=None):
    """E(1_e; 1_e') = E(1_e 1_e') - E(1_e) E(1_e'), exactly.

    Coincident edges reduce to P(1-P) since the indicator is idempotent.
    """
    if lam is None:
        lam = graph.lam
    t1 = _normalize_edge(graph, e1)
    t2 = _normalize_edge(graph, e2)
    _, p1, p2, p12 = _joint_moments(graph, {t1: 1.0}, {t2: 1.0}, lam)
    return p12 - p1 * p2


def restricted_sum(graph, bridges=(), crossed=(), lam=None):
    """Total weight of matchings using exactly the given bridge instances
    and, among the edges those bridges cross, exactly ``crossed``.

    ``bridges`` holds bridge indices, ``crossed`` planar edge ids; the
    crossed set must be contained in the union of the used bridges'
    crossings.  Weights include the fugacity power.
    """
    if lam is None:
        lam = graph.lam
    blist = [int(i) for i in bridges]
    bset = sorted(set(blist))
    if len(bset) != len(blist):
        raise DimensionMismatch("duplicate bridge index")
    allowed = set()
    jmask = 0
    for i in bset:
        if not 0 <= i < graph.n_bridges:
            raise DimensionMismatch(f"bridge index {i} out of range")
        jmask |= 1 << i
        allowed.update(graph.bridge_crossings[i])
    slist = [int(eid) for eid in crossed]
    sset = sorted(set(slist))
    if len(sset) != len(slist):
        raise DimensionMismatch("duplicate crossed edge id")
    table = enumerate_sectors(graph)
    smask = 0
    for eid in sset:
        if eid not in allowed:
            raise DimensionMismatch(
                f"edge {eid} is not crossed by any selected bridge"
            )
        smask |= 1 << table.crossed_eids.index(eid)
    return table.restricted(jmask, smask) * float(lam) ** len(bset)


_DUAL_STEPS = ((1, 0), (0, 1), (-1, 0), (0, -1))


def corridor_path(graph, f_from, f_to):
    """Dual path between two corridor faces, as [(eid, sigma), ...].

    Breadth-first search through corridor faces only, so every step
    crosses a cell-boundary edge and the path stays clear of bridges and
    their crossed edges.  Deterministic: fixed E,N,W,S step order.
    """
    n = graph.n
    allowed = graph.corridor_face_mask()
    for f in (f_from, f_to):
        if not allowed[f]:
            raise DimensionMismatch(f"face {f} is not a corridor face")
    if f_from == f_to:
        return []
    parent = np.full(n * n, -1, dtype=np.int64)
    pdir = np.full(n * n, -1, dtype=np.int64)
    parent[f_from] = f_from
    queue = deque([f_from])
    while queue:
        f = queue.popleft()
        if f == f_to:
            break
        u1, u2 = divmod(f, n)
        for d, (s1, s2) in enumerate(_DUAL_STEPS):
            g = ((u1 + s1) % n) * n + (u2 + s2) % n
            if allowed[g] and parent[g] < 0:
                parent[g] = f
                pdir[g] = d
                queue.append(g)
    if parent[f_to] < 0:
        raise DimensionMismatch("corridor faces not connected")
    steps = []
    f = f_to
    while f != f_from:
        prev = int(parent[f])
        u1, u2 = divmod(prev, n)
        steps.append(graph.dual_step(u1, u2, int(pdir[f])))
        f = prev
    steps.reverse()
    return steps


def _face_arg(graph, eta):
    """Junction face from an id or a cell-coordinate pair."""
    junction = graph.junction_face_mask()
    if np.isscalar(eta) or isinstance(eta, (int, np.integer)):
        f = int(eta)
    else:
        x1, x2 = eta
        f = graph.cell_corner_face(int(x1), int(x2))
    if not (0 <= f < graph.n * graph.n) or not junction[f]:
        raise DimensionMismatch(f"face {eta!r} is not a corridor junction")
    return f


def exact_height_covariance(graph, eta_a, eta_b, eta_c, eta_d, lam=None):
    """E[(h(a)-h(b)); (h(c)-h(d))] between corridor junction faces.

    Faces are ids or (x1, x2) cell coordinates naming the junction at
    that cell's corner.  Height increments are read along corridor dual
    paths (h(f') - h(f) = sum of sigma * (1_e - 1/4) over crossed edges);
    the additive constants cancel in the covariance.
    """
    if lam is None:
        lam = graph.lam
    fa, fb = _face_arg(graph, eta_a), _face_arg(graph, eta_b)
    fc, fd = _face_arg(graph, eta_c), _face_arg(graph, eta_d)
    coef1, coef2 = {}, {}
    for eid, sg in corridor_path(graph, fb, fa):
        token = ("p", int(eid))
        coef1[token] = coef1.get(token, 0.0) + sg
    for eid, sg in corridor_path(graph, fd, fc):
        token = ("p", int(eid))
        coef2[token] = coef2.get(token, 0.0) + sg
    if not coef1 or not coef2:
        return 0.0
    _, m1, m2, m12 = _joint_moments(graph, coef1, coef2, lam)
    return m12 - m1 * m2
