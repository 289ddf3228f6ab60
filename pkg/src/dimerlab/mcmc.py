"""Markov-chain sampling of dimer configurations on the torus.

The state is the direction array ``dirv``: for every black vertex the
code of the edge its dimer uses (0..3 for the lattice directions, 4+s
for the s-th bridge attached to that black).  Two reversible move
families act on it:

* face updates -- heat-bath resampling of a unit face between its
  horizontal and vertical dimer pair, when the face carries one;
* worm updates -- delete the dimer of a random white vertex and walk
  the resulting black defect by heat-bath steps over its incident
  edges (bridges included) until it reattaches to the pivot white.

Face updates equilibrate locally but conserve every winding number and
never touch a bridge.  The worm closes an alternating cycle of
arbitrary homotopy, so it restores ergodicity across winding sectors
and toggles bridge occupations; the heat-bath step weights make the
whole loop satisfy detailed balance for any positive edge weights (the
head-site weight sums cancel along the reversed path).

Two engines share the move tables: a compiled serial chain (the
reference dynamics, also the fast option for tiny graphs) and a
vectorized chain that heat-baths the four vertex-disjoint face classes
in bulk and is meant for large tori.

Height differences are measured along fixed dual paths that stay away
from the periodic seam, so they are single-valued in every winding
sector.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy import stats

from .errors import DimensionMismatch, InsufficientStatistics
from .lattice import build_graph

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# move tables

class MoveTables:
    """Precomputed face and worm-adjacency data for one graph."""

    def __init__(self, graph):
        self.graph = graph
        n = graph.n
        fe = graph.face_edges
        w = graph.edge_weight

        def eb(col):
            return (fe[:, col] // 4).astype(np.int32)

        def ej(col):
            return (fe[:, col] % 4).astype(np.int32)

        # horizontal pair = bottom & top edge, vertical pair = right & left
        self.fh_b = np.stack([eb(0), eb(2)], axis=1)
        self.fh_j = np.stack([ej(0), ej(2)], axis=1)
        self.fv_b = np.stack([eb(1), eb(3)], axis=1)
        self.fv_j = np.stack([ej(1), ej(3)], axis=1)
        wof = w[self.fh_b[:, 0], self.fh_j[:, 0]] * \
            w[self.fh_b[:, 1], self.fh_j[:, 1]]
        wov = w[self.fv_b[:, 0], self.fv_j[:, 0]] * \
            w[self.fv_b[:, 1], self.fv_j[:, 1]]
        # heat-bath probability of the vertical pair, given a face that
        # holds either pair
        self.f_pv = wov / (wov + wof)

        # four vertex-disjoint face classes indexed by corner parities,
        # each stored as ready-to-use update tables
        u1, u2 = np.divmod(np.arange(n * n), n)
        self.face_class = ((u1 % 2) * 2 + (u2 % 2)).astype(np.int32)
        self.class_tabs = []
        for c in range(4):
            sel = np.where(self.face_class == c)[0]
            self.class_tabs.append((
                self.fh_b[sel].copy(), self.fh_j[sel].copy(),
                self.fv_b[sel].copy(), self.fv_j[sel].copy(),
                self.f_pv[sel].copy()))

        # bridge slot codes: dir code 4+s means the s-th bridge attached
        # to that black, counted in instance order
        slots = {}
        self.bridge_code = np.empty(graph.n_bridges, dtype=np.int32)
        for i in range(graph.n_bridges):
            b = int(graph.bridge_black[i])
            s = slots.setdefault(b, [])
            self.bridge_code[i] = 4 + len(s)
            s.append(i)
        self.max_code = 4 + max((len(v) for v in slots.values()), default=0)
        max_slots = self.max_code - 4

        # worm adjacency: per black, its planar edges then bridge slots
        nb = graph.n_black
        maxdeg = 4 + max_slots
        self.slot_white = np.full((nb, max(max_slots, 1)), -1,
                                  dtype=np.int64)
        self.adj_white = np.zeros((nb, maxdeg), dtype=np.int64)
        self.adj_code = np.zeros((nb, maxdeg), dtype=np.int64)
        wgt = np.zeros((nb, maxdeg))
        self.adj_white[:, :4] = graph.white_neighbor
        self.adj_code[:, :4] = np.arange(4)[None, :]
        wgt[:, :4] = w
        for b, insts in slots.items():
            for t, i in enumerate(insts):
                self.slot_white[b, t] = int(graph.bridge_white[i])
                self.adj_white[b, 4 + t] = int(graph.bridge_white[i])
                self.adj_code[b, 4 + t] = 4 + t
                wgt[b, 4 + t] = graph.lam * float(graph.bridge_weight[i])
        self._adj_wgt = wgt
        self.adj_cum = np.cumsum(wgt, axis=1)
        self.adj_total = self.adj_cum[:, -1].copy()
        self.white_neighbor = graph.white_neighbor.astype(np.int64)
        logger.debug("move tables: %d faces, max degree %d",
                     n * n, maxdeg)

    def initial_state(self):
        """The all-east reference matching."""
        return np.zeros(self.graph.n_black, dtype=np.int32)

    def id_base(self):
        return max(self.max_code, 4)

    def id_powers(self):
        nb = self.graph.n_black
        base = self.id_base()
        if nb * np.log(base) > 62 * np.log(2):
            raise DimensionMismatch("graph too large for packed config ids")
        return base ** np.arange(nb, dtype=np.int64)

    def config_id(self, dirv):
        return int(np.dot(dirv.astype(np.int64), self.id_powers()))

    def decode_id(self, cid):
        base = self.id_base()
        dirv = np.empty(self.graph.n_black, dtype=np.int32)
        for b in range(self.graph.n_black):
            dirv[b] = cid % base
            cid //= base
        return dirv

    def check_sampleable(self):
        if np.any(self._adj_wgt < 0):
            raise ValueError("negative edge weight in the measure; the "
                             "chain only samples nonnegative weights")


# ---------------------------------------------------------------------------
# compiled kernels

@njit(cache=True)
def _worm_update(dirv, gen, white_neighbor, slot_white,
                 adj_white, adj_code, adj_cum, adj_total, max_steps):
    """One worm move; returns the number of steps (0 = aborted)."""
    nb = dirv.shape[0]
    maxdeg = adj_white.shape[1]
    match_w = np.empty(nb, dtype=np.int64)
    for b in range(nb):
        c = dirv[b]
        if c < 4:
            match_w[white_neighbor[b, c]] = b
        else:
            match_w[slot_white[b, c - 4]] = b
    saved = dirv.copy()
    w0 = gen.integers(0, nb)
    b = match_w[w0]
    steps = 0
    while steps < max_steps:
        steps += 1
        u = gen.random() * adj_total[b]
        s = 0
        while s < maxdeg - 1 and adj_cum[b, s] < u:
            s += 1
        wp = adj_white[b, s]
        dirv[b] = adj_code[b, s]
        if wp == w0:
            return steps
        b2 = match_w[wp]
        match_w[wp] = b
        b = b2
    dirv[:] = saved
    return 0


@njit(cache=True)
def _serial_sweeps(dirv, gen, n_sweeps, thin, worms_per_sweep,
                   fh_b, fh_j, fv_b, fv_j, f_pv,
                   white_neighbor, slot_white,
                   adj_white, adj_code, adj_cum, adj_total, max_steps,
                   id_powers, out_ids, counters):
    n_faces = fh_b.shape[0]
    out_pos = 0
    for sweep in range(n_sweeps):
        for _ in range(n_faces):
            f = gen.integers(0, n_faces)
            u = gen.random()
            counters[0] += 1
            if dirv[fh_b[f, 0]] == fh_j[f, 0] and \
                    dirv[fh_b[f, 1]] == fh_j[f, 1]:
                if u < f_pv[f]:
                    dirv[fv_b[f, 0]] = fv_j[f, 0]
                    dirv[fv_b[f, 1]] = fv_j[f, 1]
                    counters[1] += 1
            elif dirv[fv_b[f, 0]] == fv_j[f, 0] and \
                    dirv[fv_b[f, 1]] == fv_j[f, 1]:
                if u >= f_pv[f]:
                    dirv[fh_b[f, 0]] = fh_j[f, 0]
                    dirv[fh_b[f, 1]] = fh_j[f, 1]
                    counters[1] += 1
        for _ in range(worms_per_sweep):
            st = _worm_update(dirv, gen, white_neighbor, slot_white,
                              adj_white, adj_code, adj_cum, adj_total,
                              max_steps)
            counters[2] += 1
            counters[3] += st
            if st == 0:
                counters[4] += 1
        if thin > 0 and sweep % thin == thin - 1:
            cid = np.int64(0)
            for b in range(dirv.shape[0]):
                cid += dirv[b] * id_powers[b]
            out_ids[out_pos] = cid
            out_pos += 1
    return out_pos


def run_serial(graph, n_sweeps, seed=0, thin=0, worms_per_sweep=1,
               tables=None, dirv=None, rng=None):
    """Run the compiled reference chain.

    One sweep makes one uniformly chosen heat-bath face proposal per
    face, then ``worms_per_sweep`` worm updates.  Returns ``(dirv, ids,
    counters)``: the final state, packed configuration ids recorded
    every ``thin`` sweeps (empty when ``thin=0``), and counters laid
    out as (face proposals, face changes, worms, total worm steps,
    worm aborts).
    """
    tables = tables or MoveTables(graph)
    tables.check_sampleable()
    if dirv is None:
        dirv = tables.initial_state()
    gen = rng or np.random.Generator(np.random.Philox(seed))
    powers = tables.id_powers() if thin > 0 else \
        np.zeros(graph.n_black, dtype=np.int64)
    n_out = 0 if thin == 0 else n_sweeps // thin
    out = np.zeros(max(n_out, 1), dtype=np.int64)
    counters = np.zeros(6, dtype=np.int64)
    max_steps = 400 * graph.n_black + 1000
    got = _serial_sweeps(
        dirv, gen, n_sweeps, thin, worms_per_sweep,
        tables.fh_b, tables.fh_j, tables.fv_b, tables.fv_j, tables.f_pv,
        tables.white_neighbor, tables.slot_white,
        tables.adj_white, tables.adj_code, tables.adj_cum,
        tables.adj_total, max_steps,
        powers, out, counters)
    return dirv, out[:got], counters


# ---------------------------------------------------------------------------
# vectorized chain

class CheckerboardChain:
    """Heat-bath dynamics updating vertex-disjoint face classes in bulk.

    One sweep resamples the four face classes in sequence (each class
    is a simultaneous heat-bath step on all its faces) and then runs
    ``worms_per_sweep`` worm updates.  Driven by a counter-based
    generator so that independent chains can be spawned reproducibly;
    the same generator feeds the compiled worm kernel.
    """

    def __init__(self, graph, seed=0, rng=None, tables=None,
                 worms_per_sweep=1):
        self.graph = graph
        self.tables = tables or MoveTables(graph)
        self.tables.check_sampleable()
        self.rng = rng or np.random.Generator(np.random.Philox(seed))
        self.dirv = self.tables.initial_state()
        self.worms_per_sweep = worms_per_sweep
        self._max_steps = 400 * graph.n_black + 1000
        self.face_proposed = 0
        self.face_changed = 0
        self.worm_count = 0
        self.worm_steps = 0
        self.worm_aborts = 0

    def sweep(self, n=1):
        t = self.tables
        dirv = self.dirv
        for _ in range(n):
            for h_b, h_j, v_b, v_j, pv in t.class_tabs:
                u = self.rng.random(len(pv))
                in_h = (dirv[h_b[:, 0]] == h_j[:, 0]) & \
                    (dirv[h_b[:, 1]] == h_j[:, 1])
                in_v = (dirv[v_b[:, 0]] == v_j[:, 0]) & \
                    (dirv[v_b[:, 1]] == v_j[:, 1])
                rot = in_h | in_v
                to_v = rot & (u < pv)
                to_h = rot & ~(u < pv)
                dirv[v_b[to_v, 0]] = v_j[to_v, 0]
                dirv[v_b[to_v, 1]] = v_j[to_v, 1]
                dirv[h_b[to_h, 0]] = h_j[to_h, 0]
                dirv[h_b[to_h, 1]] = h_j[to_h, 1]
                self.face_proposed += len(pv)
                self.face_changed += int((to_v & in_h).sum()) + \
                    int((to_h & in_v).sum())
            for _ in range(self.worms_per_sweep):
                st = _worm_update(
                    dirv, self.rng, t.white_neighbor, t.slot_white,
                    t.adj_white, t.adj_code, t.adj_cum, t.adj_total,
                    self._max_steps)
                self.worm_count += 1
                self.worm_steps += int(st)
                if st == 0:
                    self.worm_aborts += 1
        return self

    def config_id(self):
        return self.tables.config_id(self.dirv)


# ---------------------------------------------------------------------------
# exact comparison

def exact_distribution(graph, tables=None):
    """Probability of every matching, keyed by packed config id.

    Enumeration-backed, so limited to the same sizes as the exhaustive
    partition-function checks.
    """
    from .enumeration import matchings_iter

    tables = tables or MoveTables(graph)
    out = {}
    for match in matchings_iter(graph):
        dirv = np.full(graph.n_black, -1, dtype=np.int32)
        weight = 1.0
        for tok in match:
            if tok[0] == "p":
                eid = tok[1]
                dirv[eid // 4] = eid % 4
                weight *= float(graph.edge_weight[eid // 4, eid % 4])
            else:
                i = tok[1]
                dirv[int(graph.bridge_black[i])] = \
                    int(tables.bridge_code[i])
                weight *= graph.lam * float(graph.bridge_weight[i])
        if weight == 0.0:
            continue
        cid = tables.config_id(dirv)
        out[cid] = out.get(cid, 0.0) + weight
    z = sum(out.values())
    return {k: v / z for k, v in out.items()}


def chi_square_vs_exact(graph, ids, tables=None, min_expected=5.0):
    """Pearson chi-square of sampled config ids against the exact law.

    Sampled ids must be (approximately) independent draws -- thin the
    chain accordingly.  States whose expected count falls below
    ``min_expected`` are pooled into a single bin.  Returns
    (statistic, p-value, degrees of freedom).
    """
    probs = exact_distribution(graph, tables=tables)
    uniq, cnt = np.unique(np.asarray(ids), return_counts=True)
    unknown = set(int(x) for x in uniq) - set(probs)
    if unknown:
        raise DimensionMismatch(
            f"sampler visited {len(unknown)} states of zero exact "
            "probability -- the move set is broken")
    n = len(ids)
    counts = dict(zip((int(x) for x in uniq), cnt))
    obs, exp = [], []
    pool_o = pool_e = 0.0
    for k in sorted(probs):
        e = probs[k] * n
        o = counts.get(k, 0)
        if e < min_expected:
            pool_o += o
            pool_e += e
        else:
            obs.append(o)
            exp.append(e)
    if pool_e > 0:
        obs.append(pool_o)
        exp.append(pool_e)
    obs = np.asarray(obs, dtype=np.float64)
    exp = np.asarray(exp, dtype=np.float64)
    exp *= obs.sum() / exp.sum()
    stat, pval = stats.chisquare(obs, exp)
    return float(stat), float(pval), len(obs) - 1


# ---------------------------------------------------------------------------
# heights

def corridor_path(graph, f_from, f_to):
    """Dual path east-then-north between two faces, never wrapping.

    Faces are (u1, u2) lower-left corners; the return value is a triple
    of arrays (black, direction, sign) such that, up to a constant,
    h(f_to) - h(f_from) of a configuration equals
    ``sum(sign * (dirv[black] == direction))``.
    """
    (a1, a2), (b1, b2) = f_from, f_to
    if min(a1, a2, b1, b2) < 0 or max(a1, a2, b1, b2) >= graph.n:
        raise DimensionMismatch("faces outside the fundamental window")
    blacks, dirs, signs = [], [], []
    u1, u2 = a1, a2
    while u1 != b1:
        step = 0 if b1 > u1 else 2
        eid, sgn = graph.dual_step(u1, u2, step)
        blacks.append(eid // 4)
        dirs.append(eid % 4)
        signs.append(sgn)
        u1 += 1 if step == 0 else -1
    while u2 != b2:
        step = 1 if b2 > u2 else 3
        eid, sgn = graph.dual_step(u1, u2, step)
        blacks.append(eid // 4)
        dirs.append(eid % 4)
        signs.append(sgn)
        u2 += 1 if step == 1 else -1
    return (np.array(blacks, dtype=np.int64),
            np.array(dirs, dtype=np.int64),
            np.array(signs, dtype=np.float64))


class HeightProbe:
    """Batched height differences h(face) - h(base) for many faces."""

    def __init__(self, graph, base_face, faces):
        self.graph = graph
        self.base = base_face
        self.faces = list(faces)
        bs, js, ss, ptr = [], [], [], [0]
        for f in self.faces:
            b, j, s = corridor_path(graph, base_face, f)
            bs.append(b)
            js.append(j)
            ss.append(s)
            ptr.append(ptr[-1] + len(b))
        self._b = np.concatenate(bs) if bs else np.zeros(0, dtype=np.int64)
        self._j = np.concatenate(js) if js else np.zeros(0, dtype=np.int64)
        self._s = np.concatenate(ss) if ss else np.zeros(0)
        self._ptr = np.array(ptr)

    def measure(self, dirv):
        if not self.faces:
            return np.zeros(0)
        occ = (dirv[self._b] == self._j) * self._s
        return np.add.reduceat(occ, self._ptr[:-1])


def exact_height_moments(graph, probe, tables=None):
    """Mean vector and covariance matrix of the probe heights, exactly.

    Enumeration-backed, so only feasible on tiny graphs.  The measure
    must give bridges zero weight: a dimer on a bridge would make the
    lattice height increments ill-defined.
    """
    tables = tables or MoveTables(graph)
    if graph.n_bridges and graph.lam != 0.0:
        raise DimensionMismatch("height moments need a lattice-only "
                                "measure (bridge fugacity 0)")
    dist = exact_distribution(graph, tables=tables)
    nt = len(probe.faces)
    m1 = np.zeros(nt)
    m2 = np.zeros((nt, nt))
    for cid, p in dist.items():
        h = probe.measure(tables.decode_id(cid))
        m1 += p * h
        m2 += p * np.outer(h, h)
    return m1, m2 - np.outer(m1, m1)


def planar_height_moments(graph, probe):
    """Exact probe-height mean and covariance from the edge moments.

    Each probe height is a signed sum of edge indicators along its dual
    path, so mean and covariance follow by pushing the exact edge
    occupation moments through that linear map.  Scales to any torus the
    dense determinant engine can hold, unlike ``exact_height_moments``.
    """
    from . import kasteleyn

    if graph.n_bridges and graph.lam != 0.0:
        raise DimensionMismatch("height moments need a lattice-only "
                                "measure (bridge fugacity 0)")
    eids = 4 * probe._b + probe._j
    uniq, inv = np.unique(eids, return_inverse=True)
    nt = len(probe.faces)
    wmat = np.zeros((nt, len(uniq)))
    for t in range(nt):
        lo, hi = probe._ptr[t], probe._ptr[t + 1]
        np.add.at(wmat[t], inv[lo:hi], probe._s[lo:hi])
    probs, cov = kasteleyn.edge_moments(graph, [int(e) for e in uniq])
    return wmat @ probs, wmat @ cov @ wmat.T


# ---------------------------------------------------------------------------
# stiffness estimation

@dataclass
class StiffnessResult:
    nu_hat: float
    nu_se: float
    intercept: float
    targets: list
    predictor: np.ndarray
    variances: np.ndarray
    variance_se: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def default_stiffness_targets(L):
    """Cell displacements used in the variance regression.

    Separations are capped well below L: the leading torus correction
    to the variance profile grows like (r/L)^2 and would otherwise
    tilt the fitted slope.
    """
    out = []
    for r in range(2, max(3, L // 8) + 1):
        out.extend([(r, 0), (0, r)])
    for r in range(1, max(2, L // 10) + 1):
        out.extend([(r, r), (r, -r)])
    return out


def estimate_stiffness(spec, L, n_chains=8, n_samples=1500, thin=5,
                       burn=1000, seed=20260819, targets=None, fermi=None,
                       worms_per_sweep=2):
    """Fit the height-variance profile against the free-field prediction.

    Runs ``n_chains`` independent chains on the L-torus, measures
    Var(h(eta_x) - h(eta_base)) for the cell displacements ``targets``,
    and regresses those variances on the predicted profile
    ``log|phi_+(x)| / pi^2``.  The fitted slope estimates the field
    normalization, which should be 1 for the models treated here.

    Raises NotLiquidPhase when the spectral analysis of ``spec`` does
    (a degenerate spectrum admits no such prediction) and
    InsufficientStatistics when the chains cannot pin the slope to
    better than 15 percent.
    """
    from . import spectral

    if fermi is None:
        fermi = spectral.find_fermi_points(spec)
    graph = build_graph(spec, L)
    targets = targets or default_stiffness_targets(L)
    base_cell = (L // 2, L // 2)
    base_face = divmod(graph.cell_corner_face(*base_cell), graph.n)
    faces = []
    for dx in targets:
        f = graph.cell_corner_face(base_cell[0] + dx[0],
                                   base_cell[1] + dx[1])
        faces.append(divmod(f, graph.n))
    probe = HeightProbe(graph, base_face, faces)
    pred = np.array([np.log(abs(fermi.phi(1, dx))) / np.pi ** 2
                     for dx in targets])

    tables = MoveTables(graph)
    seq = np.random.SeedSequence(seed)
    per_chain = np.zeros((n_chains, len(targets)))
    all_samples = []
    worm_steps = worm_count = aborts = 0
    face_prop = face_chg = 0
    for ci, child in enumerate(seq.spawn(n_chains)):
        chain = CheckerboardChain(
            graph, rng=np.random.Generator(np.random.Philox(child)),
            tables=tables, worms_per_sweep=worms_per_sweep)
        chain.sweep(burn)
        hs = np.empty((n_samples, len(targets)))
        for si in range(n_samples):
            chain.sweep(thin)
            hs[si] = probe.measure(chain.dirv)
        per_chain[ci] = hs.var(axis=0, ddof=1)
        all_samples.append(hs)
        worm_steps += chain.worm_steps
        worm_count += chain.worm_count
        aborts += chain.worm_aborts
        face_prop += chain.face_proposed
        face_chg += chain.face_changed
        logger.info("chain %d/%d done (face change rate %.3f, "
                    "mean worm length %.0f)", ci + 1, n_chains,
                    chain.face_changed / max(chain.face_proposed, 1),
                    chain.worm_steps / max(chain.worm_count, 1))
    var = per_chain.mean(axis=0)
    var_se = per_chain.std(axis=0, ddof=1) / np.sqrt(n_chains)

    # point estimate from the pooled variances, error bar from the
    # spread of per-chain fits (chains are genuinely independent)
    X = np.stack([pred, np.ones_like(pred)], axis=1)
    slopes = np.empty(n_chains)
    for ci in range(n_chains):
        coef, *_ = np.linalg.lstsq(X, per_chain[ci], rcond=None)
        slopes[ci] = coef[0]
    coef, *_ = np.linalg.lstsq(X, var, rcond=None)
    nu_hat, intercept = float(coef[0]), float(coef[1])
    nu_se = float(slopes.std(ddof=1) / np.sqrt(n_chains))
    if not np.isfinite(nu_se) or nu_se > 0.15 * abs(nu_hat):
        raise InsufficientStatistics(
            f"slope {nu_hat:.3f} +- {nu_se:.3f}: run longer chains")

    pooled = np.concatenate(all_samples, axis=0)
    central = pooled - pooled.mean(axis=0)
    pooled_var = central.var(axis=0)
    diag = {
        "face_change_rate": face_chg / max(face_prop, 1),
        "worm_mean_length": worm_steps / max(worm_count, 1),
        "worm_aborts": aborts,
        "fit_residual_max": float(np.max(np.abs(var - X @ coef))),
        "skewness": (central ** 3).mean(axis=0) / pooled_var ** 1.5,
        "excess_kurtosis":
            (central ** 4).mean(axis=0) / pooled_var ** 2 - 3.0,
        "slopes_per_chain": slopes,
    }
    logger.info("stiffness %.4f +- %.4f (intercept %.4f); "
                "max |skew| %.3f, max |excess kurtosis| %.3f",
                nu_hat, nu_se, intercept,
                float(np.max(np.abs(diag["skewness"]))),
                float(np.max(np.abs(diag["excess_kurtosis"]))))
    return StiffnessResult(
        nu_hat=nu_hat, nu_se=nu_se, intercept=intercept,
        targets=list(targets), predictor=pred, variances=var,
        variance_se=var_se, diagnostics=diag)
