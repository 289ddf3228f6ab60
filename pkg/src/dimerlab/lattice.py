"""Periodic bipartite lattice with decorated unit cells.

The underlying graph is the square lattice on an ``n x n`` torus with
``n = L*m``: sites ``u = (u1, u2)``, black iff ``u1 + u2`` is even.  The
torus is tiled by ``L x L`` copies of an ``m x m`` cell (``m`` even), and a
cell specification assigns weights to the lattice edges per in-cell type
and optionally adds extra "bridge" edges inside each cell that cannot be
drawn without crossing lattice edges.

Conventions used throughout the package:

* cell ``x = (x1, x2)`` covers columns ``x1*m .. x1*m+m-1`` and rows
  ``x2*m .. x2*m+m-1``; in-cell offset ``a = (u1 % m, u2 % m)``,
* black types ``ell = 1 .. m^2/2`` enumerate black offsets in
  lexicographic order, white types likewise,
* from each black site the four lattice edges are labelled
  ``j = 1`` east, ``2`` north, ``3`` west, ``4`` south, and a planar edge
  is identified by ``eid = 4*b + (j - 1)`` where ``b`` is the black index,
* the reference matching ``M0`` consists of the horizontal edges whose
  left endpoint sits in an even column; equivalently ``(ell, 1)`` when the
  black offset has even ``a1`` and ``(ell, 3)`` when odd.  ``M0`` never
  leaves a cell and never wraps around the torus.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, InvalidSpec

logger = logging.getLogger(__name__)

EAST, NORTH, WEST, SOUTH = 1, 2, 3, 4

#: displacement of the white endpoint, indexed by j
_STEP = {EAST: (1, 0), NORTH: (0, 1), WEST: (-1, 0), SOUTH: (0, -1)}


def black_offsets(m):
    """In-cell offsets of black sites in type order (lexicographic)."""
    return [(a1, a2) for a1 in range(m) for a2 in range(m) if (a1 + a2) % 2 == 0]


def white_offsets(m):
    return [(a1, a2) for a1 in range(m) for a2 in range(m) if (a1 + a2) % 2 == 1]


@dataclass
class BridgeSpec:
    """One in-cell bridge edge: black type -> white type, with the list of
    lattice edges ``(ell, j)`` its arc crosses in the drawing."""

    bl: int
    wh: int
    weight: float = 1.0
    crossings: list = field(default_factory=list)


@dataclass
class CellSpec:
    """Weighted decorated cell: edge weights per type and bridge edges.

    ``planar_weights`` maps ``(ell, j)`` to a positive weight; entries not
    present default to 1.  ``bridges`` lists the non-planar in-cell edges.
    """

    m: int
    planar_weights: dict = field(default_factory=dict)
    bridges: list = field(default_factory=list)

    def weight(self, ell, j):
        return float(self.planar_weights.get((ell, j), 1.0))

    def to_dict(self):
        return {
            "m": self.m,
            "planar_weights": [
                {"ell": k[0], "j": k[1], "weight": v}
                for k, v in sorted(self.planar_weights.items())
            ],
            "nonplanar": [
                {
                    "bl": br.bl,
                    "wh": br.wh,
                    "weight": br.weight,
                    "crossings": [{"ell": e, "j": j} for e, j in br.crossings],
                }
                for br in self.bridges
            ],
        }

    @classmethod
    def from_dict(cls, d):
        try:
            m = int(d["m"])
            pw = {
                (int(r["ell"]), int(r["j"])): float(r["weight"])
                for r in d.get("planar_weights", [])
            }
            bridges = [
                BridgeSpec(
                    bl=int(r["bl"]),
                    wh=int(r["wh"]),
                    weight=float(r.get("weight", 1.0)),
                    crossings=[
                        (int(c["ell"]), int(c["j"])) for c in r.get("crossings", [])
                    ],
                )
                for r in d.get("nonplanar", [])
            ]
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidSpec([f"malformed cell spec: {exc}"]) from exc
        return cls(m=m, planar_weights=pw, bridges=bridges)


def save_spec(spec, path):
    with open(path, "w") as fh:
        json.dump(spec.to_dict(), fh, indent=2)
        fh.write("\n")


def load_spec(path):
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidSpec([f"not valid JSON: {exc}"]) from exc
    return CellSpec.from_dict(d)


# ---------------------------------------------------------------------------
# ready-made specifications


def uniform_spec(m=4):
    """All lattice weights 1, no bridges."""
    return CellSpec(m=m)


def anisotropic_spec(m=4, west=1.3):
    """Unequal horizontal weights: every west edge carries ``west``.

    Splitting the two horizontal directions moves the two zeros of the
    spectral curve away from each other, so this cell is a convenient
    representative of the non-degenerate liquid phase.
    """
    ntypes = m * m // 2
    pw = {(ell, WEST): float(west) for ell in range(1, ntypes + 1)}
    return CellSpec(m=m, planar_weights=pw)


def row_bridge_spec(m=4, weight=1.0, west=None):
    """Cell with a single bridge running along the row ``a2 = m - 2``.

    The bridge joins the black site at offset ``(0, m-2)`` to the white
    site at ``(m-1, m-2)``; drawn slightly above the row it crosses the
    vertical edges between rows ``m-2`` and ``m-1`` at the intermediate
    columns.  For ``m = 4`` that is one bridge with exactly two crossings,
    the smallest cell in the class.  Pass ``west`` to combine with
    :func:`anisotropic_spec` weights.
    """
    if m % 2 or m < 4:
        raise InvalidSpec([f"m must be even and >= 4, got {m}"])
    boffs = black_offsets(m)
    woffs = white_offsets(m)
    btype = {a: i + 1 for i, a in enumerate(boffs)}
    wtype = {a: i + 1 for i, a in enumerate(woffs)}
    row = m - 2
    crossings = []
    for a1 in range(1, m - 1):
        site = (a1, row)
        if (a1 + row) % 2 == 0:  # black: crossed edge goes north from it
            crossings.append((btype[site], NORTH))
        else:  # white: crossed edge comes down from the black above
            crossings.append((btype[(a1, row + 1)], SOUTH))
    spec = anisotropic_spec(m=m, west=west) if west is not None else CellSpec(m=m)
    spec.bridges = [
        BridgeSpec(bl=btype[(0, row)], wh=wtype[(m - 1, row)], weight=weight,
                   crossings=crossings)
    ]
    return spec


# ---------------------------------------------------------------------------
# validation


def _m0_partner_j(a1):
    """Direction of the reference-matching edge at a black with offset a1."""
    return EAST if a1 % 2 == 0 else WEST


def validate_spec(spec):
    """Return a list of human-readable violations (empty when valid)."""
    v = []
    m = spec.m
    if m % 2 != 0 or m < 4:
        v.append(f"cell size m={m} must be even and at least 4")
        return v  # nothing below is meaningful
    ntypes = m * m // 2
    boffs = black_offsets(m)

    def _check_key(ell, j, where):
        ok = True
        if not (1 <= ell <= ntypes):
            v.append(f"{where}: type {ell} out of range 1..{ntypes}")
            ok = False
        if not (1 <= j <= 4):
            v.append(f"{where}: direction {j} out of range 1..4")
            ok = False
        return ok

    for (ell, j), w in spec.planar_weights.items():
        _check_key(ell, j, f"weight ({ell},{j})")
        if not (np.isfinite(w) and w > 0):
            v.append(f"weight ({ell},{j}) = {w} must be positive and finite")

    for i, br in enumerate(spec.bridges):
        where = f"bridge {i}"
        if not (1 <= br.bl <= ntypes):
            v.append(f"{where}: black type {br.bl} out of range 1..{ntypes}")
        if not (1 <= br.wh <= ntypes):
            v.append(f"{where}: white type {br.wh} out of range 1..{ntypes}")
        if not (np.isfinite(br.weight) and br.weight > 0):
            v.append(f"{where}: weight {br.weight} must be positive and finite")
        seen = set()
        for ell, j in br.crossings:
            if not _check_key(ell, j, f"{where} crossing ({ell},{j})"):
                continue
            a1, a2 = boffs[ell - 1]
            d1, d2 = _STEP[j]
            if not (0 <= a1 + d1 < m and 0 <= a2 + d2 < m):
                v.append(f"{where}: crossed edge ({ell},{j}) leaves the cell")
            if j == _m0_partner_j(a1):
                v.append(
                    f"{where}: crossed edge ({ell},{j}) belongs to the "
                    "reference matching"
                )
            if (ell, j) in seen:
                v.append(f"{where}: crossing ({ell},{j}) listed twice")
            seen.add((ell, j))

    if v:
        return v

    # structural checks passed; verify the lattice minus bridges and all
    # crossed edges stays 2-connected (checked on the L=2 torus, which is
    # the smallest instance where every wrap pattern occurs).
    g = build_graph(spec, L=2, validate=False)
    removed = set()
    for cross in g.bridge_crossings:
        removed.update(cross)
    adj = [[] for _ in range(2 * g.n_black)]
    for b in range(g.n_black):
        for j in range(1, 5):
            if 4 * b + (j - 1) in removed:
                continue
            w = g.white_neighbor[b, j - 1]
            adj[b].append(g.n_black + w)
            adj[g.n_black + w].append(b)
    if not _biconnected(adj):
        v.append("lattice minus bridges and crossed edges is not 2-connected")
    return v


def _biconnected(adj):
    """Connectivity + absence of articulation points, iteratively."""
    nv = len(adj)
    if nv == 0:
        return False
    disc = [-1] * nv
    low = [0] * nv
    parent = [-1] * nv
    parent_edge_used = [False] * nv
    nxt = [0] * nv
    stack = [0]
    disc[0] = low[0] = 0
    timer = 1
    root_children = 0
    articulation = False
    while stack:
        u = stack[-1]
        if nxt[u] < len(adj[u]):
            w = adj[u][nxt[u]]
            nxt[u] += 1
            if disc[w] == -1:
                parent[w] = u
                disc[w] = low[w] = timer
                timer += 1
                if u == 0:
                    root_children += 1
                stack.append(w)
            elif w == parent[u] and not parent_edge_used[u]:
                # skip the tree edge once; parallel edges count as back edges
                parent_edge_used[u] = True
            else:
                low[u] = min(low[u], disc[w])
        else:
            stack.pop()
            p = parent[u]
            if p != -1:
                low[p] = min(low[p], low[u])
                if p != 0 and low[u] >= disc[p]:
                    articulation = True
    if any(d == -1 for d in disc):
        return False
    if root_children > 1:
        articulation = True
    return not articulation


# ---------------------------------------------------------------------------
# graph construction


class TorusGraph:
    """Concrete ``L x L`` torus of cells, with flat edge arrays.

    Black/white sites are indexed in lexicographic coordinate order.  The
    per-black arrays have one row per black site and four columns for the
    lattice directions ``j = 1..4`` (column ``j - 1``):

    ``white_neighbor``  index of the white endpoint,
    ``edge_weight``     positive edge weight,
    ``wrap1/wrap2``     whether the edge crosses the horizontal / vertical
                        seam of the torus.

    Bridges are instantiated once per cell and kept in separate flat
    arrays (``bridge_black``, ``bridge_white``, ``bridge_weight``,
    ``bridge_cell``), with ``bridge_crossings`` the per-instance list of
    crossed planar edge ids.  ``bridge_weight`` stores the bare weights;
    the fugacity ``lam`` multiplying every bridge lives on the graph and
    enters through :attr:`effective_bridge_weight`.
    """

    def __init__(self, spec, L, lam=0.0):
        self.spec = spec
        self.L = int(L)
        self.lam = float(lam)
        self.m = int(spec.m)
        self.n = self.L * self.m
        if self.n < 2:
            raise InvalidSpec([f"torus side L*m = {self.n} too small"])
        n = self.n
        u1, u2 = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        black_mask = (u1 + u2) % 2 == 0
        self.n_black = int(black_mask.sum())
        # lexicographic enumeration of each colour class
        coords = np.stack([u1.ravel(), u2.ravel()], axis=1)
        self.black_coord = coords[black_mask.ravel()]
        self.white_coord = coords[~black_mask.ravel()]
        self.color_index = np.empty((n, n), dtype=np.int64)
        self.color_index[black_mask] = np.arange(self.n_black)
        self.color_index[~black_mask] = np.arange(self.n_black)

        m = self.m
        boffs = black_offsets(m)
        woffs = white_offsets(m)
        self._btype_of_offset = {a: i + 1 for i, a in enumerate(boffs)}
        self._wtype_of_offset = {a: i + 1 for i, a in enumerate(woffs)}
        btab = np.zeros((m, m), dtype=np.int64)
        wtab = np.zeros((m, m), dtype=np.int64)
        for off, t in self._btype_of_offset.items():
            btab[off] = t
        for off, t in self._wtype_of_offset.items():
            wtab[off] = t
        a1 = self.black_coord[:, 0] % m
        a2 = self.black_coord[:, 1] % m
        self.black_type = btab[a1, a2]
        self.white_type = wtab[self.white_coord[:, 0] % m, self.white_coord[:, 1] % m]

        ntypes = m * m // 2
        weight_table = np.ones((ntypes + 1, 5), dtype=np.float64)
        for (ell, j), w in spec.planar_weights.items():
            weight_table[ell, j] = w

        nb = self.n_black
        self.white_neighbor = np.empty((nb, 4), dtype=np.int64)
        self.edge_weight = np.empty((nb, 4), dtype=np.float64)
        self.wrap1 = np.zeros((nb, 4), dtype=bool)
        self.wrap2 = np.zeros((nb, 4), dtype=bool)
        for j in (EAST, NORTH, WEST, SOUTH):
            d1, d2 = _STEP[j]
            v1 = (self.black_coord[:, 0] + d1) % n
            v2 = (self.black_coord[:, 1] + d2) % n
            self.white_neighbor[:, j - 1] = self.color_index[v1, v2]
            if d1:
                self.wrap1[:, j - 1] = (self.black_coord[:, 0] + d1) // n != 0
            if d2:
                self.wrap2[:, j - 1] = (self.black_coord[:, 1] + d2) // n != 0
            self.edge_weight[:, j - 1] = weight_table[self.black_type, j]

        # reference matching: one edge per black, never wrapping
        self.m0_dir = np.where(a1 % 2 == 0, EAST, WEST).astype(np.int64)

        # bridges, one instance per cell
        bb, bw, bwt, bcell, bcross = [], [], [], [], []
        for x1 in range(self.L):
            for x2 in range(self.L):
                for br in spec.bridges:
                    o1, o2 = boffs[br.bl - 1]
                    b = self.color_index[x1 * m + o1, x2 * m + o2]
                    o1, o2 = woffs[br.wh - 1]
                    w = self.color_index[x1 * m + o1, x2 * m + o2]
                    bb.append(b)
                    bw.append(w)
                    bwt.append(br.weight)
                    bcell.append((x1, x2))
                    eids = []
                    for ell, j in br.crossings:
                        o1, o2 = boffs[ell - 1]
                        cb = self.color_index[x1 * m + o1, x2 * m + o2]
                        eids.append(4 * cb + (j - 1))
                    bcross.append(eids)
        self.bridge_black = np.array(bb, dtype=np.int64)
        self.bridge_white = np.array(bw, dtype=np.int64)
        self.bridge_weight = np.array(bwt, dtype=np.float64)
        self.bridge_cell = np.array(bcell, dtype=np.int64).reshape(-1, 2)
        self.bridge_crossings = bcross
        self.n_bridges = len(bb)

        self._face_edges = None
        logger.debug(
            "built torus graph: n=%d, blacks=%d, bridges=%d", n, nb, self.n_bridges
        )

    # -- basic lookups ------------------------------------------------------

    @property
    def effective_bridge_weight(self):
        """Bridge weights as they enter matchings: fugacity times bare t."""
        return self.lam * self.bridge_weight

    def is_black(self, u1, u2):
        return (u1 + u2) % 2 == 0

    def black_at(self, u1, u2):
        u1 %= self.n
        u2 %= self.n
        if (u1 + u2) % 2:
            raise DimensionMismatch(f"site ({u1},{u2}) is white")
        return int(self.color_index[u1, u2])

    def white_at(self, u1, u2):
        u1 %= self.n
        u2 %= self.n
        if (u1 + u2) % 2 == 0:
            raise DimensionMismatch(f"site ({u1},{u2}) is black")
        return int(self.color_index[u1, u2])

    def edge_endpoints(self, eid):
        """Planar edge id -> (black index, white index, j)."""
        b, r = divmod(int(eid), 4)
        return b, int(self.white_neighbor[b, r]), r + 1

    def reference_matching(self):
        """Matching as an array: white index matched to each black."""
        nb = self.n_black
        out = np.empty(nb, dtype=np.int64)
        for b in range(nb):
            out[b] = self.white_neighbor[b, self.m0_dir[b] - 1]
        return out

    def reference_edge_ids(self):
        return 4 * np.arange(self.n_black) + (self.m0_dir - 1)

    def cell_of_black(self, b):
        return (int(self.black_coord[b, 0]) // self.m,
                int(self.black_coord[b, 1]) // self.m)

    # -- faces ---------------------------------------------------------------

    @property
    def face_edges(self):
        """(n*n, 4) planar eids of each unit face: bottom, right, top, left.

        Face ``u1 * n + u2`` is the unit square with lower-left corner
        ``(u1, u2)``.
        """
        if self._face_edges is None:
            n = self.n
            fe = np.empty((n * n, 4), dtype=np.int64)
            for u1 in range(n):
                for u2 in range(n):
                    f = u1 * n + u2
                    fe[f, 0] = self._h_edge(u1, u2)
                    fe[f, 1] = self._v_edge((u1 + 1) % n, u2)
                    fe[f, 2] = self._h_edge(u1, (u2 + 1) % n)
                    fe[f, 3] = self._v_edge(u1, u2)
            self._face_edges = fe
        return self._face_edges

    def _h_edge(self, u1, u2):
        """eid of the horizontal edge (u1,u2)-(u1+1,u2)."""
        n = self.n
        if (u1 + u2) % 2 == 0:
            return 4 * self.color_index[u1 % n, u2 % n] + (EAST - 1)
        return 4 * self.color_index[(u1 + 1) % n, u2 % n] + (WEST - 1)

    def _v_edge(self, u1, u2):
        """eid of the vertical edge (u1,u2)-(u1,u2+1)."""
        n = self.n
        if (u1 + u2) % 2 == 0:
            return 4 * self.color_index[u1 % n, u2 % n] + (NORTH - 1)
        return 4 * self.color_index[u1 % n, (u2 + 1) % n] + (SOUTH - 1)

    def corridor_face_mask(self):
        """Faces lying in the corridors between cells (either coordinate
        of the lower-left corner is congruent to m-1)."""
        n, m = self.n, self.m
        u = np.arange(n)
        on1 = (u % m) == m - 1
        mask = on1[:, None] | on1[None, :]
        return mask.ravel()

    def junction_face_mask(self):
        n, m = self.n, self.m
        u = np.arange(n)
        on1 = (u % m) == m - 1
        return (on1[:, None] & on1[None, :]).ravel()

    def cell_corner_face(self, x1, x2):
        """Face id of the corridor junction at the corner of cell (x1,x2)."""
        n = self.n
        return ((x1 * self.m - 1) % n) * n + ((x2 * self.m - 1) % n)

    def dual_step(self, u1, u2, direction):
        """Crossed edge and height sign for a dual step out of face (u1,u2).

        ``direction``: 0 east, 1 north, 2 west, 3 south.  The sign is +1
        when the white endpoint of the crossed edge lies to the right of
        the step.
        """
        n = self.n
        if direction == 0:
            eid = self._v_edge((u1 + 1) % n, u2)
            white_right = (u1 + 1 + u2) % 2 == 1
        elif direction == 1:
            eid = self._h_edge(u1, (u2 + 1) % n)
            white_right = (u1 + 1 + u2 + 1) % 2 == 1
        elif direction == 2:
            eid = self._v_edge(u1, u2)
            white_right = (u1 + u2 + 1) % 2 == 1
        elif direction == 3:
            eid = self._h_edge(u1, u2)
            white_right = (u1 + u2) % 2 == 1
        else:
            raise ValueError(f"direction {direction}")
        return eid, (1 if white_right else -1)


def build_graph(spec, L, lam=0.0, validate=True):
    """Validate ``spec`` and instantiate the ``L x L`` torus graph.

    ``lam`` is the fugacity carried by every non-planar edge; it is stored
    on the graph and used as the default wherever a routine accepts an
    optional fugacity.
    """
    if validate:
        violations = validate_spec(spec)
        if violations:
            raise InvalidSpec(violations)
    if L < 1:
        raise InvalidSpec([f"L = {L} must be >= 1"])
    return TorusGraph(spec, L, lam=lam)


def square_torus_graph(n):
    """Plain n x n torus with unit weights and no decoration.

    Bypasses cell validation (useful for tiny exact checks such as the
    2 x 2 torus, where parallel edges appear); faces/corridors treat the
    whole torus as a single cell.
    """
    if n % 2:
        raise InvalidSpec([f"torus side {n} must be even for a bipartite graph"])
    return TorusGraph(CellSpec(m=n), L=1)
