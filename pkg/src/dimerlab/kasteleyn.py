"""Signed adjacency matrices and determinant partition functions.

Orientation of the planar lattice edges ("basic orientation"): horizontal
edges point east; vertical edges point up in even columns and down in odd
columns.  Every elementary square then has an odd number of edges agreeing
with a clockwise traversal, which is the defining property needed for
determinant counting.  Extended periodically to the torus this single
orientation is *not* enough: matchings are counted with winding-dependent
signs.  The four matrices ``K_theta`` obtained by additionally flipping
all edges across the horizontal seam (when ``theta[0] == +1``) and/or the
vertical seam (when ``theta[1] == +1``) provide the standard inclusion-
exclusion: with ``c_theta = -1`` for ``theta = (-1,-1)`` and ``+1``
otherwise,

    Z = sum_theta (c_theta / 2) det K_theta / s(M0),

where ``s(M0)`` is the signature of the reference matching, computed
explicitly in :func:`reference_sign`.  All matrices here contain lattice
edges only; bridge edges never enter them and are treated by the sector
expansion in :mod:`dimerlab.grassmann`.
"""

import logging
import math

import numpy as np

from .errors import DimensionMismatch, NumericalFailure, TooLarge

logger = logging.getLogger(__name__)

THETAS = ((-1, -1), (-1, 1), (1, -1), (1, 1))

MAX_DENSE = 6000


def theta_coefficient(theta):
    return -1.0 if tuple(theta) == (-1, -1) else 1.0


def orientation_signs(graph):
    """Basic-orientation sign of every lattice edge, keyed (black, j-1).

    +1 when the edge points black -> white.
    """
    nb = graph.n_black
    s = np.empty((nb, 4), dtype=np.int8)
    col_even = graph.black_coord[:, 0] % 2 == 0
    s[:, 0] = 1                                  # east
    s[:, 2] = -1                                 # west
    s[:, 1] = np.where(col_even, 1, -1)          # north
    s[:, 3] = np.where(col_even, -1, 1)          # south
    return s


def edge_values(graph, theta, zeroed_eids=()):
    """Signed weight of every lattice edge in the sector ``theta``.

    ``zeroed_eids`` removes edges (set to exactly 0); used to evaluate
    minors on the lattice with crossed edges deleted.
    """
    s = orientation_signs(graph).astype(np.float64)
    t1, t2 = theta
    if t1 == 1:
        s[graph.wrap1] = -s[graph.wrap1]
    if t2 == 1:
        s[graph.wrap2] = -s[graph.wrap2]
    vals = s * graph.edge_weight
    for eid in zeroed_eids:
        vals[divmod(int(eid), 4)] = 0.0
    return vals


def kasteleyn_matrix(graph, theta, zeroed_eids=()):
    """Dense signed adjacency matrix, black rows by white columns.

    Parallel edges (which occur only on degenerate 2x2 tori) accumulate
    into the same entry, which is exactly what the determinant expansion
    requires.
    """
    nb = graph.n_black
    if nb > MAX_DENSE:
        raise TooLarge(f"dense Kasteleyn matrix capped at {MAX_DENSE} blacks")
    vals = edge_values(graph, theta, zeroed_eids)
    K = np.zeros((nb, nb), dtype=np.float64)
    rows = np.repeat(np.arange(nb), 4)
    cols = graph.white_neighbor.ravel()
    np.add.at(K, (rows, cols), vals.ravel())
    return K


def kasteleyn_sparse(graph, theta):
    """CSC variant of :func:`kasteleyn_matrix` without the size cap.

    Intended for single-column inverse entries on large tori via sparse
    LU; duplicate (row, col) pairs are summed by the COO conversion.
    """
    from scipy import sparse

    nb = graph.n_black
    vals = edge_values(graph, theta)
    rows = np.repeat(np.arange(nb), 4)
    cols = graph.white_neighbor.ravel()
    return sparse.coo_matrix(
        (vals.ravel(), (rows, cols)), shape=(nb, nb)).tocsc()


def _sector_factorizations(graph):
    """Sparse LU plus log-magnitude and sign of det per sector.

    Returns ``{theta: (lu, mat, logdet, sign)}``; a vanishing determinant
    is flagged by ``sign == 0`` (with ``lu = None``), keeping the sparse
    matrix around for the degenerate-sector treatment.
    """
    from scipy.sparse.linalg import splu

    out = {}
    for theta in THETAS:
        mat = kasteleyn_sparse(graph, theta)
        try:
            lu = splu(mat)
        except RuntimeError:
            out[theta] = (None, mat, 0.0, 0)
            continue
        diag = lu.U.diagonal()
        if np.any(diag == 0.0):
            out[theta] = (None, mat, 0.0, 0)
            continue
        logdet = float(np.sum(np.log(np.abs(diag))))
        sgn = perm_parity(lu.perm_r) * perm_parity(lu.perm_c)
        out[theta] = (lu, mat, logdet, sgn * int(np.prod(np.sign(diag))))
    return out


def _sector_scale(facts):
    """Normalization shared by all sector-weighted sums.

    Returns ``(dmax, z)`` with z the signed det sum rescaled by
    ``exp(-dmax)``; every sector enters later formulas through
    ``0.5 c_theta (...) exp(logdet - dmax) / z``.
    """
    live = {t: f for t, f in facts.items() if f[3] != 0}
    if not live:
        raise NumericalFailure("all four sector matrices are singular")
    dmax = max(f[2] for f in live.values())
    z = sum(0.5 * theta_coefficient(t) * f[3] * np.exp(f[2] - dmax)
            for t, f in live.items())
    if z <= 0.0:
        raise NumericalFailure(f"sector-weighted sum not positive ({z:.3e})")
    return dmax, z


def theta_lu_weights(graph):
    """Sparse LU of every non-singular sector with its weight in Z.

    Returns ``{theta: (lu, w)}`` where ``w = (c_theta/2) det K_theta / Z``
    and Z is the lattice-edge partition function (fugacity zero).  The
    determinant signs come from the LU permutation parities, and the
    common exponential scale cancels in the normalized weights.
    """
    facts = _sector_factorizations(graph)
    dmax, z = _sector_scale(facts)
    return {t: (lu, 0.5 * theta_coefficient(t) * sgn * np.exp(ld - dmax) / z)
            for t, (lu, _, ld, sgn) in facts.items() if sgn != 0}


def theta_average_inverse(graph, pairs):
    """Weighted-average inverse entries sum_theta w_theta K_theta^{-1}[w, b].

    ``pairs`` is a sequence of (white index, black index); the average
    converges to the infinite-volume inverse as the torus grows.
    """
    stats = theta_lu_weights(graph)
    pairs = list(pairs)
    blacks = sorted({b for _, b in pairs})
    bcol = {b: i for i, b in enumerate(blacks)}
    out = np.zeros(len(pairs))
    rhs = np.zeros((graph.n_black, len(blacks)))
    for b, i in bcol.items():
        rhs[b, i] = 1.0
    for theta, (lu, w) in stats.items():
        cols = lu.solve(rhs)
        for i, (wi, bi) in enumerate(pairs):
            out[i] += w * cols[wi, bcol[bi]]
    return out


def singular_det_derivatives(a, rows, cols, rtol=1e-12):
    """First and second determinant derivatives of a singular matrix.

    For the dense square matrix ``a`` and entry positions ``(rows[i],
    cols[i])`` returns ``(corank, logpd, cof, sec)`` where

    * ``cof[i] = d det / d a[rows[i], cols[i]]``  and
    * ``sec[i, j] = d^2 det / (d a[rows[i], cols[i]] d a[rows[j], cols[j]])``,

    both divided by ``exp(logpd)`` with ``logpd`` the log pseudo-
    determinant (product of singular values above ``rtol * s_max``).  At
    a singular point the usual det * inverse-minor expressions are
    unavailable; here the derivatives are rebuilt from the SVD via
    Cauchy-Binet, where only the null directions survive.  corank >= 3
    (or >= 2 for ``cof``) forces the exact zeros returned.
    """
    u, s, vt = np.linalg.svd(a)
    n = a.shape[0]
    tol = rtol * s[0]
    nz = int(np.sum(s > tol))
    corank = n - nz
    k = len(rows)
    cof = np.zeros(k)
    sec = np.zeros((k, k))
    if corank >= 3:
        return corank, 0.0, cof, sec
    logpd = float(np.sum(np.log(s[:nz])))
    detuv = float(np.sign(np.linalg.det(u)) * np.sign(np.linalg.det(vt)))
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    if corank == 2:
        # single Cauchy-Binet term: both struck singular directions are
        # the null modes; pairs sharing a row or column vanish with the
        # 2x2 determinants.
        ua, ub = u[rows, -2], u[rows, -1]
        va, vb = vt[-2, cols], vt[-1, cols]
        d2u = np.outer(ua, ub) - np.outer(ub, ua)
        d2v = np.outer(va, vb) - np.outer(vb, va)
        sec = detuv * d2u * d2v
        return corank, logpd, cof, sec
    # corank 1: adjugate is rank one, second derivatives sum over the
    # pairs (kept mode m, null mode) of stripped singular directions.
    un, vn = u[rows, -1], vt[-1, cols]
    cof = detuv * un * vn
    r = 1.0 / s[:nz]
    ua = u[rows, :nz]
    va = vt[:nz, cols].T
    g = (ua * va) @ r
    h = un * vn
    w = (ua * r) @ va.T
    sec = (np.outer(g, h) + np.outer(h, g)
           - np.outer(vn, un) * w - np.outer(un, vn) * w.T)
    sec *= detuv
    return corank, logpd, cof, sec


def edge_moments(graph, eids):
    """Exact occupation probabilities and covariances of lattice edges.

    For the lattice-edge measure (bridge fugacity 0) returns ``(probs,
    cov)``: probs[i] = P(edge i occupied), cov[i, j] the occupation
    covariance, both assembled from 2x2 inverse minors summed over the
    signed sector weights.  ``eids`` are planar edge ids (4*black +
    direction); edges sharing a vertex get pair probability zero from
    the vanishing minor automatically.  Sectors whose determinant
    vanishes (weights at a degenerate point, e.g. fully uniform) still
    contribute to the moments through their determinant derivatives and
    are handled by :func:`singular_det_derivatives`.
    """
    facts = _sector_factorizations(graph)
    dmax, z = _sector_scale(facts)
    eids = list(eids)
    blacks = np.array([e // 4 for e in eids])
    js = np.array([e % 4 for e in eids])
    whites = graph.white_neighbor[blacks, js]
    dblacks = sorted(set(int(b) for b in blacks))
    bcol = {b: i for i, b in enumerate(dblacks)}
    cols_of = np.array([bcol[int(b)] for b in blacks])
    rhs = np.zeros((graph.n_black, len(dblacks)))
    for b, i in bcol.items():
        rhs[b, i] = 1.0
    probs = np.zeros(len(eids))
    pair = np.zeros((len(eids), len(eids)))
    for theta, (lu, mat, ld, sgn) in facts.items():
        vals = edge_values(graph, theta)
        kv = vals[blacks, js]
        kvv = kv[:, None] * kv[None, :]
        if sgn != 0:
            w = 0.5 * theta_coefficient(theta) * sgn * np.exp(ld - dmax) / z
            sol = lu.solve(rhs)
            minv = sol[whites][:, cols_of]  # minv[i, j] = K^-1(w_i, b_j)
            d = np.diag(minv).copy()
            probs += w * kv * d
            pair += w * kvv * (d[:, None] * d[None, :] - minv * minv.T)
            continue
        if graph.n_black > MAX_DENSE:
            raise TooLarge(
                "a sector determinant vanishes and the degenerate-sector "
                f"path needs a dense SVD; n_black={graph.n_black} exceeds "
                f"{MAX_DENSE}")
        # sector matrices are indexed (black row, white column)
        corank, logpd, cof, sec = singular_det_derivatives(
            mat.toarray(), blacks, whites)
        if corank >= 3:
            continue
        w = 0.5 * theta_coefficient(theta) * np.exp(logpd - dmax) / z
        probs += w * kv * cof
        pair += w * kvv * sec
    cov = pair - probs[:, None] * probs[None, :]
    np.fill_diagonal(cov, probs * (1.0 - probs))
    return probs, cov


def perm_parity(perm):
    """Sign of a permutation given as an int array, by cycle counting."""
    perm = np.asarray(perm, dtype=np.int64)
    n = perm.shape[0]
    seen = np.zeros(n, dtype=bool)
    sign = 1
    for i in range(n):
        if seen[i]:
            continue
        j = i
        clen = 0
        while not seen[j]:
            seen[j] = True
            j = perm[j]
            clen += 1
        if clen % 2 == 0:
            sign = -sign
    return sign


def reference_sign(graph):
    """Signature s(M0) of the reference matching.

    The product of the signed reference-edge entries times the parity of
    the black -> white index map; this is the constant relating
    ``det K_theta`` to the signed matching sums, fixed once per graph.
    Reference edges never wrap, so the value is theta-independent.
    """
    s = orientation_signs(graph)
    perm = np.empty(graph.n_black, dtype=np.int64)
    prod = 1
    for b in range(graph.n_black):
        j = graph.m0_dir[b] - 1
        perm[b] = graph.white_neighbor[b, j]
        prod *= int(s[b, j])
    return prod * perm_parity(perm)


def partition_function(graph):
    """Planar partition function (bridge fugacity 0) via four determinants."""
    s0 = reference_sign(graph)
    z = 0.0
    for theta in THETAS:
        K = kasteleyn_matrix(graph, theta)
        z += theta_coefficient(theta) * np.linalg.det(K)
    z = 0.5 * z / s0
    if not np.isfinite(z):
        raise NumericalFailure("determinant overflow; use log_partition_function")
    return z


def planar_partition(graph):
    """Partition function of the lattice measure (bridges carry weight 0)."""
    return partition_function(graph)


def log_partition_function(graph):
    """(sign, log|Z|) of the planar partition function, overflow-safe.

    Combines the four determinants with a signed log-sum-exp.
    """
    s0 = reference_sign(graph)
    signs, logs = [], []
    for theta in THETAS:
        sgn, logdet = np.linalg.slogdet(kasteleyn_matrix(graph, theta))
        c = theta_coefficient(theta) * sgn * s0
        if sgn != 0.0:
            signs.append(c)
            logs.append(logdet)
    if not logs:
        return 0.0, -math.inf
    logs = np.array(logs)
    signs = np.array(signs)
    top = logs.max()
    acc = float(np.sum(signs * np.exp(logs - top))) * 0.5
    if acc == 0.0:
        return 0.0, -math.inf
    return math.copysign(1.0, acc), top + math.log(abs(acc))


def signed_minor(A, rows, cols):
    """Minor of ``A`` with sign bookkeeping for paired row/column removal.

    ``rows[i]`` is removed together with ``cols[i]``; pairs are treated as
    commuting units, so their order is irrelevant.  Repeated rows or
    columns make the result 0.  Convention (verified against the symbolic
    reference in the test suite): with rows sorted increasingly,

        sign = (-1)^k * (-1)^(sum rows + sum cols) * parity(column ranks)

    times the determinant of ``A`` with those rows and columns deleted.
    """
    A = np.asarray(A)
    n = A.shape[0]
    if A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"square matrix required, got {A.shape}")
    k = len(rows)
    if k != len(cols):
        raise DimensionMismatch("rows and cols must pair up")
    if k == 0:
        return float(np.linalg.det(A))
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if len(set(rows.tolist())) < k or len(set(cols.tolist())) < k:
        return 0.0
    order = np.argsort(rows)
    rows_s = rows[order]
    cols_s = cols[order]
    sign = perm_parity(np.argsort(cols_s))  # parity of the column rank pattern
    keep_r = np.setdiff1d(np.arange(n), rows_s)
    keep_c = np.setdiff1d(np.arange(n), cols_s)
    sub = A[np.ix_(keep_r, keep_c)]
    det = float(np.linalg.det(sub)) if keep_r.size else 1.0
    total_sign = ((-1) ** k) * ((-1) ** int(rows.sum() + cols.sum())) * sign
    return total_sign * det


def theta_inverse(graph, theta, zeroed_eids=()):
    """Inverse of the sector matrix, white rows by black columns."""
    K = kasteleyn_matrix(graph, theta, zeroed_eids)
    try:
        return np.linalg.inv(K)  # inv(K)[w, b] pairs white w with black b
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"sector {theta} is singular") from exc
