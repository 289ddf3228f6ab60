"""Momentum-space analysis of the planar model on the infinite lattice.

The periodic Kasteleyn matrix block-diagonalizes over cell momenta into
a small matrix M(k) indexed by black and white types.  Everything here
derives from det M(k): the free energy density, the two simple zeros
(when the weights are in the liquid phase), the rank-1 adjugate at the
zeros, inverse-Kasteleyn entries by quadrature, the exact dimer-dimer
correlation and its leading asymptotic decomposition, and the implied
Gaussian-field prediction for height covariances.

Momenta are cell momenta in [-pi, pi]^2; cell displacements are in
units of whole cells.  Entries follow the same orientation-sign rule as
the finite-torus matrices, so determinants over the momentum grids of
the four boundary sectors reproduce the four torus determinants.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize

from .errors import (
    CoincidentPoints,
    NewtonDivergence,
    NotLiquidPhase,
    NumericalFailure,
    QuadratureNotConverged,
)
from .lattice import _STEP, EAST, NORTH, SOUTH, WEST, black_offsets, white_offsets

logger = logging.getLogger(__name__)


def _entry_sign(a1, j):
    """Orientation sign of the edge leaving a black in column a1."""
    if j == EAST:
        return 1
    if j == WEST:
        return -1
    up = a1 % 2 == 0
    if j == NORTH:
        return 1 if up else -1
    return -1 if up else 1


class BlochMatrix:
    """Momentum-space block of the periodic Kasteleyn matrix.

    ``matrix(k)`` returns the complex |I| x |I| matrix with rows indexed
    by black types and columns by white types; entry (l, l') sums the
    signed weights of edges from black type l to white type l' times
    e^{-i k . y} over the cell displacement y of each edge.
    """

    def __init__(self, spec):
        self.spec = spec
        self.m = spec.m
        self.n_types = spec.m * spec.m // 2
        boffs = black_offsets(spec.m)
        wtype = {off: i for i, off in enumerate(white_offsets(spec.m))}
        # edge_info[(ell0, j)] = (wtype0, displacement, signed weight)
        self.edge_info = {}
        rows, cols, disps, vals = [], [], [], []
        for ell0, a in enumerate(boffs):
            for j in (1, 2, 3, 4):
                d1, d2 = _STEP[j]
                w1, w2 = a[0] + d1, a[1] + d2
                y = (w1 // spec.m, w2 // spec.m)
                wt = wtype[(w1 % spec.m, w2 % spec.m)]
                val = _entry_sign(a[0], j) * spec.weight(ell0 + 1, j)
                self.edge_info[(ell0, j)] = (wt, y, val)
                rows.append(ell0)
                cols.append(wt)
                disps.append(y)
                vals.append(val)
        self._rows = np.array(rows)
        self._cols = np.array(cols)
        self._disps = np.array(disps, dtype=np.float64)
        self._vals = np.array(vals, dtype=np.float64)

    def matrices(self, ks):
        """Stack of M(k) for ks of shape (..., 2)."""
        ks = np.asarray(ks, dtype=np.float64)
        phases = np.exp(-1j * np.tensordot(ks, self._disps.T, axes=1))
        out = np.zeros(ks.shape[:-1] + (self.n_types, self.n_types),
                       dtype=np.complex128)
        np.add.at(out, (..., self._rows, self._cols), self._vals * phases)
        return out

    def matrix(self, k):
        return self.matrices(np.asarray(k, dtype=np.float64))

    def d_matrix(self, k, axis):
        """Analytic derivative of M with respect to k_axis."""
        k = np.asarray(k, dtype=np.float64)
        phases = np.exp(-1j * (self._disps @ k))
        out = np.zeros((self.n_types, self.n_types), dtype=np.complex128)
        np.add.at(out, (self._rows, self._cols),
                  -1j * self._disps[:, axis] * self._vals * phases)
        return out


def mu(bloch, k):
    """Characteristic polynomial det M(k); batched over leading axes."""
    return np.linalg.det(bloch.matrices(k))


def _adjugate(a):
    """Adjugate by cofactors; stable at (near-)singular matrices."""
    n = a.shape[0]
    out = np.zeros_like(a)
    idx = np.arange(n)
    for i in range(n):
        for j in range(n):
            minor = a[np.ix_(idx != j, idx != i)]
            out[i, j] = (-1) ** (i + j) * np.linalg.det(minor)
    return out


def mu_gradient(bloch, k):
    """(d mu/dk1, d mu/dk2) via the adjugate trace formula."""
    adj = _adjugate(bloch.matrix(k))
    return (np.trace(adj @ bloch.d_matrix(k, 0)),
            np.trace(adj @ bloch.d_matrix(k, 1)))


def winding_number(bloch, k0, radius=0.02, samples=720):
    """Winding of arg mu around a small circle centered at k0."""
    t = np.linspace(0.0, 2 * np.pi, samples, endpoint=False)
    ks = np.stack([k0[0] + radius * np.cos(t),
                   k0[1] + radius * np.sin(t)], axis=-1)
    vals = mu(bloch, ks)
    dphi = np.diff(np.angle(np.concatenate([vals, vals[:1]])))
    dphi = (dphi + np.pi) % (2 * np.pi) - np.pi
    return int(round(dphi.sum() / (2 * np.pi)))


@dataclass
class FermiData:
    """Zeros of mu with their derivative and adjugate data.

    The two zeros come in an opposite pair; the "+" label carries
    Im(beta/alpha) > 0.  U (white-type index) and V (black-type index)
    give the rank-1 adjugate at the "+" zero; the "-" factors are their
    conjugates.
    """

    bloch: BlochMatrix
    p0_plus: np.ndarray
    p0_minus: np.ndarray
    alpha_plus: complex
    beta_plus: complex
    u_plus: np.ndarray
    v_plus: np.ndarray
    mu_scale: float
    adj_residual: float
    grad_norms: tuple
    windings: tuple
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def alpha_minus(self):
        return -np.conj(self.alpha_plus)

    @property
    def beta_minus(self):
        return -np.conj(self.beta_plus)

    @property
    def u_minus(self):
        return np.conj(self.u_plus)

    @property
    def v_minus(self):
        return np.conj(self.v_plus)

    def p0(self, omega):
        return self.p0_plus if omega > 0 else self.p0_minus

    def phi(self, omega, x):
        """Linear coordinate omega*(beta x1 - alpha x2) at the zero."""
        a = self.alpha_plus if omega > 0 else self.alpha_minus
        b = self.beta_plus if omega > 0 else self.beta_minus
        return omega * (b * x[0] - a * x[1])


def _wrap(k):
    return (np.asarray(k, dtype=np.float64) + np.pi) % (2 * np.pi) - np.pi


def _newton_zero(bloch, k, tol, max_iter=60):
    k = np.array(k, dtype=np.float64)
    for _ in range(max_iter):
        val = complex(mu(bloch, k))
        if abs(val) <= tol:
            return _wrap(k)
        a, b = mu_gradient(bloch, k)
        jac = np.array([[a.real, b.real], [a.imag, b.imag]])
        try:
            step = np.linalg.solve(jac, [val.real, val.imag])
        except np.linalg.LinAlgError:
            raise NewtonDivergence("singular Jacobian during refinement")
        k = k - step
        if np.max(np.abs(k)) > 4 * np.pi:
            raise NewtonDivergence("iterate left the momentum domain")
    raise NewtonDivergence(f"no convergence to |mu| <= {tol} "
                           f"(stalled at {abs(val):.3e})")


def _polish_minima(bloch, starts, max_polish=4):
    """Minimize |mu|^2 from failed Newton starts; dedup the minima."""

    def fun(k):
        v = complex(mu(bloch, k))
        a, b = mu_gradient(bloch, k)
        grad = 2 * np.array([(np.conj(v) * a).real, (np.conj(v) * b).real])
        return abs(v) ** 2, grad

    out = []
    for k0 in starts[:max_polish]:
        res = optimize.minimize(fun, np.array(k0), jac=True, method="BFGS",
                                options={"gtol": 1e-14, "maxiter": 400})
        z = _wrap(res.x)
        if not any(np.max(np.abs(_wrap(z - zz))) < 1e-4 for zz in out):
            out.append(z)
    return out


def find_fermi_points(spec, grid=512):
    """Locate the zeros of mu and package their local data.

    Scans |mu| on a grid x grid momentum mesh, refines candidate minima
    by Newton iteration on (Re mu, Im mu), and checks the liquid-phase
    requirements: exactly two zeros, opposite and simple, with winding
    numbers +-1 and a rank-1 adjugate.
    """
    bloch = BlochMatrix(spec)
    axis = -np.pi + 2 * np.pi * (np.arange(grid) + 0.5) / grid
    k1, k2 = np.meshgrid(axis, axis, indexing="ij")
    absmu = np.empty((grid, grid))
    for i in range(grid):  # chunked batch evaluation
        ks = np.stack([k1[i], k2[i]], axis=-1)
        absmu[i] = np.abs(mu(bloch, ks))
    scale = float(absmu.max())
    if scale == 0.0:
        raise NumericalFailure("mu vanishes identically")

    # local minima on the torus grid
    local = np.ones_like(absmu, dtype=bool)
    for shift in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        local &= absmu <= np.roll(absmu, shift, axis=(0, 1))
    cand = np.argwhere(local & (absmu < 0.05 * scale))
    order = np.argsort(absmu[cand[:, 0], cand[:, 1]]) if len(cand) else []
    zeros = []
    stuck = []
    for idx in list(order)[:16]:
        i, j = cand[idx]
        try:
            z = _newton_zero(bloch, (axis[i], axis[j]), tol=1e-12)
        except NewtonDivergence:
            stuck.append((axis[i], axis[j]))
            continue
        if not any(np.max(np.abs(_wrap(z - zz))) < 1e-5 for zz in zeros):
            zeros.append(z)

    if len(zeros) < 2 and stuck:
        # Newton fails at non-simple zeros (singular Jacobian); polish
        # the surviving candidates on |mu|^2 to tell a degenerate zero
        # apart from a gap.
        for k0 in _polish_minima(bloch, stuck):
            val = abs(complex(mu(bloch, k0)))
            a, b = mu_gradient(bloch, k0)
            gn = float(np.hypot(abs(a), abs(b)))
            if val < 1e-8 * scale and gn < 1e-5 * scale:
                raise NotLiquidPhase(
                    f"degenerate (non-simple) zero at "
                    f"({k0[0]:+.6f}, {k0[1]:+.6f}): |mu| = {val:.2e}, "
                    f"|grad mu| = {gn:.2e} -- a double zero, not a "
                    f"liquid pair")
    if not zeros:
        raise NotLiquidPhase(
            f"no zeros on the torus (min |mu| = {absmu.min():.3e}, "
            f"scale {scale:.3e})")
    grads = []
    for z in zeros:
        a, b = mu_gradient(bloch, z)
        grads.append(float(np.hypot(abs(a), abs(b))))
    if len(zeros) == 1:
        w = winding_number(bloch, zeros[0])
        raise NotLiquidPhase(
            f"one double zero at ({zeros[0][0]:+.6f}, {zeros[0][1]:+.6f}) "
            f"(|grad mu| = {grads[0]:.3e}, winding {w})")
    if len(zeros) > 2:
        raise NotLiquidPhase(f"{len(zeros)} distinct zeros found")
    if any(g < 1e-6 for g in grads):
        raise NotLiquidPhase(
            f"zero is not simple (|grad mu| = {min(grads):.3e})")

    za, zb = zeros
    if np.max(np.abs(_wrap(za + zb))) > 1e-10:
        raise NotLiquidPhase(
            f"zeros are not an opposite pair: {za} vs {zb}")

    windings = tuple(winding_number(bloch, z) for z in zeros)
    if sorted(windings) != [-1, 1]:
        raise NotLiquidPhase(f"zero windings {windings}, expected +-1")

    # label by Im(beta/alpha) > 0, lexicographic tie-break
    def label_key(z):
        a, b = mu_gradient(bloch, z)
        return (b / a).imag

    ims = [label_key(z) for z in zeros]
    if abs(ims[0]) < 1e-12:
        raise NotLiquidPhase("alpha and beta collinear at the zeros")
    plus = 0 if ims[0] > 0 else 1
    if ims[plus] <= 0:
        raise NotLiquidPhase("no zero with Im(beta/alpha) > 0")
    p_plus = zeros[plus]
    p_minus = zeros[1 - plus]
    alpha, beta = mu_gradient(bloch, p_plus)

    adj = _adjugate(bloch.matrix(p_plus))
    uu, sv, vh = np.linalg.svd(adj)
    if sv[1] > 1e-8 * sv[0]:
        raise NotLiquidPhase(
            f"adjugate at the zero is not rank 1 "
            f"(sigma2/sigma1 = {sv[1] / sv[0]:.3e})")
    u_plus = uu[:, 0] * sv[0]
    v_plus = vh[0].copy()
    resid = float(np.max(np.abs(np.outer(u_plus, v_plus) - adj)))
    if resid > 1e-8 * sv[0]:
        raise NumericalFailure(
            f"rank-1 adjugate reconstruction failed ({resid:.3e})")

    fermi = FermiData(
        bloch=bloch, p0_plus=p_plus, p0_minus=p_minus,
        alpha_plus=complex(alpha), beta_plus=complex(beta),
        u_plus=u_plus, v_plus=v_plus, mu_scale=scale,
        adj_residual=resid / sv[0],
        grad_norms=(grads[plus], grads[1 - plus]),
        windings=(windings[plus], windings[1 - plus]),
    )
    # conjugation symmetry at the opposite zero, as a numerical check
    adj_m = _adjugate(bloch.matrix(p_minus))
    err = np.max(np.abs(np.outer(fermi.u_minus, fermi.v_minus) - adj_m))
    if err > 1e-6 * sv[0]:
        raise NumericalFailure(
            f"conjugate-pair adjugate mismatch ({err:.3e})")
    logger.info("fermi points at (%.6f, %.6f) / (%.6f, %.6f)",
                p_plus[0], p_plus[1], p_minus[0], p_minus[1])
    return fermi


# ---------------------------------------------------------------------------
# inverse Kasteleyn entries

_NZ = 64  # unit-circle samples for Laurent coefficient extraction


def _laurent(vals, tiny=1e-13):
    """Laurent coefficients (coeffs, mindeg) from unit-circle samples."""
    c = np.fft.fft(vals) / len(vals)
    half = len(vals) // 2
    # degrees -half .. half-1
    coef = np.concatenate([c[-half:], c[:half]])
    mags = np.abs(coef)
    keep = mags > tiny * max(mags.max(), 1e-300)
    if not keep.any():
        return np.zeros(1, dtype=np.complex128), 0
    lo = int(np.argmax(keep))
    hi = len(keep) - int(np.argmax(keep[::-1]))
    return coef[lo:hi], lo - half


def _series_inverse(poly, nterms):
    """Taylor coefficients of 1/poly(z) at 0 (poly[0] != 0)."""
    inv = np.zeros(nterms, dtype=np.complex128)
    inv[0] = 1.0 / poly[0]
    for n in range(1, nterms):
        s = 0.0
        for j in range(1, min(n, len(poly) - 1) + 1):
            s += poly[j] * inv[n - j]
        inv[n] = -s / poly[0]
    return inv


def _circle_average(num, num_lo, den, den_lo):
    """(1/2pi) Int dk N(e^{ik})/D(e^{ik}) by residues.

    N and D are Laurent polynomials given as (coeffs ascending, lowest
    degree).  Equals the sum of residues of N(z)/(z D(z)) inside the
    unit circle; poles exactly on the circle are assumed absent (the
    caller's outer quadrature never lands on them).
    """
    # g(z) = N(z) / (z D(z)) = z^s P(z) / Q(z), Q(0) != 0
    p = np.asarray(num, dtype=np.complex128)
    q = np.asarray(den, dtype=np.complex128)
    qnz = np.nonzero(np.abs(q) > 0)[0]
    p_trim = np.trim_zeros(p, "f")
    plo = num_lo + (len(p) - len(p_trim))
    p = np.trim_zeros(p_trim, "b")
    if len(p) == 0:
        return 0.0 + 0.0j
    qlo = den_lo + qnz[0]
    q = q[qnz[0]: qnz[-1] + 1]
    # The average is invariant under k -> -k, which reverses both
    # coefficient lists.  A strongly negative net exponent s raises
    # small roots to large negative powers and destroys the sum by
    # cancellation, so evaluate whichever orientation has the larger s.
    s = plo - 1 - qlo
    s_rev = (qlo + len(q) - 1) - (plo + len(p) - 1) - 1
    if s_rev > s:
        p, q = p[::-1], q[::-1]
        plo, qlo = -(plo + len(p) - 1), -(qlo + len(q) - 1)
        s = s_rev
    roots = np.roots(q[::-1])  # np.roots wants descending order
    inside = roots[np.abs(roots) < 1.0]
    dq = np.polynomial.polynomial.polyder(q)
    total = 0.0 + 0.0j
    pval = np.polynomial.polynomial.polyval
    for r in inside:
        total += r ** s * pval(r, p) / pval(r, dq)
    if s < 0:
        # pole at the origin of order -s: Taylor coefficient of P/Q
        nterms = -s
        invq = _series_inverse(q, nterms)
        conv = np.convolve(p[:nterms], invq)[: nterms]
        total += conv[nterms - 1]
    return total


def inverse_kasteleyn(fermi, w, b, method="residue", target=1e-6):
    """Infinite-volume inverse entry between a white and a black vertex.

    ``w = (x, ell)`` and ``b = (x', ell')`` give cell coordinates and
    1-based types.  The defining double integral is evaluated either by
    the residue-hybrid engine (``method="residue"``: exact contour sum
    over the momentum conjugate to the larger displacement component,
    adaptive quadrature over the other) or by the literal shifted
    midpoint rule with Richardson extrapolation (``method="midpoint"``).
    Results are cached on the FermiData object.
    """
    (xw, ellw), (xb, ellb) = w, b
    x = (int(xw[0]) - int(xb[0]), int(xw[1]) - int(xb[1]))
    key = (x, int(ellw), int(ellb), method)
    if key in fermi._cache:
        return fermi._cache[key]
    if method == "midpoint":
        val = _midpoint_inverse(fermi, x, int(ellw), int(ellb), target)
    elif method == "residue":
        val = _residue_inverse(fermi, x, int(ellw), int(ellb), target)
    else:
        raise ValueError(f"unknown method {method!r}")
    fermi._cache[key] = val
    return val


def _residue_inverse(fermi, x, ellw, ellb, target):
    bloch = fermi.bloch
    n = bloch.n_types
    axis = 0 if abs(x[0]) >= abs(x[1]) else 1
    other = 1 - axis
    kz = 2 * np.pi * np.arange(_NZ) / _NZ  # z-samples on the circle
    rows = np.arange(n)
    row_keep = rows != (ellb - 1)
    col_keep = rows != (ellw - 1)
    cof_sign = (-1) ** ((ellw - 1) + (ellb - 1))

    def inner(kt):
        ks = np.zeros((_NZ, 2))
        ks[:, axis] = kz
        ks[:, other] = kt
        ms = bloch.matrices(ks)
        mu_s = np.linalg.det(ms)
        adj_s = cof_sign * np.linalg.det(
            ms[:, row_keep][:, :, col_keep])
        num, num_lo = _laurent(adj_s)
        den, den_lo = _laurent(mu_s)
        val = _circle_average(num, num_lo - x[axis], den, den_lo)
        return val * np.exp(-1j * kt * x[other])

    pts = sorted({float(_wrap(fermi.p0_plus[other])),
                  float(_wrap(fermi.p0_minus[other]))})
    pts = [p for p in pts if -np.pi < p < np.pi]
    re, re_err = integrate.quad(lambda t: inner(t).real, -np.pi, np.pi,
                                points=pts, limit=200, epsabs=1e-10,
                                epsrel=1e-10)
    im, im_err = integrate.quad(lambda t: inner(t).imag, -np.pi, np.pi,
                                points=pts, limit=200, epsabs=1e-10,
                                epsrel=1e-10)
    if re_err + im_err > target:
        raise QuadratureNotConverged(
            f"transverse quadrature error {re_err + im_err:.2e} "
            f"exceeds {target:.2e}")
    return (re + 1j * im) / (2 * np.pi)


def _midpoint_sum(bloch, x, ellw, ellb, nn):
    n = bloch.n_types
    rows = np.arange(n)
    row_keep = rows != (ellb - 1)
    col_keep = rows != (ellw - 1)
    cof_sign = (-1) ** ((ellw - 1) + (ellb - 1))
    axis = -np.pi + 2 * np.pi * (np.arange(nn) + 0.5) / nn
    total = 0.0 + 0.0j
    for i in range(nn):  # chunk rows to bound memory
        ks = np.stack([np.full(nn, axis[i]), axis], axis=-1)
        ms = bloch.matrices(ks)
        mu_s = np.linalg.det(ms)
        adj_s = cof_sign * np.linalg.det(ms[:, row_keep][:, :, col_keep])
        phase = np.exp(-1j * (axis[i] * x[0] + axis * x[1]))
        total += np.sum(adj_s / mu_s * phase)
    return total * (2 * np.pi / nn) ** 2 / (2 * np.pi) ** 2


def _midpoint_inverse(fermi, x, ellw, ellb, target, ns=(256, 512, 1024)):
    """Literal midpoint/Richardson evaluation with an honest error bound.

    The midpoint grid periodizes the result with images at distance N,
    so the leading error is O(1/N) with an oscillating prefactor; the
    extrapolated error estimate is the difference of successive
    Richardson values and the call fails honestly when it exceeds the
    requested target.
    """
    bloch = fermi.bloch
    # the shifted (half-integer) grid never contains a Fermi point when
    # the zeros sit at grid-commensurate momenta; verify and bail out
    # to a slightly different shift if one gets too close.
    vals = [_midpoint_sum(bloch, x, ellw, ellb, n) for n in ns]
    rich = [2 * vals[i + 1] - vals[i] for i in range(len(ns) - 1)]
    err = abs(rich[-1] - rich[-2]) if len(rich) > 1 else np.inf
    if err > target:
        raise QuadratureNotConverged(
            f"midpoint/Richardson error estimate {err:.2e} exceeds "
            f"{target:.2e} (oscillating image terms decay like 1/N)")
    return rich[-1]


# ---------------------------------------------------------------------------
# correlations

def _edge_data(fermi, e):
    """(black cell x, black type ell, white cell, white type, K value)."""
    x, ell, j = (tuple(map(int, e[0])), int(e[1]), int(e[2]))
    wt, y, val = fermi.bloch.edge_info[(ell - 1, j)]
    wcell = (x[0] + y[0], x[1] + y[1])
    return x, ell, wcell, wt + 1, val, y


def correlation_planar(fermi, e1, e2, method="residue"):
    """Truncated dimer-dimer correlation on the infinite planar lattice.

    Edges are ``(cell, ell, j)`` with 1-based black type and direction.
    """
    x1, l1, wc1, wl1, k1, _ = _edge_data(fermi, e1)
    x2, l2, wc2, wl2, k2, _ = _edge_data(fermi, e2)
    kinv_21 = inverse_kasteleyn(fermi, (wc2, wl2), (x1, l1), method=method)
    kinv_12 = inverse_kasteleyn(fermi, (wc1, wl1), (x2, l2), method=method)
    val = -k1 * k2 * kinv_21 * kinv_12
    if abs(val.imag) > 1e-7 * max(1.0, abs(val.real)):
        raise NumericalFailure(
            f"correlation has a spurious imaginary part {val.imag:.3e}")
    return float(val.real)


def _amplitudes(fermi, ell, j):
    """K0 and H0 amplitudes of an edge type for omega = +1, -1."""
    wt, y, val = fermi.bloch.edge_info[(ell - 1, j)]
    out = {}
    for omega in (1, -1):
        p0 = fermi.p0(omega)
        u = fermi.u_plus if omega > 0 else fermi.u_minus
        v = fermi.v_plus if omega > 0 else fermi.v_minus
        phase = np.exp(-1j * (p0[0] * y[0] + p0[1] * y[1]))
        k0 = val * phase * u[wt] * v[ell - 1] / (2 * np.pi)
        u_opp = fermi.u_minus if omega > 0 else fermi.u_plus
        h0 = val * np.conj(phase) * u_opp[wt] * v[ell - 1] / (2 * np.pi)
        out[omega] = (k0, h0)
    return out


def asymptotic_correlation(fermi, e1, e2):
    """Leading long-distance terms of the truncated correlation.

    Returns ``(A, B)``: the smooth inverse-square term and the
    oscillating term carried by e^{2i p0 (x - x')}; their sum misses
    the truth by O(|x - x'|^{-3}).
    """
    x1, l1, _, _, _, _ = _edge_data(fermi, e1)
    x2, l2, _, _, _, _ = _edge_data(fermi, e2)
    j1, j2 = int(e1[2]), int(e2[2])
    dx = (x1[0] - x2[0], x1[1] - x2[1])
    amp1 = _amplitudes(fermi, l1, j1)
    amp2 = _amplitudes(fermi, l2, j2)
    a_val = 0.0 + 0.0j
    b_val = 0.0 + 0.0j
    for omega in (1, -1):
        phi = fermi.phi(omega, dx)
        k01, _ = amp1[omega]
        k02, _ = amp2[omega]
        a_val += k01 * k02 / phi ** 2
        _, h01 = amp1[omega]
        _, h02 = amp2[-omega]
        p0 = fermi.p0(omega)
        osc = np.exp(2j * (p0[0] * dx[0] + p0[1] * dx[1]))
        b_val += h01 * h02 * osc / abs(phi) ** 2
    for name, v in (("A", a_val), ("B", b_val)):
        if abs(v.imag) > 1e-9 * max(1.0, abs(v.real)):
            raise NumericalFailure(
                f"{name}-term has imaginary part {v.imag:.3e}")
    return float(a_val.real), float(b_val.real)


def gff_prediction(fermi, x1, x2, x3, x4, nu=1.0):
    """Gaussian-field prediction for E[(h1 - h2)(h3 - h4)].

    Heights live on the coarse faces indexed by cell coordinates; the
    prediction is (nu / 2 pi^2) Re log of the cross-ratio of the phi_+
    images.  Coincident points across the two differences drop their
    (lattice-regularized, O(1)) factors; coincident points within one
    difference make the request degenerate.
    """
    pts = [tuple(map(int, p)) for p in (x1, x2, x3, x4)]
    if pts[0] == pts[1] or pts[2] == pts[3]:
        raise CoincidentPoints(
            "zero-length height difference requested")
    phi = [fermi.phi(1, p) for p in pts]

    def term(i, j):
        if pts[i] == pts[j]:
            return 0.0
        return float(np.log(abs(phi[i] - phi[j])))

    val = term(3, 0) + term(2, 1) - term(3, 1) - term(2, 0)
    return nu / (2 * np.pi ** 2) * val


def free_energy_density(spec, grid=256):
    """Planar free energy per cell: mean of log |mu| over momenta."""
    bloch = BlochMatrix(spec)
    axis = -np.pi + 2 * np.pi * (np.arange(grid) + 0.5) / grid
    total = 0.0
    for a in axis:
        ks = np.stack([np.full(grid, a), axis], axis=-1)
        total += np.sum(np.log(np.abs(mu(bloch, ks))))
    return total / grid ** 2


def fermi_report(fermi):
    """JSON-ready summary: zeros, derivatives, and edge amplitudes."""

    def c2l(z):
        return [float(np.real(z)), float(np.imag(z))]

    amps = []
    for ell in range(1, fermi.bloch.n_types + 1):
        for j in (1, 2, 3, 4):
            by_omega = _amplitudes(fermi, ell, j)
            amps.append({
                "ell": ell, "j": j,
                "K0_plus": c2l(by_omega[1][0]),
                "K0_minus": c2l(by_omega[-1][0]),
                "H0_plus": c2l(by_omega[1][1]),
                "H0_minus": c2l(by_omega[-1][1]),
            })
    return {
        "p0_plus": [float(v) for v in fermi.p0_plus],
        "p0_minus": [float(v) for v in fermi.p0_minus],
        "alpha_plus": c2l(fermi.alpha_plus),
        "beta_plus": c2l(fermi.beta_plus),
        "im_beta_over_alpha": float(
            (fermi.beta_plus / fermi.alpha_plus).imag),
        "grad_norms": [float(g) for g in fermi.grad_norms],
        "windings": [int(w) for w in fermi.windings],
        "adj_rank1_residual": float(fermi.adj_residual),
        "U_plus": [c2l(z) for z in fermi.u_plus],
        "V_plus": [c2l(z) for z in fermi.v_plus],
        "amplitudes": amps,
    }
