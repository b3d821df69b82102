"""Restricted Poincare series over orbit tables.

Filters select the rows whose projected Cartan vector lies near a line or
a subspace of a_theta; partial sums, abscissa fits and growth-indicator
estimates are computed on the selected rows, and the dichotomy experiment
chains them into a regime verdict.

All estimates are finite-ball surrogates for asymptotic quantities.  The
completeness horizon is where a word ball stops containing every element
below a given value: beyond it sums are flagged as truncated.
"""

import itertools
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.spatial
import scipy.stats

from .diagnostics import anosov_diagnostic, antipodality_check, regularity_diagnostic
from .errors import (
    DiagnosticsFailed,
    Infeasible,
    InsufficientData,
    InsufficientRange,
    NotProper,
)
from .linalg import (
    BLOCK_TOL,
    LinearForm,
    a_theta_basis,
    in_chamber,
    p_theta,
    sum_of_positive_roots_form,
    theta_blocks,
)

HORIZON_FACTOR = 0.8
PROPER_EPS = 1.0
MIN_POINTS = 12
TAIL_FRACTION = 0.05
ABSCISSA_POINTS = 32
MIN_PSI_SHELLS = 4
INTERIOR_INRADIUS = 1e-3
GRID_RESOLUTION = 16
HALF_ANGLES = (0.3, 0.2, 0.1)
MIN_CONE_COUNT = 2
POSITIVITY_SAMPLES = 50
RADIUS_FACTORS = (0.2, 0.25, 0.3, 0.35, 0.4)
TGRID_POINTS = 24
MIN_WINDOW = 0.05
DIVERGENT_POWER = 0.25
HULL_CHUNK = 500_000

REGIMES = ("bounded", "logarithmic", "power", "divergent-linear")


# ---------------------------------------------------------------------------
# directions and subspaces


@dataclass(frozen=True)
class DirectionSpec:
    """A unit vector of the closed positive chamber of a_theta."""

    u: np.ndarray = field(repr=False)
    theta: tuple

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float).copy()
        if abs(np.linalg.norm(u) - 1.0) > 1e-12:
            raise ValueError("direction must have unit norm")
        if abs(u.sum()) > BLOCK_TOL or np.max(np.abs(p_theta(u, self.theta) - u)) > BLOCK_TOL:
            raise ValueError("direction must lie in a_theta")
        if not in_chamber(u, tol=1e-12):
            raise ValueError("direction must lie in the positive chamber")
        u.setflags(write=False)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "theta", tuple(self.theta))

    @classmethod
    def from_vector(cls, v, theta):
        v = p_theta(np.asarray(v, dtype=float), theta)
        v = v - v.mean()
        return cls(v / np.linalg.norm(v), theta)


@dataclass(frozen=True)
class SubspaceSpec:
    """A linear subspace W of a_theta given by an orthonormal basis (rows)."""

    basis: np.ndarray = field(repr=False)
    theta: tuple

    def __post_init__(self):
        b = np.array(self.basis, dtype=float, ndmin=2)
        if b.shape[0] and np.max(np.abs(b @ b.T - np.eye(b.shape[0]))) > 1e-10:
            raise ValueError("basis must be orthonormal")
        for row in b:
            if abs(row.sum()) > BLOCK_TOL or np.max(np.abs(p_theta(row, self.theta) - row)) > BLOCK_TOL:
                raise ValueError("basis vectors must lie in a_theta")
        b.setflags(write=False)
        object.__setattr__(self, "basis", b)
        object.__setattr__(self, "theta", tuple(self.theta))

    @classmethod
    def span(cls, vectors, theta, tol=1e-10):
        """Orthonormalized span of the given a_theta vectors."""
        m = np.array(vectors, dtype=float, ndmin=2)
        m = p_theta(m, theta)
        m = m - m.mean(axis=1, keepdims=True)
        u, s, vt = np.linalg.svd(m, full_matrices=False)
        rank = int(np.sum(s > tol * max(s[0], 1e-300))) if s.size else 0
        # Gram-Schmidt keeps the first vector as the first basis element
        q, r = np.linalg.qr(m.T)
        keep = np.abs(np.diag(r)) > tol * max(np.abs(np.diag(r)).max(), 1e-300)
        q = q[:, keep] * np.sign(np.diag(r)[keep])
        if q.shape[1] != rank:
            q = vt[:rank].T
        return cls(q.T, theta)

    @classmethod
    def full(cls, d, theta):
        return cls(a_theta_basis(d, theta).T, theta)

    @classmethod
    def line(cls, direction):
        return cls(direction.u[None, :], direction.theta)

    @property
    def dim(self):
        return self.basis.shape[0]

    @property
    def d(self):
        return self.basis.shape[1]

    @property
    def codim(self):
        return len(self.theta) - self.dim

    def distance(self, points):
        """Euclidean distance of each row of ``points`` to W."""
        x = np.asarray(points, dtype=float)
        resid = x - (x @ self.basis.T) @ self.basis
        return np.linalg.norm(resid, axis=-1)

    def complement(self):
        """Orthonormal basis (rows) of the orthogonal complement of W in a_theta."""
        full = a_theta_basis(self.d, self.theta).T
        resid = full - (full @ self.basis.T) @ self.basis
        u, s, vt = np.linalg.svd(resid, full_matrices=False)
        rank = int(np.sum(s > 1e-9))
        return vt[:rank]

    def contains(self, v, tol=1e-9):
        return float(self.distance(np.asarray(v)[None, :])[0]) <= tol * max(1.0, np.linalg.norm(v))


def filter_subspace(table, W, R):
    """Rows whose projected Cartan vector lies strictly within R of W."""
    if not R > 0:
        raise ValueError("radius must be positive")
    if W.dim == len(W.theta):
        return np.ones(len(table), dtype=bool)
    return W.distance(table.mu_theta(W.theta)) < R


def filter_directional(table, direction, r):
    """Rows within r of the line through the direction (line, not ray)."""
    return filter_subspace(table, SubspaceSpec.line(direction), r)


def is_finite_filter(W, psi, tol=1e-12):
    """True when psi vanishes on W, so only finitely many rows pass any filter."""
    vals = W.basis @ psi.dual
    return bool(np.all(np.abs(vals) <= tol * max(1.0, psi.norm)))


# ---------------------------------------------------------------------------
# partial sums and regime fits


@dataclass(frozen=True)
class RegimeFit:
    regime: str
    exponent: float
    stderr: float
    window: tuple
    rss: dict
    tail: float
    points: int


@dataclass(frozen=True)
class SeriesCurve:
    Tgrid: np.ndarray = field(repr=False)
    S: np.ndarray = field(repr=False)
    delta: float
    horizon: float
    truncated: np.ndarray = field(repr=False)
    rows: int
    fit: RegimeFit = None

    def to_rows(self):
        return [(float(t), float(s), bool(tr)) for t, s, tr in zip(self.Tgrid, self.S, self.truncated)]


def _boundary_min(table, values, usable):
    sl = table.shell(table.maxlen)
    vals = values[sl][usable[sl]]
    return float(vals.min()) if vals.size else 0.0


def completeness_horizon(table, values, usable=None):
    """Largest value below which the word ball is trusted to be complete."""
    usable = table.usable() if usable is None else usable
    return HORIZON_FACTOR * _boundary_min(table, values, usable)


def _check_proper(values, usable):
    if values[usable].size and values[usable].min() < -PROPER_EPS:
        raise NotProper(f"psi takes the value {values[usable].min():.3g} on the table")


def _compensated_cumsums(terms, cuts):
    """Exact-rounded partial sums of ``terms`` at the sorted cut indices."""
    out = np.empty(len(cuts))
    pieces = []
    start = 0
    for j, stop in enumerate(cuts):
        pieces.append(math.fsum(terms[start:stop]))
        start = stop
        out[j] = math.fsum(pieces)
    return out


def partial_sums(table, mask, psi, delta, Tgrid, include_guarded=False):
    """S(T) = sum of exp(-psi(mu_theta)) over masked rows with psi <= delta T."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    usable = table.usable(include_guarded)
    values = table.psi_values(psi)
    _check_proper(values, usable)
    horizon = completeness_horizon(table, values, usable) / delta
    sel = np.sort(values[np.asarray(mask, dtype=bool) & usable])
    terms = np.exp(-sel)
    Tgrid = np.asarray(Tgrid, dtype=float)
    cuts = np.searchsorted(sel, delta * Tgrid, side="right")
    S = _compensated_cumsums(terms, cuts)
    return SeriesCurve(Tgrid, S, float(delta), float(horizon), Tgrid > horizon * (1 + 1e-12), int(sel.size))


def _linfit(x, y):
    fit = scipy.stats.linregress(x, y)
    resid = y - (fit.intercept + fit.slope * x)
    return fit.slope, fit.intercept, fit.stderr, float(resid @ resid)


def regime_fit(curve, tail_fraction=TAIL_FRACTION, min_points=MIN_POINTS):
    """Classify the growth of S(T) on the untruncated part of the grid.

    Candidates are ``S = c T^a`` (log-log regression), ``S = b + c log T``
    and bounded growth.  Residuals of both growth models are measured on
    log S.  Bounded is selected when the last quarter of the window adds
    less than ``tail_fraction`` of the total (a Cauchy-type tail test).
    """
    ok = ~curve.truncated & (curve.S > 0) & (curve.Tgrid > 0)
    T = curve.Tgrid[ok]
    S = curve.S[ok]
    if T.size < min_points:
        raise InsufficientRange(f"{T.size} usable grid points below the horizon, need {min_points}")
    logT, logS = np.log(T), np.log(S)
    a, _, a_err, rss_pow = _linfit(logT, logS)
    b, b0, b_err, _ = _linfit(logT, S)
    pred = b0 + b * logT
    rss_log = float(np.sum((np.log(pred) - logS) ** 2)) if np.all(pred > 0) else math.inf
    e, _, e_err, rss_exp = _linfit(T, logS)
    q = int(math.floor(0.75 * (T.size - 1)))
    tail = float((S[-1] - S[q]) / S[-1])
    rss = {"power": float(rss_pow), "logarithmic": rss_log, "exponential": float(rss_exp)}
    if tail < tail_fraction:
        regime, expo, err = "bounded", 0.0, 0.0
    elif a > 1.5 and rss_exp < min(rss_pow, rss_log):
        # log S linear in T: the form sits below the growth rate of the rows
        regime, expo, err = "divergent-linear", float(e), float(e_err)
    elif rss_log < rss_pow:
        regime, expo, err = "logarithmic", float(b), float(b_err)
    else:
        regime, expo, err = "power", float(a), float(a_err)
    return RegimeFit(regime, expo, err, (float(T[0]), float(T[-1])), rss, tail, int(T.size))


@dataclass(frozen=True)
class AbscissaFit:
    s: float
    stderr: float
    window: tuple
    counts: np.ndarray = field(repr=False)
    t: np.ndarray = field(repr=False)


def abscissa(table, mask, psi, include_guarded=False, points=ABSCISSA_POINTS, horizon=None):
    """Exponential growth rate of N(t) = #{masked rows : psi <= t}.

    The slope of log N(t) is fitted on the top half of the reliable range
    [0, horizon]; it estimates the abscissa of convergence of
    ``s -> sum exp(-s psi)`` over the masked rows.
    """
    usable = table.usable(include_guarded)
    values = table.psi_values(psi)
    _check_proper(values, usable)
    if horizon is None:
        horizon = completeness_horizon(table, values, usable)
    sel_mask = np.asarray(mask, dtype=bool) & usable
    sel = np.sort(values[sel_mask])
    reliable = sel_mask & (values <= horizon)
    if np.unique(table.length[reliable]).size < MIN_PSI_SHELLS or horizon <= 0:
        raise InsufficientRange("fewer than 4 populated shells below the horizon")
    t = np.linspace(horizon / 2, horizon, points)
    counts = np.searchsorted(sel, t, side="right")
    good = counts > 0
    if good.sum() < 3:
        raise InsufficientRange("too few nonempty counts in the fit window")
    s, _, err, _ = _linfit(t[good], np.log(counts[good]))
    return AbscissaFit(float(s), float(err), (float(t[0]), float(t[-1])), counts, t)


# ---------------------------------------------------------------------------
# limit cone


def simplex_coordinates(points, theta):
    """Root values alpha_i (i in theta) normalized to sum one, per row."""
    x = np.asarray(points, dtype=float)
    blocks = theta_blocks(theta, x.shape[-1])
    means = np.stack([x[..., a:b].mean(axis=-1) for a, b in blocks], axis=-1)
    gaps = means[..., :-1] - means[..., 1:]
    total = gaps.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return gaps / total


def vector_from_simplex(s, theta, d):
    """Vector of a_theta with root values s (unnormalized: the roots sum to sum(s))."""
    s = np.asarray(s, dtype=float)
    blocks = theta_blocks(theta, d)
    levels = np.concatenate([np.zeros(s.shape[:-1] + (1,)), -np.cumsum(s, axis=-1)], axis=-1)
    out = np.empty(s.shape[:-1] + (d,))
    for j, (a, b) in enumerate(blocks):
        out[..., a:b] = levels[..., j : j + 1]
    return out - out.mean(axis=-1, keepdims=True)


def direction_from_simplex(s, theta, d):
    v = vector_from_simplex(s, theta, d)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@dataclass(frozen=True)
class ConeEstimate:
    theta: tuple
    d: int
    vertices: np.ndarray = field(repr=False)  # simplex coordinates of hull vertices
    interior: bool
    inradius: float
    centroid: np.ndarray = field(repr=False)
    angular_diameter: float
    rows: int
    equations: np.ndarray = field(repr=False, default=None)

    @property
    def vertex_directions(self):
        return direction_from_simplex(self.vertices, self.theta, self.d)

    def contains(self, s, tol=1e-12):
        """Whether simplex point(s) lie in the estimated cone."""
        s = np.atleast_2d(s)
        if self.equations is None:
            if len(self.theta) == 1:
                return np.ones(s.shape[0], dtype=bool)
            return np.all(np.abs(s - self.centroid) <= tol + 1e-9, axis=1)
        x = s[:, :-1]
        return np.all(x @ self.equations[:, :-1].T + self.equations[:, -1] <= tol, axis=1)


def _hull_vertices(x):
    """Vertices of the convex hull of many points, reduced chunk by chunk."""
    if x.shape[0] > HULL_CHUNK:
        keep = []
        for start in range(0, x.shape[0], HULL_CHUNK):
            part = x[start : start + HULL_CHUNK]
            keep.append(part[scipy.spatial.ConvexHull(part).vertices])
        x = np.concatenate(keep)
    hull = scipy.spatial.ConvexHull(x)
    return x[hull.vertices], hull


def _chebyshev_radius(equations):
    a = equations[:, :-1]
    b = equations[:, -1]
    norms = np.linalg.norm(a, axis=1)
    n = a.shape[1]
    c = np.zeros(n + 1)
    c[-1] = -1.0
    res = scipy.optimize.linprog(
        c,
        A_ub=np.column_stack([a, norms]),
        b_ub=-b,
        bounds=[(None, None)] * n + [(0, None)],
        method="highs",
    )
    return float(res.x[-1]) if res.status == 0 else 0.0


def _select_shells(table, shells):
    if isinstance(shells, int):
        top = table.shells()[-shells:]
    else:
        top = sorted(int(n) for n in shells)
    mask = np.isin(table.length, top) & table.usable()
    return mask


def limit_cone(table, theta, shells=3):
    """Convex hull of the unit directions of mu_theta over the top shells.

    Directions are represented in simplex coordinates (root values
    normalized to sum one), an affine chart of the positive chamber.
    """
    mask = _select_shells(table, shells)
    pts = table.mu_theta(theta)[mask]
    s = simplex_coordinates(pts, theta)
    s = s[np.all(np.isfinite(s), axis=1)]
    if s.shape[0] == 0:
        raise InsufficientData("no nonzero rows in the selected shells")
    k = len(theta)
    d = table.d
    centroid = s.mean(axis=0)
    if k == 1:
        return ConeEstimate(theta, d, s[:1], True, math.inf, centroid, 0.0, int(s.shape[0]))
    x = s[:, :-1]
    centered = x - x.mean(axis=0)
    sv = np.linalg.svd(centered[:: max(1, x.shape[0] // 200_000)], compute_uv=False)
    rank = int(np.sum(sv > 1e-9 * max(1.0, np.sqrt(x.shape[0])))) if sv.size else 0
    equations = None
    if rank == 0:
        vertices = s[:1]
        inradius = 0.0
    elif k - 1 == 1:
        lo, hi = int(np.argmin(x[:, 0])), int(np.argmax(x[:, 0]))
        vertices = s[[lo, hi]]
        inradius = float(x[hi, 0] - x[lo, 0]) / 2 if rank == 1 else 0.0
        if rank == 1:
            equations = np.array([[1.0, -x[hi, 0]], [-1.0, x[lo, 0]]])
    elif rank < k - 1:
        # degenerate hull: vertices in the affine span, no interior
        _, _, vt = np.linalg.svd(centered[:: max(1, x.shape[0] // 200_000)], full_matrices=False)
        proj = centered @ vt[:rank].T
        if rank == 1:
            idx = [int(np.argmin(proj[:, 0])), int(np.argmax(proj[:, 0]))]
        else:
            idx = list(scipy.spatial.ConvexHull(proj).vertices)
        vertices = s[idx]
        inradius = 0.0
    else:
        vx, hull = _hull_vertices(x)
        vertices = np.column_stack([vx, 1.0 - vx.sum(axis=1)])
        equations = hull.equations
        inradius = _chebyshev_radius(equations)
    dirs = direction_from_simplex(vertices, theta, d)
    cosines = np.clip(dirs @ dirs.T, -1.0, 1.0)
    diameter = float(np.arccos(cosines.min())) if dirs.shape[0] > 1 else 0.0
    interior = rank == k - 1 and inradius > INTERIOR_INRADIUS
    return ConeEstimate(theta, d, vertices, bool(interior), float(inradius), centroid, diameter, int(s.shape[0]), equations)


# ---------------------------------------------------------------------------
# growth indicator


@dataclass(frozen=True)
class IndicatorEstimate:
    theta: tuple
    d: int
    grid: np.ndarray = field(repr=False)  # integer barycentric indices
    simplex: np.ndarray = field(repr=False)
    directions: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)  # -inf marks cells with too few rows
    stderr: np.ndarray = field(repr=False)
    half_angle: np.ndarray = field(repr=False)
    samples: np.ndarray = field(repr=False)
    counts: np.ndarray = field(repr=False)
    t: np.ndarray = field(repr=False)
    inside: np.ndarray = field(repr=False)
    resolution: int
    concavity_violation: float
    row_fraction: float

    @property
    def finite(self):
        return np.isfinite(self.values)

    @property
    def reliable(self):
        """Finite cells inside the estimated cone with enough rows to trust."""
        return self.finite & self.inside & (self.samples >= POSITIVITY_SAMPLES)

    def positivity(self, min_samples=POSITIVITY_SAMPLES):
        """Whether every interior cell with enough samples has a positive value."""
        sel = self.inside & (self.samples >= min_samples) & self.finite
        return bool(np.all(self.values[sel] > 0)), int(sel.sum())

    def chart_values(self):
        """Values extended homogeneously to the chart sum(alpha) = 1."""
        v = vector_from_simplex(self.simplex, self.theta, self.d)
        return self.values * np.linalg.norm(v, axis=1)


def _compositions(n, k):
    """All k-tuples of nonnegative integers summing to n, in lexicographic order."""
    out = []
    for cuts in itertools.combinations(range(n + k - 1), k - 1):
        prev = -1
        parts = []
        for c in cuts:
            parts.append(c - prev - 1)
            prev = c
        parts.append(n + k - 1 - prev - 1)
        out.append(parts)
    return np.array(out[::-1], dtype=int).reshape(-1, k)


def _local_grid(cone, resolution):
    """Barycentric grid of a small simplex homothetic to the chamber chart.

    The simplex is centred at the cone centroid and just contains the cone,
    so thin cones get the same number of cells as fat ones.
    """
    k = len(cone.theta)
    idx = _compositions(resolution, k)
    bary = idx / resolution
    if k == 1:
        return idx, bary
    centre = cone.centroid
    reach = float(np.max(np.linalg.norm(cone.vertices - centre, axis=1))) * 1.25
    reach = max(reach, 1e-6)
    inradius = 1.0 / math.sqrt(k * (k - 1))
    scale = min(reach / inradius, 1.0)
    if scale >= 1.0:
        centre = np.full(k, 1.0 / k)
    s = centre + scale * (bary - 1.0 / k)
    keep = np.all(s >= -1e-12, axis=1)
    return idx[keep], np.clip(s[keep], 0.0, None)


def _slope(t, counts):
    good = counts > 0
    if good.sum() < 3:
        return -math.inf, math.inf
    slope, _, err, _ = _linfit(t[good], np.log(counts[good]))
    return float(slope), float(err)


def growth_indicator(
    table,
    theta,
    cone=None,
    grid_resolution=GRID_RESOLUTION,
    half_angles=HALF_ANGLES,
    include_guarded=False,
    max_rows=200_000,
    seed=0,
    points=16,
):
    """Directional growth rates of the projected Cartan vectors.

    For every grid direction u the count N(t) of rows with norm at most t
    inside the cone of the given half-angle around u is fitted by an
    exponential on the top half of the complete norm range.  Half-angles are
    fractions of the angular diameter of the estimated limit cone and are
    swept downward until successive estimates agree within their standard
    error.  Cells whose count stays at most 2 get the value -inf.
    """
    d = table.d
    k = len(theta)
    if len(table.shells()) < 5:
        raise InsufficientData("growth indicator needs at least 5 shells")
    if cone is None:
        cone = limit_cone(table, theta)
    usable = table.usable(include_guarded)
    pts = table.mu_theta(theta)
    norms = np.linalg.norm(pts, axis=1)
    horizon = completeness_horizon(table, norms, usable)
    rows = np.flatnonzero(usable & (norms <= horizon) & (norms > 0))
    fraction = 1.0
    if rows.size > max_rows:
        rng = np.random.default_rng(seed)
        rows = np.sort(rng.choice(rows, size=max_rows, replace=False))
        fraction = max_rows / float(np.sum(usable & (norms <= horizon) & (norms > 0)))
    order = np.argsort(norms[rows], kind="stable")
    rows = rows[order]
    rnorm = norms[rows]
    rdir = pts[rows] / rnorm[:, None]
    t = np.linspace(horizon / 2, horizon, points)
    cuts = np.searchsorted(rnorm, t, side="right")

    idx, simplex = _local_grid(cone, grid_resolution)
    dirs = direction_from_simplex(simplex, theta, d)
    ncell = dirs.shape[0]
    scale = cone.angular_diameter if cone.angular_diameter > 0 else 1.0
    angles = [h * scale for h in half_angles]

    values = np.full(ncell, -math.inf)
    errs = np.full(ncell, math.inf)
    used = np.full(ncell, math.nan)
    samples = np.zeros(ncell, dtype=np.int64)
    counts_out = np.zeros((ncell, points), dtype=np.int64)
    chunk = max(1, 4_000_000 // max(rows.size, 1))
    for start in range(0, ncell, chunk):
        sl = slice(start, min(ncell, start + chunk))
        cos = rdir @ dirs[sl].T
        per_angle = []
        for h in angles:
            inside = cos >= math.cos(h) - 1e-12
            csum = np.concatenate([np.zeros((1, inside.shape[1]), dtype=np.int64), np.cumsum(inside, axis=0)])
            per_angle.append(csum[cuts])
        for j in range(sl.stop - sl.start):
            cell = start + j
            value, err, h_used, cnt = -math.inf, math.inf, math.nan, per_angle[0][:, j]
            for a, h in enumerate(angles):
                c = per_angle[a][:, j]
                if c[-1] <= MIN_CONE_COUNT:
                    break
                tau, tau_err = _slope(t, c)
                stable = a > 0 and abs(tau - value) <= tau_err
                value, err, h_used, cnt = tau, tau_err, h, c
                if stable:
                    break
            values[cell], errs[cell], used[cell] = value, err, h_used
            counts_out[cell] = cnt
            samples[cell] = cnt[-1]
    inside_cone = cone.contains(simplex) if k > 1 else np.ones(ncell, dtype=bool)
    est = IndicatorEstimate(
        tuple(theta), d, idx, simplex, dirs, values, errs, used, samples, counts_out, t,
        inside_cone, int(grid_resolution), 0.0, float(fraction),
    )
    return replace(est, concavity_violation=concavity_violation(est))


def concavity_violation(ind):
    """Largest relative midpoint-concavity defect over grid triples.

    Homogeneous concavity of the indicator is concavity of its extension to
    the chart sum(alpha) = 1; midpoints of grid pairs with even index sums
    are grid points.  Only reliable cells enter: near the cone boundary the
    counts are too thin for the slope fits to mean much.
    """
    vals = ind.chart_values()
    fin = ind.reliable
    if fin.sum() < 3:
        return 0.0
    lookup = {tuple(g): i for i, g in enumerate(ind.grid)}
    cells = np.flatnonzero(fin)
    top = float(np.max(np.abs(vals[fin])))
    worst = 0.0
    g = ind.grid
    for a_pos, i in enumerate(cells):
        others = cells[a_pos + 1 :]
        if others.size == 0:
            break
        sums = g[i] + g[others]
        even = np.all(sums % 2 == 0, axis=1)
        for j, ssum in zip(others[even], sums[even]):
            m = lookup.get(tuple(ssum // 2))
            if m is None or not fin[m]:
                continue
            gap = 0.5 * (vals[i] + vals[j]) - vals[m]
            if gap > worst:
                worst = gap
    return float(worst / top) if top > 0 else 0.0


# ---------------------------------------------------------------------------
# tangent forms


@dataclass(frozen=True)
class TangentFit:
    form: LinearForm
    slack: np.ndarray = field(repr=False)
    value: float
    cells: int
    enveloped: bool = False


def _support_lp(objective, w, vals, uc=None, value=None):
    kw = {}
    if uc is not None:
        kw = {"A_eq": uc[None, :], "b_eq": [value]}
    return scipy.optimize.linprog(
        objective, A_ub=-w, b_ub=-vals, bounds=[(None, None)] * w.shape[1], method="highs", **kw
    )


def tangent_form(ind, u, value=None):
    """Smallest linear form above the indicator on the grid, touching it at u.

    Solves ``min sum_w (psi(w) - ind(w))`` subject to ``psi(w) >= ind(w)``
    on every reliable cell (finite, inside the cone, enough rows) and
    ``psi(u) = value``.  ``value`` defaults to the estimate of the nearest
    finite cell.  When sampling noise puts cells on both sides of u above
    that value, u is pinned instead at the smallest value any supporting
    form can take there, i.e. the concave envelope of the estimate.
    """
    fin = ind.reliable
    if fin.sum() == 0:
        fin = ind.finite
    if fin.sum() == 0:
        raise InsufficientData("indicator has no finite cells")
    uvec = np.asarray(u.u if isinstance(u, DirectionSpec) else u, dtype=float)
    dirs = ind.directions[fin]
    vals = ind.values[fin]
    if value is None:
        value = float(vals[int(np.argmax(dirs @ uvec))])
    basis = a_theta_basis(ind.d, ind.theta)
    w = dirs @ basis
    uc = uvec @ basis
    res = _support_lp(w.sum(axis=0), w, vals, uc, value)
    enveloped = False
    if res.status == 2:
        env = _support_lp(uc, w, vals)
        if env.status != 0:
            raise Infeasible(f"no supporting form at u ({env.message})")
        value = float(uc @ env.x) * (1 + 1e-12)
        enveloped = True
        res = _support_lp(w.sum(axis=0), w, vals, uc, value)
    if res.status != 0:
        raise Infeasible(f"no supporting form at u ({res.message})")
    dual = basis @ res.x
    form = LinearForm(tuple(ind.theta), dual - dual.mean())
    slack = w @ res.x - vals
    return TangentFit(form, slack, float(value), int(fin.sum()), enveloped)


# ---------------------------------------------------------------------------
# dichotomy experiment


@dataclass(frozen=True)
class Consensus:
    regime: str
    exponent: float
    stderr: float
    tail: float
    votes: dict


def consensus(fits):
    """Majority regime over a radius sweep, with median exponent within it.

    The regime is meant to hold for every radius, so each radius is a
    separate noisy test of it.  Ties go to the regime of the middle radius.
    """
    fits = [f for f in fits if f is not None]
    if not fits:
        return None
    votes = {}
    for f in fits:
        votes[f.regime] = votes.get(f.regime, 0) + 1
    top = max(votes.values())
    leaders = [r for r in REGIMES if votes.get(r) == top]
    middle = fits[len(fits) // 2].regime
    regime = middle if middle in leaders else leaders[0]
    chosen = [f for f in fits if f.regime == regime]
    return Consensus(
        regime,
        float(np.median([f.exponent for f in chosen])),
        float(np.median([f.stderr for f in chosen])),
        float(np.median([f.tail for f in chosen])),
        {r: int(votes[r]) for r in REGIMES if r in votes},
    )


@dataclass(frozen=True)
class DichotomyConfig:
    radii: tuple = None
    radius_factors: tuple = RADIUS_FACTORS
    tgrid_points: int = TGRID_POINTS
    min_window: float = MIN_WINDOW
    grid_resolution: int = GRID_RESOLUTION
    half_angles: tuple = HALF_ANGLES
    cone_shells: int = 3
    indicator_rows: int = 200_000
    tail_fraction: float = TAIL_FRACTION
    antipodal_samples: int = 200
    seed: int = 0
    include_guarded: bool = False
    calibrate: bool = True

    def to_dict(self):
        return {
            "radii": None if self.radii is None else [float(r) for r in self.radii],
            "radius_factors": [float(x) for x in self.radius_factors],
            "tgrid_points": int(self.tgrid_points),
            "min_window": float(self.min_window),
            "grid_resolution": int(self.grid_resolution),
            "half_angles": [float(x) for x in self.half_angles],
            "cone_shells": int(self.cone_shells),
            "indicator_rows": int(self.indicator_rows),
            "tail_fraction": float(self.tail_fraction),
            "antipodal_samples": int(self.antipodal_samples),
            "seed": int(self.seed),
            "include_guarded": bool(self.include_guarded),
            "calibrate": bool(self.calibrate),
        }


PREDICTIONS = {0: ("power", 1.0), 1: ("power", 0.5), 2: ("logarithmic", None)}


def predicted_regime(codim):
    return PREDICTIONS.get(codim, ("bounded", None))


def run_diagnostics(gens, table, theta, config=DichotomyConfig()):
    """The gate of the dichotomy experiment: regularity, antipodality, Anosov, cone."""
    report = {}
    passed = True
    try:
        report["regularity"] = regularity_diagnostic(table, theta)
        passed &= report["regularity"]["verdict"] == "theta-regular-consistent"
        report["anosov"] = anosov_diagnostic(table, theta)
        passed &= report["anosov"]["verdict"] == "anosov-consistent"
    except InsufficientData as exc:
        report["error"] = str(exc)
        passed = False
    report["antipodality"] = antipodality_check(gens, table, theta, config.antipodal_samples, config.seed)
    passed &= report["antipodality"]["verdict"] == "antipodal-consistent"
    cone = limit_cone(table, theta, config.cone_shells)
    report["cone"] = {
        "interior": cone.interior,
        "inradius": cone.inradius,
        "angular_diameter": cone.angular_diameter,
        "vertices": int(cone.vertices.shape[0]),
    }
    passed &= cone.interior
    report["passed"] = bool(passed)
    return report, cone


def _quadratic_features(x):
    n, m = x.shape
    cols = [np.ones(n)]
    cols += [x[:, i] for i in range(m)]
    cols += [x[:, i] * x[:, j] for i in range(m) for j in range(i, m)]
    return np.column_stack(cols)


def _quadratic_model(x, y):
    """Least-squares quadratic y ~ c + g.x + x.H.x/2; returns (c, g, H)."""
    m = x.shape[1]
    coef, *_ = np.linalg.lstsq(_quadratic_features(x), y, rcond=None)
    c = coef[0]
    g = coef[1 : m + 1]
    H = np.zeros((m, m))
    pos = m + 1
    for i in range(m):
        for j in range(i, m):
            if i == j:
                H[i, i] = 2 * coef[pos]
            else:
                H[i, j] = H[j, i] = coef[pos]
            pos += 1
    return c, g, H


def choose_direction(ind, cone, W):
    """Direction of W inside the cone maximizing the indicator.

    The indicator is smoothed by a quadratic fit over the upper half of its
    finite cells and the quadratic is maximized on the chart slice of W.
    Falls back to the best cell near W when the fit is not concave.
    Returns ``(DirectionSpec, value, method)``.
    """
    theta, d = ind.theta, ind.d
    k = len(theta)
    vals = ind.chart_values()
    fin = ind.reliable
    if k == 1:
        u = DirectionSpec.from_vector(ind.directions[0], theta)
        return u, float(ind.values[0]), "unique"
    if fin.sum() == 0:
        raise InsufficientData("no finite indicator cells inside the cone")
    # chart slice of W: vectors c @ basis with sum of root values equal to one
    A = simplex_linear_map(W.basis, theta)  # (dimW, k): root values of each basis vector
    ones = A.sum(axis=1)
    fallback = _best_cell_near(ind, W, fin)
    x_all = ind.simplex[:, :-1]
    hi = fin & (vals >= np.median(vals[fin]))
    m = k - 1
    if hi.sum() >= (m + 1) * (m + 2) // 2 + 2:
        c0, g, H = _quadratic_model(x_all[hi], vals[hi])
        # c = p + N z parametrizes {c : c . ones = 1}
        p = ones / (ones @ ones)
        N = scipy.linalg.null_space(ones[None, :])
        B = A[:, :-1].T  # chart coordinates x = B c
        Hz = N.T @ B.T @ H @ B @ N
        if N.shape[1] == 0:
            cstar = p
            ok = True
        else:
            ok = bool(np.all(np.linalg.eigvalsh(Hz) < 0))
            if ok:
                z = np.linalg.solve(Hz, -(N.T @ B.T @ (H @ (B @ p) + g)))
                cstar = p + N @ z
        if ok:
            s = cstar @ A
            v = cstar @ W.basis
            if np.all(s >= 0) and cone.contains(s[None, :])[0] and in_chamber(v, tol=1e-12):
                u = DirectionSpec.from_vector(v, theta)
                x = s[:-1]
                value_chart = c0 + g @ x + 0.5 * x @ H @ x
                return u, float(value_chart / np.linalg.norm(vector_from_simplex(s, theta, d))), "quadratic"
    return fallback


def simplex_linear_map(vectors, theta):
    """Root values alpha_i (i in theta) of each row vector."""
    x = np.atleast_2d(vectors)
    blocks = theta_blocks(theta, x.shape[-1])
    means = np.stack([x[:, a:b].mean(axis=1) for a, b in blocks], axis=1)
    return means[:, :-1] - means[:, 1:]


def _best_cell_near(ind, W, fin):
    dist = W.distance(ind.directions)
    cand = fin & (dist <= max(np.min(dist[fin]) * 1.0 + 1e-12, 0))
    if not cand.any():
        raise InsufficientData("no indicator cell near W")
    # among the cells closest to W take the largest value
    near = np.flatnonzero(fin)[np.argsort(dist[fin])[: max(1, len(ind.theta))]]
    best = near[np.argmax(ind.values[near])]
    proj = (ind.directions[best] @ W.basis.T) @ W.basis
    u = DirectionSpec.from_vector(proj, ind.theta)
    return u, float(ind.values[best]), "grid"


def transverse_spread(table, W, shells=1):
    """Smallest RMS spread of the top-shell points along the complement of W."""
    comp = W.complement()
    if comp.shape[0] == 0:
        return math.inf, comp
    mask = _select_shells(table, shells)
    y = table.mu_theta(W.theta)[mask] @ comp.T
    if y.shape[0] < 2:
        raise InsufficientData("too few rows to estimate the transverse spread")
    cov = np.atleast_2d(np.cov(y.T))
    return float(math.sqrt(max(np.linalg.eigvalsh(cov).min(), 0.0))), comp


def principal_subspace(table, theta, u, dim, shells=1):
    """W spanned by u and the dim-1 directions of largest transverse spread."""
    line = SubspaceSpec.line(u)
    comp = line.complement()
    mask = _select_shells(table, shells)
    y = table.mu_theta(theta)[mask] @ comp.T
    w, v = np.linalg.eigh(np.atleast_2d(np.cov(y.T)))
    axes = (comp.T @ v[:, ::-1][:, : dim - 1]).T
    return SubspaceSpec.span(np.vstack([u.u[None, :], axes]), theta)


def dichotomy_experiment(table, theta, W=None, config=DichotomyConfig(), gens=None, direction=None):
    """Regime of the W-restricted series at the tangent form of its best direction.

    ``W=None`` means the line through the direction of maximal growth.  A
    given ``direction`` (which must lie in W) replaces the automatic choice.
    Raises DiagnosticsFailed when the diagnostics gate does not pass.
    """
    if gens is None:
        raise ValueError("the diagnostics gate needs the generators")
    theta = tuple(theta)
    d = table.d
    diag, cone = run_diagnostics(gens, table, theta, config)
    if not diag["passed"]:
        raise DiagnosticsFailed("diagnostics gate failed", diag)
    ind = growth_indicator(
        table, theta, cone, config.grid_resolution, config.half_angles,
        config.include_guarded, config.indicator_rows, config.seed,
    )
    warn = []
    full = SubspaceSpec.full(d, theta)
    search = full if W is None else W
    if direction is None:
        u, value, how = choose_direction(ind, cone, search)
    else:
        if not search.contains(direction.u, tol=1e-8):
            raise ValueError("the given direction does not lie in W")
        u, value, how = direction, None, "given"
    if W is None:
        W = SubspaceSpec.line(u)
    try:
        tfit = tangent_form(ind, u, value)
        psi = tfit.form
        tangent = True
    except Infeasible:
        psi = sum_of_positive_roots_form(d, theta)
        tangent = False
        warn.append("untangent: no supporting form, falling back to the sum of positive roots")
        warnings.warn(warn[-1], RuntimeWarning, stacklevel=2)
    usable = table.usable(config.include_guarded)
    scale = 1.0
    if config.calibrate:
        full_abs = abscissa(table, usable, psi, config.include_guarded)
        scale = full_abs.s
        psi = psi.scaled(scale)
    delta = float(psi(u.u))
    values = table.psi_values(psi)
    horizon = completeness_horizon(table, values, usable) / delta
    sigma, _ = transverse_spread(table, W)
    codim = W.codim
    if config.radii is not None:
        radii = [float(r) for r in config.radii]
        factors = [r / sigma if math.isfinite(sigma) else f for r, f in zip(radii, config.radius_factors)]
    else:
        factors = [float(f) for f in config.radius_factors]
        radii = [f * sigma for f in factors]
    runs = []
    for R, f in zip(radii, factors):
        mask = filter_subspace(table, W, R) if math.isfinite(R) else np.ones(len(table), dtype=bool)
        lo = min(max(f * f, config.min_window), 0.5)
        Tgrid = np.geomspace(lo * horizon, horizon, config.tgrid_points)
        curve = partial_sums(table, mask, psi, delta, Tgrid, config.include_guarded)
        entry = {"radius": R, "factor": f, "rows": curve.rows, "curve": curve}
        try:
            entry["fit"] = regime_fit(curve, config.tail_fraction)
        except InsufficientRange as exc:
            entry["fit"] = None
            entry["error"] = str(exc)
        try:
            entry["abscissa"] = abscissa(table, mask, psi, config.include_guarded)
        except InsufficientRange:
            entry["abscissa"] = None
        runs.append(entry)
    fit = consensus([r["fit"] for r in runs])
    verdict = "INCONCLUSIVE"
    if fit is not None:
        if fit.regime == "bounded":
            verdict = "CONVERGENT"
        elif fit.regime in ("power", "divergent-linear") and fit.exponent >= DIVERGENT_POWER:
            verdict = "DIVERGENT"
        elif fit.regime == "logarithmic" and fit.exponent > 0 and fit.tail > 0:
            verdict = "DIVERGENT"
    pred_regime, pred_exp = predicted_regime(codim)
    agree = fit is not None and fit.regime == pred_regime
    if agree and pred_exp is not None:
        agree = abs(fit.exponent - pred_exp) <= 0.25
    return DichotomyReport(
        theta=theta,
        codim=int(codim),
        W=W,
        u=u,
        direction_method=how,
        indicator_value=value,
        psi=psi,
        tangent=tangent,
        scale=float(scale),
        delta=delta,
        horizon=float(horizon),
        sigma=float(sigma),
        runs=runs,
        consensus=fit,
        verdict=verdict if tangent else verdict + " (informational)",
        prediction={"regime": pred_regime, "exponent": pred_exp},
        agreement=bool(agree),
        diagnostics=diag,
        indicator=ind,
        warnings=tuple(warn),
        config=config,
    )


@dataclass(frozen=True)
class DichotomyReport:
    theta: tuple
    codim: int
    W: SubspaceSpec
    u: DirectionSpec
    direction_method: str
    indicator_value: float
    psi: LinearForm
    tangent: bool
    scale: float
    delta: float
    horizon: float
    sigma: float
    runs: list
    consensus: "Consensus"
    verdict: str
    prediction: dict
    agreement: bool
    diagnostics: dict
    indicator: IndicatorEstimate
    warnings: tuple
    config: DichotomyConfig

    def to_dict(self):
        def fit_dict(fit):
            if fit is None:
                return None
            return {
                "regime": fit.regime,
                "exponent": fit.exponent,
                "stderr": fit.stderr,
                "window": list(fit.window),
                "rss": fit.rss,
                "tail": fit.tail,
                "points": fit.points,
            }

        runs = []
        for r in self.runs:
            ab = r.get("abscissa")
            runs.append(
                {
                    "radius": r["radius"] if math.isfinite(r["radius"]) else None,
                    "factor": r["factor"],
                    "rows": r["rows"],
                    "fit": fit_dict(r["fit"]),
                    "filtered_abscissa": None if ab is None else {"s": ab.s, "stderr": ab.stderr},
                    "curve": r["curve"].to_rows(),
                }
            )
        con = self.consensus
        return {
            "theta": list(self.theta),
            "codim": self.codim,
            "W_basis": self.W.basis.tolist(),
            "u": self.u.u.tolist(),
            "direction_method": self.direction_method,
            "indicator_value": self.indicator_value,
            "psi_dual": self.psi.dual.tolist(),
            "tangent": self.tangent,
            "scale": self.scale,
            "delta": self.delta,
            "horizon": self.horizon,
            "transverse_spread": self.sigma if math.isfinite(self.sigma) else None,
            "runs": runs,
            "consensus": None if con is None else {
                "regime": con.regime,
                "exponent": con.exponent,
                "stderr": con.stderr,
                "tail": con.tail,
                "votes": con.votes,
            },
            "verdict": self.verdict,
            "prediction": self.prediction,
            "agreement": self.agreement,
            "diagnostics": self.diagnostics,
            "indicator": {
                "cells": int(self.indicator.values.size),
                "finite": int(self.indicator.finite.sum()),
                "concavity_violation": self.indicator.concavity_violation,
                "positivity": self.indicator.positivity()[0],
            },
            "warnings": list(self.warnings),
            "config": self.config.to_dict(),
        }
