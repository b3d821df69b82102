"""Lie-theoretic linear algebra for G = SL_d(R).

Vectors of the Cartan subspace are plain length-``d`` numpy arrays with zero
coordinate sum.  A subset of simple roots is a sorted tuple of integers in
``1..d-1`` (root ``i`` is ``v[i-1] - v[i]``).  Flags are :class:`PartialFlag`
instances carrying an orthonormal frame whose leading ``i`` columns span the
``i``-dimensional member for every ``i`` in the root subset.
"""

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.optimize import minimize

from .errors import (
    GapTooSmall,
    IllConditioned,
    NonFinite,
    NotTransverse,
    RankDeficient,
    TypeMismatch,
)

# Read-only numeric tolerances.
DET_TOL = 1e-6
SUM_TOL = 1e-9
FRAME_TOL = 1e-8
BLOCK_TOL = 1e-9
COND_GUARD = 1e12
GAP_TOL = 1e-6
TRANSVERSE_TOL = 1e-8
DIAG_GUARD = 1e-300
SHADOW_STARTS = 8
SHADOW_MAXITER = 500
SHADOW_STEP_TOL = 1e-6


# ---------------------------------------------------------------------------
# Root subsets and the Cartan subspace


def make_theta(indices, d):
    """Validate and normalize a subset of simple roots of SL_d."""
    theta = tuple(sorted({int(i) for i in indices}))
    if not theta:
        raise ValueError("theta must be nonempty")
    if theta[0] < 1 or theta[-1] > d - 1:
        raise ValueError(f"theta {theta} out of range for d={d}")
    return theta


def full_theta(d):
    return tuple(range(1, d))


def opposite_theta(theta, d):
    """Image of theta under the opposition involution (i -> d - i)."""
    return tuple(sorted(d - i for i in theta))


def theta_blocks(theta, d):
    """Half-open index ranges of the blocks cut out by theta."""
    cuts = [0, *theta, d]
    return [(cuts[j], cuts[j + 1]) for j in range(len(cuts) - 1)]


def check_avector(v):
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise NonFinite("vector has non-finite coordinates")
    if abs(v.sum()) > SUM_TOL * max(1, v.size) * max(1.0, np.abs(v).max()):
        raise ValueError("coordinates of an a-vector must sum to zero")
    return v


def in_chamber(v, tol=SUM_TOL):
    v = np.asarray(v, dtype=float)
    return bool(np.all(np.diff(v) <= tol))


def opposition_involution(v):
    """Reverse-and-negate, the SL_d realization of -Ad(w0). Works on stacks."""
    return -np.asarray(v)[..., ::-1]


def p_theta(v, theta):
    """Project onto a_theta by averaging over the blocks of Pi - theta."""
    v = np.asarray(v, dtype=float)
    d = v.shape[-1]
    out = np.empty_like(v)
    for a, b in theta_blocks(theta, d):
        out[..., a:b] = v[..., a:b].mean(axis=-1, keepdims=True)
    return out


def theta_coordinates(v, theta):
    """Coordinates of vectors in the orthonormal basis of a_theta."""
    v = np.asarray(v, dtype=float)
    return v @ a_theta_basis(v.shape[-1], theta)


def a_theta_basis(d, theta):
    """Orthonormal basis of a_theta as the columns of a (d, #theta) matrix."""
    cols = []
    for i in theta:
        w = np.zeros(d)
        w[:i] = 1.0
        w -= w.mean()
        cols.append(w)
    basis, _ = np.linalg.qr(np.array(cols).T)
    # deterministic orientation: first column has positive leading entry
    signs = np.sign(basis[0, :])
    signs[signs == 0] = 1.0
    return basis * signs


def alpha(v, i):
    """Simple root alpha_i(v) = v_i - v_{i+1} (1-based i)."""
    v = np.asarray(v)
    return v[..., i - 1] - v[..., i]


def min_root(v, theta):
    v = np.asarray(v)
    return np.min(np.stack([alpha(v, i) for i in theta], axis=-1), axis=-1)


@dataclass(frozen=True)
class LinearForm:
    """A linear form on a_theta, stored by its canonical dual vector."""

    theta: tuple
    dual: np.ndarray = field(repr=False)

    def __post_init__(self):
        dual = np.asarray(self.dual, dtype=float)
        if abs(dual.sum()) > BLOCK_TOL * dual.size:
            raise ValueError("dual vector must sum to zero")
        if np.max(np.abs(p_theta(dual, self.theta) - dual)) > BLOCK_TOL * max(1.0, np.abs(dual).max()):
            raise ValueError("dual vector must be constant on the blocks of Pi - theta")
        dual = dual.copy()
        dual.setflags(write=False)
        object.__setattr__(self, "dual", dual)

    @classmethod
    def from_coefficients(cls, coeffs, theta):
        """Canonical representative of ``v -> coeffs . v`` restricted to a_theta."""
        c = np.asarray(coeffs, dtype=float)
        c = p_theta(c - c.mean(), theta)
        return cls(tuple(theta), c)

    @property
    def d(self):
        return self.dual.size

    def __call__(self, v):
        return np.asarray(v, dtype=float) @ self.dual

    def scaled(self, c):
        return LinearForm(self.theta, c * self.dual)

    @property
    def norm(self):
        return float(np.linalg.norm(self.dual))

    def compose_opposition(self):
        """The form psi o i on a_{i(theta)}."""
        return LinearForm(opposite_theta(self.theta, self.d), opposition_involution(self.dual))


def first_coordinate_form(d, theta=None):
    theta = full_theta(d) if theta is None else theta
    e = np.zeros(d)
    e[0] = 1.0
    return LinearForm.from_coefficients(e, theta)


def sum_of_positive_roots_form(d, theta):
    """Form proportional to the sum of positive roots, normalized to unit dual."""
    rho = np.array([(d - 1 - 2 * j) for j in range(d)], dtype=float)
    f = LinearForm.from_coefficients(rho, theta)
    return f.scaled(1.0 / f.norm)


# ---------------------------------------------------------------------------
# Matrix checks and decompositions


def check_matrix(g, det_tol=DET_TOL):
    g = np.asarray(g, dtype=float)
    if g.ndim != 2 or g.shape[0] != g.shape[1] or g.shape[0] < 2:
        raise ValueError("expected a square matrix of size >= 2")
    if not np.all(np.isfinite(g)):
        raise NonFinite("matrix has non-finite entries")
    return g


def unimodular_defect(g):
    return abs(np.linalg.det(g) - 1.0)


def _fix_signs(u, vt=None):
    """Make the first nonzero entry of each column of u positive."""
    u = u.copy()
    vt = None if vt is None else vt.copy()
    for j in range(u.shape[1]):
        col = u[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-14)
        if nz.size and col[nz[0]] < 0:
            u[:, j] = -col
            if vt is not None:
                vt[j, :] = -vt[j, :]
    return u, vt


def svd_fixed(g):
    """SVD with descending singular values and deterministic signs."""
    u, s, vt = np.linalg.svd(g)
    u, vt = _fix_signs(u, vt)
    return u, s, vt


def cartan_projection(g, guard=COND_GUARD):
    """Ordered log singular values of ``g``; the a+ component of g = k exp(v) l."""
    g = check_matrix(g)
    s = np.linalg.svd(g, compute_uv=False)
    if s[-1] <= 0 or s[0] / s[-1] > guard:
        raise RankDeficient(
            f"condition number {s[0] / max(s[-1], 1e-300):.3g} exceeds guard {guard:.1g}"
        )
    mu = np.log(s)
    # tiny determinant drift is pushed off the trace
    return mu - mu.mean()


def jordan_projection(g):
    """Ordered log-moduli of the eigenvalues of ``g``.

    ``lambda_1 + ... + lambda_k`` is read off the dominant eigenvalue of the
    k-th compound, which stays accurate when the small eigenvalues of ``g``
    itself are lost to rounding.
    """
    g = check_matrix(g)
    d = g.shape[0]
    partial = np.zeros(d + 1)  # partial[k] = lambda_1 + ... + lambda_k
    for k in range(1, d):
        top = np.max(np.abs(np.linalg.eigvals(compound(g, k))))
        if top == 0:
            raise RankDeficient("zero eigenvalue")
        partial[k] = math.log(top)
    # det g = 1; computing it would reintroduce the rounding we avoid above
    return np.diff(partial)


def compound(g, k):
    """k-th exterior power of ``g`` in the lexicographic basis of k-subsets."""
    g = np.asarray(g, dtype=float)
    d = g.shape[-1]
    subsets = list(itertools.combinations(range(d), k))
    idx = np.array(subsets)
    sub = g[..., idx[:, None, :, None], idx[None, :, None, :]]
    return np.linalg.det(sub)


def w0_matrix(d):
    """Longest Weyl element as a signed antidiagonal permutation in SO(d)."""
    w = np.fliplr(np.eye(d))
    if np.linalg.det(w) < 0:
        w[:, 0] *= -1
    return w


def matrix_exp_traceless(x):
    return scipy.linalg.expm(np.asarray(x, dtype=float))


def positive_qr(m):
    """QR factorization with strictly positive diagonal in R."""
    q, r = np.linalg.qr(m)
    s = np.sign(np.diag(r))
    s[s == 0] = 1.0
    return q * s, r * s[:, None]


# ---------------------------------------------------------------------------
# Flags


@dataclass(frozen=True)
class PartialFlag:
    """A point of F_theta represented by an orthonormal frame."""

    theta: tuple
    frame: np.ndarray = field(repr=False)

    def __post_init__(self):
        frame = np.asarray(self.frame, dtype=float)
        d = frame.shape[0]
        if frame.shape != (d, d):
            raise ValueError("frame must be square")
        if np.max(np.abs(frame.T @ frame - np.eye(d))) > FRAME_TOL:
            raise ValueError("frame must be orthonormal")
        object.__setattr__(self, "theta", make_theta(self.theta, d))
        frame = frame.copy()
        frame.setflags(write=False)
        object.__setattr__(self, "frame", frame)

    @property
    def d(self):
        return self.frame.shape[0]

    def subspace(self, i):
        return self.frame[:, :i]

    def translate(self, g):
        """The flag g.xi."""
        return flag_from_matrix(np.asarray(g) @ self.frame, self.theta)

    def project(self, theta):
        """Image under F_theta' -> F_theta for theta contained in self.theta."""
        if not set(theta) <= set(self.theta):
            raise TypeMismatch(f"cannot project type {self.theta} to {theta}")
        return PartialFlag(theta, self.frame)


def flag_from_matrix(g, theta):
    """The flag g.e+ spanned by the leading columns of ``g``."""
    q, _ = positive_qr(np.asarray(g, dtype=float))
    return PartialFlag(theta, q)


def standard_flag(d, theta):
    return PartialFlag(theta, np.eye(d))


def opposite_flag(d, theta):
    """e- = w0 e+_{i(theta)}, a flag of type i(theta)."""
    return PartialFlag(opposite_theta(theta, d), w0_matrix(d))


def nested_frame(subspaces, d):
    """Orthonormal frame adapted to an increasing chain of subspaces."""
    cols = np.zeros((d, 0))
    for basis in subspaces:
        basis = np.asarray(basis, dtype=float)
        resid = basis - cols @ (cols.T @ basis)
        k = basis.shape[1] - cols.shape[1]
        if k <= 0:
            continue
        u, _, _ = np.linalg.svd(resid, full_matrices=False)
        u, _ = _fix_signs(u[:, :k])
        cols = np.hstack([cols, u])
    # complete with the orthogonal complement
    if cols.shape[1] < d:
        resid = np.eye(d) - cols @ cols.T
        u, _, _ = np.linalg.svd(resid)
        u, _ = _fix_signs(u[:, : d - cols.shape[1]])
        cols = np.hstack([cols, u])
    q, _ = positive_qr(cols)
    return q


def _check_gaps(values, theta, what):
    for i in theta:
        if values[i] <= 0 or values[i - 1] / values[i] <= 1 + GAP_TOL:
            raise GapTooSmall(f"{what} gap at index {i} is too small")


def sv_flag(g, theta):
    """Flag spanned by the top left singular vectors of ``g``."""
    g = check_matrix(g)
    u, s, _ = svd_fixed(g)
    _check_gaps(s, theta, "singular value")
    return PartialFlag(theta, u)


def eigen_flag(g, theta):
    """Attracting flag of a loxodromic-at-theta element ``g``."""
    g = check_matrix(g)
    d = g.shape[0]
    mods = np.sort(np.abs(np.linalg.eigvals(g)))[::-1]
    _check_gaps(mods, theta, "eigenvalue modulus")
    subspaces = []
    for i in theta:
        cut = math.sqrt(mods[i - 1] * mods[i])
        _, z, sdim = scipy.linalg.schur(g, output="real", sort=lambda x, y, c=cut: math.hypot(x, y) > c)
        if sdim != i:
            raise GapTooSmall(f"could not isolate the top {i} eigenvalues")
        subspaces.append(z[:, :i])
    return PartialFlag(theta, nested_frame(subspaces, d))


def flag_distance(xi, eta):
    """Largest principal angle over the members of two flags of the same type."""
    if xi.theta != eta.theta:
        raise TypeMismatch("flags of different types")
    return max(
        float(np.max(scipy.linalg.subspace_angles(xi.subspace(i), eta.subspace(i))))
        for i in xi.theta
    )


def in_general_position(xi, eta):
    """Transversality test for xi in F_theta and eta in F_{i(theta)}.

    Returns ``(ok, margin)`` where margin is the smallest singular value of
    the concatenated orthonormal bases, minimized over theta.
    """
    d = xi.d
    if eta.d != d or eta.theta != opposite_theta(xi.theta, d):
        raise TypeMismatch(f"types {xi.theta} and {eta.theta} are not opposite")
    margin = min(
        float(np.linalg.svd(np.hstack([xi.subspace(i), eta.subspace(d - i)]), compute_uv=False)[-1])
        for i in xi.theta
    )
    return margin > TRANSVERSE_TOL, margin


def _intersection(a, b):
    """Orthonormal basis of span(a) intersected with span(b)."""
    m = np.hstack([a, -b])
    _, s, vt = np.linalg.svd(m)
    k = a.shape[1] + b.shape[1] - a.shape[0]
    null = vt[-k:, : a.shape[1]].T if k > 0 else np.zeros((a.shape[1], 0))
    basis = a @ null
    q, _ = np.linalg.qr(basis)
    return q


def connecting_element(xi, eta):
    """Some g in SL_d with g+ = xi and g- = eta (requires general position)."""
    ok, margin = in_general_position(xi, eta)
    if not ok:
        raise NotTransverse(f"flags are not in general position (margin {margin:.3g})")
    d = xi.d
    cuts = [0, *xi.theta, d]
    full = np.eye(d)
    cols = []
    for j in range(len(cuts) - 1):
        lo, hi = cuts[j], cuts[j + 1]
        a = xi.subspace(hi) if hi < d else full
        b = eta.subspace(d - lo) if lo > 0 else full
        cols.append(_intersection(a, b))
    g = np.hstack(cols)
    det = np.linalg.det(g)
    if det < 0:
        g[:, 0] *= -1
        det = -det
    return g / det ** (1.0 / d)


# ---------------------------------------------------------------------------
# Iwasawa cocycle, Busemann maps, Gromov products


def iwasawa_sigma(g, xi_lift):
    """sigma(g, xi): log of the positive diagonal of R in g k = Q R."""
    g = check_matrix(g)
    k = np.asarray(xi_lift, dtype=float)
    if np.max(np.abs(k.T @ k - np.eye(k.shape[0]))) > FRAME_TOL:
        raise ValueError("flag lift must be orthonormal")
    _, r = positive_qr(g @ k)
    diag = np.diag(r)
    if np.any(diag < DIAG_GUARD):
        raise IllConditioned("Iwasawa diagonal underflow")
    return np.log(diag)


def _inverse(g):
    return np.linalg.inv(g)


def busemann(xi, g, h, theta=None):
    """beta^theta_xi(g, h) = p_theta(sigma(g^-1, xi0) - sigma(h^-1, xi0))."""
    theta = xi.theta if theta is None else theta
    lift = xi.frame
    b = iwasawa_sigma(_inverse(g), lift) - iwasawa_sigma(_inverse(h), lift)
    return p_theta(b, theta)


def gromov_product(xi, eta, g=None):
    """Vector-valued Gromov product of a transverse pair."""
    if g is None:
        g = connecting_element(xi, eta)
    d = xi.d
    e = np.eye(d)
    b1 = busemann(xi, e, g)
    b2 = busemann(eta, e, g)
    return b1 + opposition_involution(b2)


@dataclass(frozen=True)
class HopfPoint:
    xi: PartialFlag
    eta: PartialFlag
    b: np.ndarray = field(repr=False)


def hopf_coordinates(g, theta):
    """(g+, g-, beta_{g+}(e, g)) for ``g`` in SL_d."""
    g = check_matrix(g)
    d = g.shape[0]
    xi = flag_from_matrix(g, theta)
    eta = flag_from_matrix(g @ w0_matrix(d), opposite_theta(theta, d))
    b = busemann(xi, np.eye(d), g)
    return HopfPoint(xi, eta, b)


# ---------------------------------------------------------------------------
# Shadow geometry


def distance(x, y):
    """d(x.o, y.o) = |mu(x^-1 y)|_2 on the symmetric space."""
    return float(np.linalg.norm(_log_sv(np.linalg.solve(x, y))))


def _log_sv(m):
    s = np.linalg.svd(m, compute_uv=False)
    return np.log(np.maximum(s, DIAG_GUARD))


def chamber_vector(c):
    """Element of a+ with simple-root values c (c >= 0)."""
    c = np.asarray(c, dtype=float)
    d = c.size + 1
    v = np.concatenate([[0.0], -np.cumsum(c)])
    return v - v.mean()


def _fiber_generators(theta, d):
    gens = []
    for a, b in theta_blocks(theta, d):
        for i in range(a, b):
            for j in range(i + 1, b):
                x = np.zeros((d, d))
                x[i, j], x[j, i] = -1.0, 1.0
                gens.append(x)
    return gens


@dataclass
class ShadowDistance:
    value: float
    converged: bool
    v: np.ndarray = field(repr=False, default=None)


def shadow_distance(xi, q, p, starts=SHADOW_STARTS, seed=0, detail=False):
    """Upper bound for the distance from p.o to the chamber cone q.o -> xi.

    Minimizes d(g exp(v) o, p o) over v in a+ and over lifts g = q k m with
    k P_theta = q^-1 xi and m in the compact fiber M_theta.  The minimum
    over multistart runs is returned.
    """
    q = check_matrix(q)
    p = check_matrix(p)
    d = q.shape[0]
    theta = xi.theta
    k0 = flag_from_matrix(np.linalg.solve(q, xi.frame), theta).frame
    h = k0.T @ np.linalg.solve(q, p)
    fgens = _fiber_generators(theta, d)
    nf = len(fgens)

    def objective(x):
        c = x[: d - 1]
        m = scipy.linalg.expm(sum(a * gen for a, gen in zip(x[d - 1 :], fgens))) if nf else np.eye(d)
        v = chamber_vector(c)
        target = np.exp(-v)[:, None] * (m.T @ h)
        try:
            return float(np.linalg.norm(_log_sv(target)))
        except np.linalg.LinAlgError:
            return math.inf

    rng = np.random.default_rng(seed)
    mu_h = _log_sv(h)
    c_guess = np.maximum(-np.diff(mu_h), 0.0)
    best, best_x, converged = math.inf, None, False
    c_max = 2.0 * float(np.linalg.norm(mu_h)) + 10.0
    bounds = [(0.0, c_max)] * (d - 1) + [(None, None)] * nf
    for j in range(max(starts, 1)):
        angles = rng.uniform(-math.pi, math.pi, nf) if j else np.zeros(nf)
        c0 = c_guess if j % 2 == 0 else c_guess * rng.uniform(0, 1, d - 1)
        x0 = np.concatenate([c0, angles])
        res = minimize(
            objective,
            x0,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": SHADOW_MAXITER, "ftol": 1e-12, "gtol": SHADOW_STEP_TOL},
        )
        if res.fun < best:
            best, best_x = float(res.fun), res.x
            converged = bool(res.success)
    if detail:
        return ShadowDistance(best, converged, chamber_vector(best_x[: d - 1]))
    return best
