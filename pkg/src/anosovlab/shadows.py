"""Shadows, empirical Patterson-Sullivan measures and the shadow lemma.

A shadow O_R(q, p) is the set of flags xi such that some Weyl cone from
q.o towards xi passes within R of p.o.  The flag-viewpoint shadow
O_R(eta, p) collects the flags g P_theta of elements g with g- = eta and
d(g.o, p.o) < R.

For SL_2 the point-viewpoint distance has a closed form, which the
measure-side checks use in bulk.
"""

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from .enumeration import word_flags
from .errors import AbscissaUnknown, InsufficientRange, MassTooSmall, NotTransverse, TypeMismatch
from .linalg import (
    PartialFlag,
    busemann,
    cartan_projection,
    check_matrix,
    connecting_element,
    flag_from_matrix,
    opposite_theta,
    p_theta,
    positive_qr,
    shadow_distance,
    sv_flag,
    theta_blocks,
)
from .series import abscissa, filter_directional

PSEUDO_KAPPA = 2.0
PATTERSON_SHELLS = 3
PATTERSON_MARGIN = 0.01
PATTERSON_OFFSET = 0.02
MIN_TEST_MASS = 0.01
SHADOW_WINDOW = (1 / 50, 50)
SHADOW_QUANTILE = 0.95
DEPTH_MARGIN = 4
UNDECIDED_BAND = 1e-6


@dataclass(frozen=True)
class ShadowSpec:
    """Shadow of the ball B(p.o, R) seen from a point q.o or a flag eta."""

    viewpoint: object
    center: np.ndarray = field(repr=False)
    R: float
    theta: tuple

    def __post_init__(self):
        if not self.R > 0:
            raise ValueError("shadow radius must be positive")
        center = check_matrix(self.center)
        d = center.shape[0]
        if isinstance(self.viewpoint, PartialFlag):
            if self.viewpoint.d != d or self.viewpoint.theta != opposite_theta(self.theta, d):
                raise TypeMismatch("flag viewpoint must have type i(theta)")
        else:
            vp = check_matrix(self.viewpoint)
            if vp.shape != center.shape:
                raise TypeMismatch("viewpoint and center differ in size")
            object.__setattr__(self, "viewpoint", vp)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "theta", tuple(self.theta))

    @property
    def d(self):
        return self.center.shape[0]

    @property
    def flag_viewpoint(self):
        return isinstance(self.viewpoint, PartialFlag)


@dataclass(frozen=True)
class ShadowVerdict:
    """Membership verdict; ``inside`` is None when the optimizer was undecided."""

    inside: object
    bound: float

    def __bool__(self):
        return bool(self.inside)


# ---------------------------------------------------------------------------
# SL_2 closed form


def _line_angles(vectors):
    """Angles in [0, pi) of lines through the given 2-vectors (last axis)."""
    v = np.asarray(vectors, dtype=float)
    return np.mod(np.arctan2(v[..., 1], v[..., 0]), math.pi)


def _log_sinh(x):
    x = np.asarray(x, dtype=float)
    return x + np.log1p(-np.exp(-2 * x)) - math.log(2)


def rank_one_distance(center_angle, center_mu, flag_angles):
    """Distance from p.o to the ray o -> xi in SL_2, for many flags xi.

    ``center_angle`` is the angle of the top left singular vector of p and
    ``center_mu`` its first Cartan coordinate; the hyperbolic plane carries
    the metric |mu|_2, which is the curvature -1 metric divided by sqrt(2).
    """
    D = 2.0 * np.asarray(center_mu, dtype=float)  # curvature -1 distance from o to p.o
    diff = np.abs(np.asarray(flag_angles) - np.asarray(center_angle))
    diff = np.minimum(diff, math.pi - diff)
    phi = 2.0 * diff  # angle at o between the two geodesics
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        y = _log_sinh(np.maximum(D, 1e-300)) + np.log(np.sin(phi))  # log sinh of the distance
        # asinh(e^y) without overflow
        dist = np.where(y > 20, y + np.log1p(np.sqrt(1 + np.exp(-2 * np.minimum(y, 350)))),
                        np.arcsinh(np.exp(np.minimum(y, 20))))
    dist = np.where(phi >= math.pi / 2, D, dist)
    dist = np.where(D > 0, dist, 0.0)
    return dist / math.sqrt(2.0)


def _rank_one_center(q, p):
    h = np.linalg.solve(q, p)
    u, s, _ = np.linalg.svd(h)
    return float(_line_angles(u[:, 0])), float(0.5 * math.log(s[0] / s[1]))


# ---------------------------------------------------------------------------
# membership


def _flag_viewpoint_distance(spec, xi, starts=4, seed=0):
    """min d(g0 l.o, p.o) over l in L_theta, where g0 has g0+ = xi, g0- = eta."""
    try:
        g0 = connecting_element(xi, spec.viewpoint)
    except NotTransverse:
        return math.inf, True
    d = spec.d
    target = np.linalg.solve(g0, spec.center)
    # L_theta.o is the set of exp(X).o, X block-diagonal symmetric traceless
    slots = []
    for a, b in theta_blocks(spec.theta, d):
        for i in range(a, b):
            for j in range(i, b):
                slots.append((i, j))

    def build(x):
        X = np.zeros((d, d))
        for val, (i, j) in zip(x, slots):
            X[i, j] = X[j, i] = val
        return X - np.trace(X) / d * np.eye(d)

    def objective(x):
        X = build(x)
        w, v = np.linalg.eigh(X)
        inv = (v * np.exp(-w)) @ v.T
        try:
            s = np.linalg.svd(inv @ target, compute_uv=False)
        except np.linalg.LinAlgError:
            return math.inf
        val = float(np.linalg.norm(np.log(s)))
        return val if math.isfinite(val) else math.inf

    # the optimum lies within d(g0.o, p.o) of the origin of L_theta.o
    s0 = np.linalg.svd(target, compute_uv=False)
    bound = 2.0 * float(np.linalg.norm(np.log(s0))) + 1.0
    rng = np.random.default_rng(seed)
    best, ok = math.inf, False
    for j in range(starts):
        x0 = np.zeros(len(slots)) if j == 0 else rng.normal(scale=1.0, size=len(slots))
        res = scipy.optimize.minimize(objective, x0, method="L-BFGS-B", bounds=[(-bound, bound)] * len(slots))
        if res.fun < best:
            best, ok = float(res.fun), bool(res.success)
    return best, ok


def shadow_contains(spec, xi, seed=0):
    """Whether xi lies in the shadow; returns a ShadowVerdict with the distance bound.

    The point-viewpoint test is strict (distance < R).  Its distance is an
    upper bound from a multistart optimizer, except for SL_2 where it is
    exact; when the optimizer fails to converge and the bound is not below R
    the verdict is undecided.
    """
    if xi.theta != spec.theta:
        raise TypeMismatch("flag type differs from the shadow type")
    if spec.flag_viewpoint:
        bound, ok = _flag_viewpoint_distance(spec, xi, seed=seed)
    elif spec.d == 2:
        angle, mu1 = _rank_one_center(spec.viewpoint, spec.center)
        xi_angle = _line_angles(np.linalg.solve(spec.viewpoint, xi.frame[:, 0]))
        bound, ok = float(rank_one_distance(angle, mu1, xi_angle)), True
    else:
        res = shadow_distance(xi, spec.viewpoint, spec.center, seed=seed, detail=True)
        bound, ok = res.value, res.converged
    if bound < spec.R:
        return ShadowVerdict(True, bound)
    if not ok and bound < spec.R + max(UNDECIDED_BAND, 0.05 * spec.R):
        return ShadowVerdict(None, bound)
    return ShadowVerdict(False, bound)


def _busemann_many(frames, g, h, theta):
    """beta_xi(g, h) for a stack of flag frames."""
    _, r1 = np.linalg.qr(np.linalg.inv(g)[None] @ frames)
    _, r2 = np.linalg.qr(np.linalg.inv(h)[None] @ frames)
    d1 = np.log(np.abs(np.diagonal(r1, axis1=1, axis2=2)))
    d2 = np.log(np.abs(np.diagonal(r2, axis1=1, axis2=2)))
    return p_theta(d1 - d2, theta)


def pseudo_shadow_mask(spec, frames, kappa=PSEUDO_KAPPA):
    """Vectorized surrogate test |beta_xi(q, p) - p_theta(mu(q^-1 p))| <= kappa R.

    A necessary condition for membership when kappa is calibrated; flag
    viewpoints have no cheap surrogate and pass everything.
    """
    frames = np.asarray(frames, dtype=float)
    if spec.flag_viewpoint:
        return np.ones(frames.shape[0], dtype=bool)
    q, p = spec.viewpoint, spec.center
    s = np.linalg.svd(np.linalg.solve(q, p), compute_uv=False)
    mu = np.log(s)
    mu -= mu.mean()
    beta = _busemann_many(frames, q, p, spec.theta)
    return np.linalg.norm(beta - p_theta(mu, spec.theta), axis=1) <= kappa * spec.R


def pseudo_shadow_contains(spec, xi, kappa=PSEUDO_KAPPA):
    return bool(pseudo_shadow_mask(spec, xi.frame[None], kappa)[0])


def calibrate_kappa(d, theta, R=1.0, samples=200, scale=3.0, seed=0):
    """Largest ratio |beta - a_theta| / R over sampled exact shadow members.

    Members are built directly: for g = p exp(X) with |mu(exp X)| < R the
    Weyl cone from o through g.o ends at the singular flag of g.
    """
    rng = np.random.default_rng(seed)
    ratios = []
    for _ in range(samples):
        a = np.sort(rng.normal(size=d))[::-1] * scale
        a -= a.mean()
        k1, _ = positive_qr(rng.normal(size=(d, d)))
        k2, _ = positive_qr(rng.normal(size=(d, d)))
        p = k1 @ np.diag(np.exp(a)) @ k2
        p /= abs(np.linalg.det(p)) ** (1.0 / d)
        X = rng.normal(size=(d, d))
        X = X + X.T
        X -= np.trace(X) / d * np.eye(d)
        w, v = np.linalg.eigh(X)
        w *= R * rng.uniform(0, 1) / max(np.linalg.norm(w), 1e-300)
        g = p @ (v * np.exp(w)) @ v.T
        try:
            xi = sv_flag(g, theta)
        except Exception:
            continue
        beta = busemann(xi, np.eye(d), p)
        ratios.append(float(np.linalg.norm(beta - p_theta(cartan_projection(p), theta))) / R)
    ratios = np.array(ratios)
    return {
        "kappa": float(ratios.max()),
        "median": float(np.median(ratios)),
        "samples": int(ratios.size),
        "default": PSEUDO_KAPPA,
    }


# ---------------------------------------------------------------------------
# Patterson-Sullivan measures


@dataclass(frozen=True)
class EmpiricalConformalMeasure:
    theta: tuple
    psi: object
    s: float
    frames: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    lengths: np.ndarray = field(repr=False)
    first: np.ndarray = field(repr=False)
    skipped: int = 0

    @property
    def d(self):
        return self.frames.shape[1]

    @property
    def total(self):
        return float(math.fsum(self.weights))

    def __len__(self):
        return self.weights.size

    def atom(self, i):
        return PartialFlag(self.theta, self.frames[i]), float(self.weights[i])

    def mass(self, mask):
        return float(math.fsum(self.weights[np.asarray(mask, dtype=bool)]))

    def cylinder_masses(self):
        """Mass of the atoms grouped by the first letter of their word."""
        return {int(c): self.mass(self.first == c) for c in np.unique(self.first)}

    def to_jsonl(self, path):
        with open(path, "w") as fh:
            for fr, w, n in zip(self.frames, self.weights, self.lengths):
                fh.write(json.dumps({"frame": fr.tolist(), "weight": float(w), "length": int(n)}) + "\n")


def patterson_sullivan(table, theta, psi, s=None, gens=None, frames=None, include_guarded=False, chunk=100_000):
    """Normalized sum of Dirac masses at singular flags of the top shells.

    The weight of the row of gamma is exp(-s psi(mu_theta(gamma))).  ``s``
    defaults to the estimated abscissa plus 0.02 and must exceed it by at
    least 0.01.  Flags come from ``gens`` through the words of the table,
    or directly from ``frames`` (one per row) for synthetic tables.
    """
    theta = tuple(theta)
    usable = table.usable(include_guarded)
    try:
        est = abscissa(table, usable, psi, include_guarded).s
    except InsufficientRange as exc:
        if s is None:
            raise AbscissaUnknown(str(exc)) from exc
        est = None
    if s is None:
        s = est + PATTERSON_OFFSET
    elif est is not None and s < est + PATTERSON_MARGIN:
        raise AbscissaUnknown(f"s = {s:.4g} is not above the abscissa estimate {est:.4g} by 0.01")
    top = table.shells()[-PATTERSON_SHELLS:]
    rows = np.flatnonzero(np.isin(table.length, top) & usable)
    if frames is not None:
        fr = np.asarray(frames, dtype=float)[rows]
        ok = np.ones(rows.size, dtype=bool)
        first = np.full(rows.size, -1, dtype=np.int8)
    else:
        if gens is None:
            raise ValueError("need generators or explicit frames")
        parts, oks, firsts = [], [], []
        for start in range(0, rows.size, chunk):
            words = table.words(rows[start : start + chunk])
            f, k = word_flags(gens, words, theta)
            parts.append(f)
            oks.append(k)
            firsts.append(words[:, 0])
        fr = np.concatenate(parts)
        ok = np.concatenate(oks)
        first = np.concatenate(firsts)
    logw = -s * table.psi_values(psi)[rows]
    w = np.exp(logw - logw[ok].max())
    w[~ok] = 0.0
    w = w[ok] / math.fsum(w[ok])
    return EmpiricalConformalMeasure(
        theta, psi, float(s), fr[ok], w, table.length[rows][ok].copy(), first[ok], int((~ok).sum())
    )


def _translate_frames(g, frames):
    q, r = np.linalg.qr(np.asarray(g)[None] @ frames)
    sign = np.sign(np.diagonal(r, axis1=1, axis2=2))
    sign[sign == 0] = 1.0
    return q * sign[:, None, :]


def flag_distances(frames, center):
    """Largest principal angle to the center flag, over theta, for many frames."""
    out = np.zeros(frames.shape[0])
    for i in center.theta:
        x = frames[:, :, :i]
        c = center.subspace(i)
        resid = x - c[None] @ (c.T[None] @ x)
        s = np.linalg.norm(resid, ord=2, axis=(1, 2))
        out = np.maximum(out, np.arcsin(np.clip(s, 0.0, 1.0)))
    return out


def conformality_residual(nu, gamma, testsets):
    """max over test balls D of |nu(gamma^-1 D) / sum_{xi in D} w e^{s psi(beta_xi(e, gamma))} - 1|.

    Test balls are ``(center_flag, radius)`` pairs in principal angle and
    must carry nu-mass at least 0.01.
    """
    gamma = check_matrix(gamma)
    d = nu.d
    moved = _translate_frames(gamma, nu.frames)
    beta = _busemann_many(nu.frames, np.eye(d), gamma, nu.theta)
    density = np.exp(nu.s * (beta @ nu.psi.dual))
    worst = 0.0
    for center, radius in testsets:
        inside = flag_distances(nu.frames, center) < radius
        if nu.mass(inside) < MIN_TEST_MASS:
            raise MassTooSmall(f"test ball carries mass {nu.mass(inside):.3g} < {MIN_TEST_MASS}")
        lhs = nu.mass(flag_distances(moved, center) < radius)
        rhs = float(math.fsum(nu.weights[inside] * density[inside]))
        worst = max(worst, abs(lhs / rhs - 1.0))
    return worst


# ---------------------------------------------------------------------------
# shadow lemma


def _atom_angles(nu):
    return _line_angles(nu.frames[:, :, 0])


def shadow_mass(nu, center, r, center_mu=None, center_angle=None, kappa=PSEUDO_KAPPA, seed=0):
    """nu(O_r(o, center.o)).

    In SL_2 the closed-form distance is used for every atom and ``center``
    may be given by its Cartan coordinate and singular angle instead of a
    matrix.  Otherwise atoms pass the surrogate filter before the exact test.
    """
    d = nu.d
    if d == 2:
        if center_mu is None:
            center_angle, center_mu = _rank_one_center(np.eye(2), center)
        dist = rank_one_distance(center_angle, center_mu, _atom_angles(nu))
        return nu.mass(dist < r)
    spec = ShadowSpec(np.eye(d), center, r, nu.theta)
    cand = np.flatnonzero(pseudo_shadow_mask(spec, nu.frames, kappa))
    inside = np.zeros(len(nu), dtype=bool)
    for i in cand:
        inside[i] = bool(shadow_contains(spec, PartialFlag(nu.theta, nu.frames[i]), seed=seed))
    return nu.mass(inside)


@dataclass(frozen=True)
class ShadowLemmaReport:
    ratios: np.ndarray = field(repr=False)
    lengths: np.ndarray = field(repr=False)
    quantiles: dict
    fraction_in_window: float
    verdict: str

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["length", "ratio"])
            for n, r in zip(self.lengths, self.ratios):
                out.writerow([int(n), repr(float(r))])


def shadow_lemma_check(table, nu, psi, r, sample_size=200, seed=0, gens=None, window=SHADOW_WINDOW):
    """Ratios nu(O_r(o, gamma.o)) e^{s psi(mu_theta(gamma))} over sampled gamma.

    The exponent s of the measure enters the ratio: its atoms decay like
    e^{-s psi}.  Elements are drawn from lengths 1 .. maxlen - 4, so every
    sampled shadow still holds many atoms of the top shells.
    """
    rng = np.random.default_rng(seed)
    hi = max(1, table.maxlen - DEPTH_MARGIN)
    pool = np.flatnonzero((table.length >= 1) & (table.length <= hi) & table.usable())
    rows = np.sort(rng.choice(pool, size=min(sample_size, pool.size), replace=False))
    vals = table.psi_values(psi)
    d = table.d
    ratios = np.empty(rows.size)
    if d == 2 and gens is not None:
        frames, _ = word_flags(gens, table.words(rows), nu.theta)
        angles = _line_angles(frames[:, :, 0])
    for j, row in enumerate(rows):
        if d == 2 and gens is not None:
            mass = shadow_mass(nu, None, r, center_mu=float(table.mu[row, 0]), center_angle=float(angles[j]))
        else:
            if gens is None:
                raise ValueError("need generators to rebuild group elements")
            mass = shadow_mass(nu, gens.word_matrix(table.word(int(row))), r, seed=seed)
        ratios[j] = mass * math.exp(nu.s * vals[row])
    lo, hi_w = window
    frac = float(np.mean((ratios >= lo) & (ratios <= hi_w)))
    qs = {str(q): float(np.quantile(ratios, q)) for q in (0.025, 0.25, 0.5, 0.75, 0.975)}
    verdict = "shadow-lemma-consistent" if frac >= SHADOW_QUANTILE else "shadow-lemma-inconsistent"
    return ShadowLemmaReport(ratios, table.length[rows].copy(), qs, frac, verdict)


# ---------------------------------------------------------------------------
# directional conical points


def directional_conical_indicator(table, xi, u, r, R, gens, seed=0):
    """Word lengths of the gamma in Gamma_{u,r} whose shadow O_R(o, gamma.o) holds xi."""
    mask = filter_directional(table, u, r)
    rows = np.flatnonzero(mask & table.usable())
    d = table.d
    hits = []
    if rows.size == 0:
        return hits
    if d == 2:
        frames, _ = word_flags(gens, table.words(rows), xi.theta)
        angles = _line_angles(frames[:, :, 0])
        dist = rank_one_distance(angles, table.mu[rows, 0], float(_line_angles(xi.frame[:, 0])))
        return sorted(int(n) for n in table.length[rows][dist < R])
    for row in rows:
        g = gens.word_matrix(table.word(int(row)))
        if shadow_contains(ShadowSpec(np.eye(d), g, R, xi.theta), xi, seed=seed):
            hits.append(int(table.length[row]))
    return sorted(hits)


def write_conical_csv(path, hits):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["length"])
        for n in hits:
            out.writerow([n])
