"""Finite-ball checks of the hypotheses behind the series experiments.

Each diagnostic returns a plain dict with a ``verdict`` string, so that
reports can embed it directly.
"""

import math

import numpy as np
import scipy.stats

from .enumeration import word_flags
from .errors import InsufficientData
from .linalg import PartialFlag, a_theta_basis, compound, in_general_position, opposite_theta, p_theta

ANOSOV_SIGMAS = 3.0
ANTIPODAL_MARGIN = 1e-4
SPAN_RTOL = 1e-6
MAX_JORDAN_ROWS = 2000


def _root_values(mu, theta):
    return np.stack([mu[:, i - 1] - mu[:, i] for i in theta], axis=1)


def _shell_minima(table, theta):
    usable = table.usable()
    shells = [n for n in table.shells() if n >= 1]
    lens, mins = [], []
    for n in shells:
        sl = table.shell(n)
        ok = usable[sl]
        if not ok.any():
            continue
        vals = _root_values(table.mu[sl][ok], theta)
        lens.append(n)
        mins.append(vals.min(axis=0))
    if len(lens) < 3:
        raise InsufficientData(f"need 3 nonempty shells beyond the identity, have {len(lens)}")
    return np.array(lens), np.array(mins)


def anosov_diagnostic(table, theta):
    """Linear lower bound ``alpha(mu(g)) >= C |g| - C'`` fitted on shell minima."""
    lens, mins = _shell_minima(table, theta)
    per_root = []
    for j, i in enumerate(theta):
        fit = scipy.stats.linregress(lens, mins[:, j])
        per_root.append(
            {"root": int(i), "C": float(fit.slope), "C_prime": float(-fit.intercept), "stderr": float(fit.stderr)}
        )
    worst = min(per_root, key=lambda r: r["C"] - ANOSOV_SIGMAS * r["stderr"])
    ok = worst["C"] > 0 and worst["C"] > ANOSOV_SIGMAS * worst["stderr"]
    return {
        "C": worst["C"],
        "C_prime": worst["C_prime"],
        "stderr": worst["stderr"],
        "per_root": per_root,
        "min_gap_curve": {"length": lens.tolist(), "min_gap": mins.min(axis=1).tolist()},
        "verdict": "anosov-consistent" if ok else "not-anosov-consistent",
    }


def regularity_diagnostic(table, theta):
    """Per-shell minimum of the smallest theta-root; the last three must increase."""
    lens, mins = _shell_minima(table, theta)
    curve = mins.min(axis=1)
    ok = bool(np.all(np.diff(curve[-3:]) > 0))
    return {
        "length": lens.tolist(),
        "min_gap": curve.tolist(),
        "verdict": "theta-regular-consistent" if ok else "not-theta-regular",
    }


def antipodality_check(gens, table, theta, nsamples=200, seed=0):
    """Smallest transversality margin between sampled limit-flag pairs.

    ``xi`` is the singular-value flag of a top-shell word at theta and
    ``eta`` the flag of the inverse of another top-shell word at i(theta).
    Pairs are drawn so that the two words approximate limit points in
    different first-letter cylinders, i.e. genuinely distinct limit points.
    """
    d = table.d
    if nsamples <= 0:
        return {"pairs": 0, "min_margin": None, "skipped_gaps": 0, "verdict": "untested"}
    sl = table.shell(table.maxlen)
    rows = np.arange(sl.start, sl.stop)[table.usable()[sl]]
    if rows.size < 2:
        raise InsufficientData("top shell has fewer than two usable rows")
    rng = np.random.default_rng(seed)
    a = rng.choice(rows, size=nsamples)
    b = rng.choice(rows, size=nsamples)
    wa = table.words(a)
    wb = table.words(b)
    lens_b = table.length[b].astype(int)
    first_a = wa[:, 0]
    # the inverse of word b starts with the inverse of its last letter
    first_binv = wb[np.arange(nsamples), lens_b - 1] ^ 1
    keep = first_a != first_binv
    itheta = opposite_theta(theta, d)
    frames_a, ok_a = word_flags(gens, wa[keep], theta)
    frames_b, ok_b = word_flags(gens, wb[keep], itheta, inverse=True)
    good = ok_a & ok_b
    margins = []
    for fa, fb in zip(frames_a[good], frames_b[good]):
        _, margin = in_general_position(PartialFlag(theta, fa), PartialFlag(itheta, fb))
        margins.append(margin)
    if not margins:
        return {"pairs": 0, "min_margin": None, "skipped_gaps": int((~good).sum()), "verdict": "untested"}
    low = float(min(margins))
    return {
        "pairs": len(margins),
        "min_margin": low,
        "median_margin": float(np.median(margins)),
        "skipped_gaps": int((~good).sum()),
        "verdict": "antipodal-consistent" if low > ANTIPODAL_MARGIN else "not-antipodal",
    }


def word_jordan(gens, words):
    """Jordan projections of words through the top eigenvalue of each compound.

    Products are renormalized letter by letter, so long words keep full
    relative accuracy in the dominant eigenvalue of every exterior power.
    """
    words = np.asarray(words)
    d = gens.d
    n = words.shape[0]
    partial = np.zeros((n, d))
    for k in range(1, d):
        lc = np.stack([compound(g, k) for g in gens.letters])
        c = math.comb(d, k)
        acc = np.broadcast_to(np.eye(c), (n, c, c)).copy()
        scale = np.zeros(n)
        for pos in range(words.shape[1]):
            col = words[:, pos]
            live = col >= 0
            if not live.any():
                continue
            acc[live] = np.matmul(acc[live], lc[col[live].astype(int)])
            norms = np.linalg.norm(acc[live], axis=(1, 2))
            acc[live] /= norms[:, None, None]
            scale[live] += np.log(norms)
        top = np.abs(np.linalg.eigvals(acc)).max(axis=1)
        with np.errstate(divide="ignore"):
            partial[:, k] = scale + np.log(top)
    # partial[:, k] = lambda_1 + ... + lambda_k
    return np.column_stack([np.diff(partial, axis=1), -partial[:, d - 1]])


def _independent_rows(unit, k):
    """Greedy choice of k rows of ``unit`` that are far from linearly dependent."""
    chosen = [0]
    for _ in range(1, k):
        q, _ = np.linalg.qr(unit[chosen].T)
        resid = np.linalg.norm(unit - (unit @ q) @ q.T, axis=1)
        chosen.append(int(np.argmax(resid)))
    return chosen


def jordan_span_check(gens, table, theta, max_rows=MAX_JORDAN_ROWS, seed=0):
    """Rank of the span of projected Jordan vectors and a torus-fill statistic.

    When the vectors span a_theta, the others are written in the lattice
    basis of k of them and reduced mod 1.  The fill statistic is the largest
    Kolmogorov-Smirnov distance from uniform over the k torus coordinates:
    small values mean the Jordan vectors spread over the torus as a dense
    subgroup should.  It is None when the span is degenerate.
    """
    d = table.d
    sl = table.shell(table.maxlen)
    rows = np.arange(sl.start, sl.stop)[table.usable()[sl]]
    words = table.words(rows)
    lens = table.length[rows].astype(int)
    # cyclically reduced words: their norm tracks the spectral radius, so the
    # compound eigenvalues carry no cancellation error
    cyclic = (lens == 0) | (words[:, 0] != (words[np.arange(rows.size), np.maximum(lens - 1, 0)] ^ 1))
    rows, words = rows[cyclic], words[cyclic]
    rng = np.random.default_rng(seed)
    if rows.size > max_rows:
        pick = np.sort(rng.choice(rows.size, size=max_rows, replace=False))
        rows, words = rows[pick], words[pick]
    lam = word_jordan(gens, words)
    finite = np.all(np.isfinite(lam), axis=1)
    gaps = np.stack([lam[:, i - 1] - lam[:, i] for i in theta], axis=1)
    lox = finite & np.all(gaps > 1e-9, axis=1)
    k = len(theta)
    if lox.sum() < k:
        raise InsufficientData(f"{int(lox.sum())} loxodromic rows, need {k}")
    coords = p_theta(lam[lox], theta) @ a_theta_basis(d, theta)
    unit = coords / np.linalg.norm(coords, axis=1, keepdims=True)
    s = np.linalg.svd(unit, compute_uv=False)
    rank = int(np.sum(s > SPAN_RTOL * s[0]))
    fill = None
    if rank == k:
        # coordinates of the remaining vectors in a lattice basis formed by
        # k well-separated Jordan vectors, reduced mod 1
        basis_rows = _independent_rows(unit, k)
        lattice = coords[basis_rows]
        rest = np.delete(coords, basis_rows, axis=0)
        if rest.shape[0] >= 2:
            frac = np.mod(np.linalg.solve(lattice.T, rest.T).T, 1.0)
            fill = max(float(scipy.stats.kstest(frac[:, j], "uniform").statistic) for j in range(k))
    return {"rank": rank, "dim": k, "rows": int(lox.sum()), "fill_ks": fill, "spans": rank == k}
