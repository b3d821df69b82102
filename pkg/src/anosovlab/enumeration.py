"""Word-ball enumeration and the columnar orbit table.

Products along words are accumulated in every exterior power
``Lambda^k R^d`` (k = 1..d-1).  The log of the top singular value of the
k-th compound is ``mu_1 + ... + mu_k``, and a top singular value of a long
product is resolved to relative machine precision even when the plain
product is far too ill-conditioned for an SVD to see its small singular
values.  Each compound is renormalized after every step, so word length is
limited only by memory.
"""

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import BudgetExceeded, CollisionAmbiguous, InsufficientData
from .linalg import compound, p_theta

DEFAULT_BUDGET = 8 * 2**30
BUDGET_ENV = "ANOSOVLAB_MEMORY_BUDGET"
# log of the largest condition number kept unflagged; compounds stay exact
# well past the plain-SVD guard, so only values near the float range are dead
GUARD_LOG_COND = 600.0
SUBTREE_LEAVES = 1 << 16
POWER_STEPS = 3
POWER_RTOL = 1e-13
DEDUP_FINE = 1e-9
DEDUP_COARSE = 1e-6


def ball_size(m, maxlen):
    """Number of reduced words of length <= maxlen in the free group F_m."""
    if maxlen < 0:
        return 0
    return 1 + sum(2 * m * (2 * m - 1) ** (n - 1) for n in range(1, maxlen + 1))


def row_bytes(d):
    # mu (8d) + parent (4) + last letter (1) + length (2) + guard (1)
    return 8 * d + 8


def memory_budget(budget=None):
    if budget is not None:
        return int(budget)
    env = os.environ.get(BUDGET_ENV)
    return int(float(env)) if env else DEFAULT_BUDGET


def estimate_bytes(d, m, maxlen):
    return ball_size(m, maxlen) * row_bytes(d)


@dataclass
class OrbitTable:
    """Immutable columnar record of an enumerated word ball.

    Rows are sorted by (length, lexicographic word).  Row ``i`` is the word
    of row ``parent[i]`` followed by the letter ``last[i]``.
    """

    meta: dict
    length: np.ndarray
    parent: np.ndarray
    last: np.ndarray
    mu: np.ndarray
    guarded: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for arr in (self.length, self.parent, self.last, self.mu, self.guarded):
            arr.setflags(write=False)

    def __len__(self):
        return self.length.size

    @classmethod
    def from_points(cls, mu, length=None, name="points"):
        """Wrap bare Cartan projections as a table (synthetic data, tests).

        Rows are kept in the given order; ``length`` defaults to zero, so the
        whole table is one shell.
        """
        mu = np.array(mu, dtype=float, ndmin=2)
        n = mu.shape[0]
        length = np.zeros(n, dtype=np.int16) if length is None else np.asarray(length, dtype=np.int16).copy()
        meta = {
            "generator_hash": "",
            "d": mu.shape[1],
            "m": 0,
            "maxlen": int(length.max()) if n else 0,
            "policy": "points",
            "seed": 0,
            "rows": n,
            "name": name,
        }
        return cls(
            meta,
            length,
            np.full(n, -1, dtype=np.int32),
            np.full(n, -1, dtype=np.int8),
            mu,
            np.zeros(n, dtype=bool),
        )

    @property
    def d(self):
        return self.mu.shape[1]

    @property
    def maxlen(self):
        return int(self.meta["maxlen"])

    def shell(self, n):
        """Row slice of the words of length exactly n."""
        lo, hi = np.searchsorted(self.length, [n, n + 1])
        return slice(int(lo), int(hi))

    def shells(self):
        return sorted(set(int(x) for x in np.unique(self.length)))

    def words(self, rows):
        """Letter codes of the given rows, padded with -1 to maxlen."""
        rows = np.asarray(rows, dtype=np.int64)
        out = np.full((rows.size, max(self.maxlen, 1)), -1, dtype=np.int8)
        lens = self.length[rows].astype(np.int64)
        cur = rows.copy()
        pos = lens - 1
        for _ in range(self.maxlen):
            live = pos >= 0
            if not live.any():
                break
            out[np.flatnonzero(live), pos[live]] = self.last[cur[live]]
            cur[live] = self.parent[cur[live]]
            pos = pos - 1
        return out

    def word(self, row):
        w = self.words([row])[0]
        return [int(c) for c in w if c >= 0]

    def mu_theta(self, theta):
        key = ("mu_theta", tuple(theta))
        if key not in self._cache:
            arr = p_theta(self.mu, theta)
            arr.setflags(write=False)
            self._cache[key] = arr
        return self._cache[key]

    def psi_values(self, form):
        key = ("psi", form.theta, form.dual.tobytes())
        if key not in self._cache:
            arr = self.mu @ form.dual
            arr.setflags(write=False)
            self._cache[key] = arr
        return self._cache[key]

    def usable(self, include_guarded=False):
        return np.ones(len(self), dtype=bool) if include_guarded else ~self.guarded

    def digest(self):
        import hashlib

        h = hashlib.sha256()
        for arr in (self.length, self.parent, self.last, self.mu, self.guarded):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# numeric kernels


def _top_left(p):
    """Exact top singular value and left vector of a stack of square matrices."""
    s = p @ np.swapaxes(p, -1, -2)
    w, v = np.linalg.eigh(s)
    top = np.sqrt(np.maximum(w[..., -1], 0.0))
    return top, v[..., :, -1]


def _power_top(p, u0):
    """Warm-started power iteration for the top singular pair; exact fallback."""
    pt = np.swapaxes(p, 1, 2)
    u = u0[:, :, None]
    prev = None
    for _ in range(POWER_STEPS):
        w = pt @ u
        prev = np.linalg.norm(w, axis=(1, 2))
        u = p @ w
        u /= np.linalg.norm(u, axis=(1, 2))[:, None, None]
    sig_new = np.linalg.norm(pt @ u, axis=(1, 2))
    u = u[:, :, 0]
    bad = ~(np.abs(sig_new - prev) <= POWER_RTOL * sig_new)
    if bad.any():
        idx = np.flatnonzero(bad)
        s2, u2 = _top_left(p[idx])
        sig_new[idx] = s2
        u[idx] = u2
    return sig_new, u


@dataclass
class _State:
    """Per-node accumulation state: normalized compounds, top vectors, logs."""

    comps: list  # list over k of (n, C, C) arrays, normalized to top sv 1
    vecs: list  # list over k of (n, C) top left singular vectors
    logs: np.ndarray  # (n, d-1) log top singular value of each compound
    last: np.ndarray  # (n,) last letter code, -1 for the identity

    def take(self, idx):
        return _State(
            [c[idx] for c in self.comps],
            [v[idx] for v in self.vecs],
            self.logs[idx],
            self.last[idx],
        )


def _letter_compounds(gens):
    d = gens.d
    return [np.stack([compound(g, k) for g in gens.letters]) for k in range(1, d)]


def _identity_state(d):
    comps, vecs = [], []
    for k in range(1, d):
        n = math.comb(d, k)
        comps.append(np.eye(n)[None])
        v = np.zeros((1, n))
        v[0, 0] = 1.0
        vecs.append(v)
    return _State(comps, vecs, np.zeros((1, d - 1)), np.array([-1], dtype=np.int8))


def _mu_from_logs(logs):
    d = logs.shape[1] + 1
    full = np.concatenate([np.zeros((logs.shape[0], 1)), logs, np.zeros((logs.shape[0], 1))], axis=1)
    mu = np.diff(full, axis=1)
    return mu - mu.mean(axis=1, keepdims=True)


def _expand(state, letter_comps, n_letters, exact=False):
    """Children of every node in order (parent order, letter order)."""
    n = state.last.size
    letters = np.arange(n_letters, dtype=np.int8)
    par = np.repeat(np.arange(n), n_letters)
    let = np.tile(letters, n)
    prev = state.last[par]
    keep = (prev < 0) | (let != (prev ^ 1))
    par, let = par[keep], let[keep]
    comps, vecs = [], []
    logs = np.empty((par.size, len(letter_comps)))
    for k, lc in enumerate(letter_comps):
        p = np.matmul(state.comps[k][par], lc[let])
        if exact:
            sig, u = _top_left(p)
        else:
            sig, u = _power_top(p, state.vecs[k][par])
        p /= sig[:, None, None]
        comps.append(p)
        vecs.append(u)
        logs[:, k] = state.logs[par, k] + np.log(sig)
    return _State(comps, vecs, logs, let.astype(np.int8)), par


def _guard(mu):
    bad = ~np.all(np.isfinite(mu), axis=1)
    with np.errstate(invalid="ignore"):
        bad |= (mu[:, 0] - mu[:, -1]) > GUARD_LOG_COND
    return bad


def _run_subtree(root, letter_comps, n_letters, depth, exact_until, root_len):
    """Enumerate all descendants of one node down to ``depth`` further letters."""
    levels = []
    state = root
    for step in range(depth):
        state, par = _expand(state, letter_comps, n_letters, exact=root_len + step + 1 <= exact_until)
        levels.append((_mu_from_logs(state.logs), par, state.last.copy()))
    return levels


def enumerate_ball(gens, maxlen, policy="free", workers=1, budget=None, seed=0, exact_until=4):
    """Enumerate the word ball of radius ``maxlen``.

    ``policy`` is ``"free"`` (words are canonical, no matrix dedup) or
    ``"matrix"`` (duplicates merged on a quantized-matrix hash).
    """
    if maxlen < 1:
        raise ValueError("maxlen must be >= 1")
    need = estimate_bytes(gens.d, gens.m, maxlen)
    cap = memory_budget(budget)
    if need > cap:
        raise BudgetExceeded(
            f"ball of radius {maxlen} needs about {need / 2**30:.2f} GiB, budget {cap / 2**30:.2f} GiB",
            required_bytes=need,
            budget_bytes=cap,
        )
    if policy == "matrix":
        return _enumerate_dedup(gens, maxlen, seed)
    if policy != "free":
        raise ValueError(f"unknown dedup policy {policy!r}")

    d = gens.d
    n_letters = 2 * gens.m
    letter_comps = _letter_compounds(gens)
    branch = max(n_letters - 1, 1)
    # deterministic split depth: subtrees hold at most SUBTREE_LEAVES leaves
    top = 1
    while top < maxlen and branch ** (maxlen - top) > SUBTREE_LEAVES:
        top += 1
    top = min(top, maxlen)

    # breadth-first for the first `top` levels
    state = _identity_state(d)
    mus = [np.zeros((1, d))]
    parents = [np.array([-1], dtype=np.int64)]
    lasts = [np.array([-1], dtype=np.int8)]
    for n in range(1, top + 1):
        state, par = _expand(state, letter_comps, n_letters, exact=n <= exact_until)
        mus.append(_mu_from_logs(state.logs))
        parents.append(par.astype(np.int64))
        lasts.append(state.last.copy())

    depth = maxlen - top
    if depth > 0:
        roots = [state.take(np.array([i])) for i in range(state.last.size)]

        def task(root):
            return _run_subtree(root, letter_comps, n_letters, depth, exact_until, top)

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(task, roots))
        else:
            results = [task(r) for r in roots]
        # deterministic ordered merge: shell by shell, subtree by subtree
        prev_offsets = np.arange(len(roots))  # local index 0 of each subtree's root
        for lvl in range(depth):
            sizes = np.array([res[lvl][0].shape[0] for res in results])
            offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
            mus.append(np.concatenate([res[lvl][0] for res in results]))
            if lvl == 0:
                glob_par = [np.full(sizes[s], prev_offsets[s], dtype=np.int64) for s in range(len(results))]
            else:
                glob_par = [results[s][lvl][1] + prev_offsets[s] for s in range(len(results))]
            parents.append(np.concatenate(glob_par).astype(np.int64))
            lasts.append(np.concatenate([res[lvl][2] for res in results]))
            prev_offsets = offsets
            for res in results:
                res[lvl] = None

    return _assemble(gens, maxlen, "free", seed, mus, parents, lasts)


def _assemble(gens, maxlen, policy, seed, mus, parents, lasts):
    sizes = [m.shape[0] for m in mus]
    starts = np.concatenate([[0], np.cumsum(sizes)])
    length = np.concatenate([np.full(s, n, dtype=np.int16) for n, s in enumerate(sizes)])
    parent = np.concatenate(
        [np.where(p >= 0, p + (starts[n - 1] if n > 0 else 0), -1) for n, p in enumerate(parents)]
    ).astype(np.int32)
    last = np.concatenate(lasts).astype(np.int8)
    mu = np.concatenate(mus)
    meta = {
        "generator_hash": gens.digest(),
        "d": gens.d,
        "m": gens.m,
        "maxlen": int(maxlen),
        "policy": policy,
        "seed": int(seed),
        "rows": int(mu.shape[0]),
        "name": gens.name,
    }
    return OrbitTable(meta, length, parent, last, mu, _guard(mu))


def _enumerate_dedup(gens, maxlen, seed):
    """Breadth-first enumeration merging words that give the same matrix."""
    d = gens.d
    n_letters = 2 * gens.m
    letter_comps = _letter_compounds(gens)
    letters = gens.letters
    fine, coarse = {}, {}

    def register(mat, idx):
        key_f = np.round(mat / DEDUP_FINE).astype(np.int64).tobytes()
        if key_f in fine:
            return False
        key_c = np.round(mat / DEDUP_COARSE).astype(np.int64).tobytes()
        other = coarse.get(key_c)
        if other is not None:
            gap = float(np.max(np.abs(other - mat)))
            if DEDUP_FINE <= gap <= DEDUP_COARSE:
                raise CollisionAmbiguous(f"two words at matrix distance {gap:.3g}")
            if gap < DEDUP_FINE:
                return False
        fine[key_f] = idx
        coarse[key_c] = mat
        return True

    state = _identity_state(d)
    mats = np.eye(d)[None]
    register(mats[0], 0)
    mus = [np.zeros((1, d))]
    parents = [np.array([-1], dtype=np.int64)]
    lasts = [np.array([-1], dtype=np.int8)]
    count = 1
    for n in range(1, maxlen + 1):
        child, par = _expand(state, letter_comps, n_letters, exact=True)
        cm = np.matmul(mats[par], np.stack(letters)[child.last.astype(int)])
        keep = []
        for j in range(par.size):
            if register(cm[j], count + len(keep)):
                keep.append(j)
        keep = np.array(keep, dtype=np.int64)
        if keep.size == 0:
            break
        state = child.take(keep)
        mats = cm[keep]
        mus.append(_mu_from_logs(state.logs))
        parents.append(par[keep])
        lasts.append(state.last.copy())
        count += keep.size
    return _assemble(gens, maxlen, "matrix", seed, mus, parents, lasts)


# ---------------------------------------------------------------------------
# flags of table rows


def _wedge_kernel(omega, d, k):
    """Subspace {v : v ^ omega = 0} of decomposable k-vectors, batched."""
    import itertools

    if k == 1:
        return omega[:, :, None] / np.linalg.norm(omega, axis=1)[:, None, None]
    ksets = list(itertools.combinations(range(d), k))
    k1sets = {s: j for j, s in enumerate(itertools.combinations(range(d), k + 1))}
    n = omega.shape[0]
    wedge = np.zeros((n, len(k1sets), d))
    for a in range(d):
        for j, s in enumerate(ksets):
            if a in s:
                continue
            merged = tuple(sorted((a, *s)))
            sign = (-1) ** sum(1 for x in s if x < a)
            wedge[:, k1sets[merged], a] += sign * omega[:, j]
    _, _, vt = np.linalg.svd(wedge)
    return np.swapaxes(vt[:, -k:, :], 1, 2)


def _nested_frames(subspaces, d):
    """Batched orthonormal frames adapted to increasing chains of subspaces."""
    n = subspaces[0].shape[0] if subspaces else 0
    cols = np.zeros((n, d, 0))
    for basis in subspaces:
        k = basis.shape[2] - cols.shape[2]
        if k <= 0:
            continue
        resid = basis - cols @ (np.swapaxes(cols, 1, 2) @ basis)
        u, _, _ = np.linalg.svd(resid, full_matrices=False)
        cols = np.concatenate([cols, u[:, :, :k]], axis=2)
    if cols.shape[2] < d:
        proj = np.eye(d)[None] - cols @ np.swapaxes(cols, 1, 2)
        u, _, _ = np.linalg.svd(proj)
        cols = np.concatenate([cols, u[:, :, : d - cols.shape[2]]], axis=2)
    q, r = np.linalg.qr(cols)
    s = np.sign(np.diagonal(r, axis1=1, axis2=2))
    s[s == 0] = 1.0
    return q * s[:, None, :]


def word_flags(gens, words, theta, gap_tol=1e-6, inverse=False):
    """Singular-value flags of many words, computed through compounds.

    ``words`` is an (n, L) array of letter codes padded with -1.  Returns
    ``(frames, ok)`` where ``ok`` marks rows whose singular gaps at theta
    exceed ``1 + gap_tol``.  With ``inverse=True`` the flags of the inverse
    words are returned.
    """
    words = np.asarray(words)
    if inverse:
        words = _invert_words(words)
    d = gens.d
    n = words.shape[0]
    subspaces = []
    ok = np.ones(n, dtype=bool)
    for k in theta:
        lc = np.stack([compound(g, k) for g in gens.letters])
        c = math.comb(d, k)
        acc = np.broadcast_to(np.eye(c), (n, c, c)).copy()
        for pos in range(words.shape[1]):
            col = words[:, pos]
            live = col >= 0
            if not live.any():
                continue
            acc[live] = np.matmul(acc[live], lc[col[live].astype(int)])
            acc[live] /= np.linalg.norm(acc[live], axis=(1, 2))[:, None, None]
        u, s, _ = np.linalg.svd(acc)
        if c > 1:
            ok &= s[:, 0] > (1 + gap_tol) * s[:, 1]
        subspaces.append(_wedge_kernel(u[:, :, 0], d, k))
    return _nested_frames(subspaces, d), ok


def _invert_words(words):
    out = np.full_like(words, -1)
    lens = (words >= 0).sum(axis=1)
    for i in range(words.shape[0]):
        w = words[i, : lens[i]]
        out[i, : lens[i]] = (w[::-1] ^ 1)
    return out


def require_shells(table, count):
    if len(table.shells()) < count:
        raise InsufficientData(f"table has {len(table.shells())} length shells, need {count}")
