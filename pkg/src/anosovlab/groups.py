"""Finitely generated matrix groups: generator sets and preset families."""

import hashlib
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .linalg import DET_TOL, check_matrix


class PingPongUnverified(UserWarning):
    """The Schottky spacing is too small for the ping-pong criterion."""


@dataclass(frozen=True)
class GeneratorSet:
    """Generators of a subgroup of SL_d(R) with cached inverses.

    Letters are coded ``0..2m-1``: code ``2j`` is generator ``j`` and code
    ``2j+1`` its inverse.  Code order is the lexicographic letter order.
    """

    gens: tuple = field(repr=False)
    labels: tuple = None
    free: bool = True
    name: str = "custom"

    def __post_init__(self):
        gens = tuple(check_matrix(g).copy() for g in self.gens)
        if not gens:
            raise ValueError("need at least one generator")
        d = gens[0].shape[0]
        for g in gens:
            if g.shape != (d, d):
                raise ValueError("generators must share a dimension")
            if abs(np.linalg.det(g) - 1.0) > DET_TOL * max(1.0, np.linalg.norm(g) ** d):
                raise ValueError("generators must be unimodular")
            g.setflags(write=False)
        labels = self.labels
        if labels is None:
            labels = tuple("abcdefghijklmnopqrstuvwxyz"[j] for j in range(len(gens)))
        object.__setattr__(self, "gens", gens)
        object.__setattr__(self, "labels", tuple(labels))
        letters = []
        for g in gens:
            letters.append(g)
            inv = np.linalg.inv(g)
            inv.setflags(write=False)
            letters.append(inv)
        object.__setattr__(self, "_letters", tuple(letters))
        if self.free:
            for a in range(len(letters)):
                for b in range(a + 1, len(letters)):
                    if b != (a ^ 1) and np.allclose(letters[a], letters[b], atol=1e-12):
                        raise ValueError("free generator set has coinciding letters")

    @property
    def d(self):
        return self.gens[0].shape[0]

    @property
    def m(self):
        return len(self.gens)

    @property
    def letters(self):
        return self._letters

    def letter_label(self, code):
        lab = self.labels[code // 2]
        return lab if code % 2 == 0 else lab.upper()

    def word_matrix(self, word):
        """Product of the letters of ``word`` (sequence of letter codes)."""
        g = np.eye(self.d)
        for c in word:
            g = g @ self._letters[int(c)]
        return g

    def digest(self):
        h = hashlib.sha256()
        h.update(f"{self.d}:{self.m}:{int(self.free)}:".encode())
        for g in self.gens:
            h.update(np.ascontiguousarray(np.round(g, 14)).tobytes())
        return h.hexdigest()


def signed_word(codes):
    """Letter codes -> signed generator indices (+j for g_j, -j for g_j^-1)."""
    return [(c // 2 + 1) * (1 if c % 2 == 0 else -1) for c in codes]


def codes_from_signed(word):
    return [2 * (abs(x) - 1) + (0 if x > 0 else 1) for x in word]


def rotation(phi):
    c, s = math.cos(phi), math.sin(phi)
    return np.array([[c, -s], [s, c]])


def schottky_pingpong_ok(spacing, m):
    """Ping-pong criterion for the evenly spaced configuration."""
    w = math.pi / (4 * m)
    return math.exp(spacing) >= 1.0 / math.tan(w) ** 2


def preset_schottky_sl2(spacing=3.0, m=2):
    """m hyperbolic elements of SL_2(R) with evenly interleaved fixed points.

    Generator j is ``R(j pi / 2m) diag(e^{s/2}, e^{-s/2}) R(-j pi / 2m)``, so
    its translation length is ``spacing`` and the 2m fixed lines are evenly
    spaced in RP^1.
    """
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    if not schottky_pingpong_ok(spacing, m):
        warnings.warn(
            f"spacing {spacing} is below the ping-pong threshold for m={m}",
            PingPongUnverified,
            stacklevel=2,
        )
    a = np.diag([math.exp(spacing / 2), math.exp(-spacing / 2)])
    gens = []
    for j in range(m):
        r = rotation(j * math.pi / (2 * m))
        gens.append(r @ a @ r.T)
    return GeneratorSet(tuple(gens), free=True, name=f"schottky(spacing={spacing},m={m})")


def symmetric_power_matrix(g, d):
    """Image of g in SL_2 under the (d-1)-st symmetric power, orthonormal weight basis."""
    g = np.asarray(g, dtype=float)
    n = d - 1
    a, b = g[0, 0], g[0, 1]
    c, e = g[1, 0], g[1, 1]
    # x -> a x + c y, y -> b x + e y
    px = np.array([a, c])
    py = np.array([b, e])
    out = np.zeros((d, d))
    for j in range(d):
        poly = np.array([1.0])
        for _ in range(n - j):
            poly = np.convolve(poly, px)
        for _ in range(j):
            poly = np.convolve(poly, py)
        out[:, j] = poly
    # monomial basis x^{n-i} y^i -> orthonormal basis sqrt(C(n,i)) x^{n-i} y^i
    scale = np.sqrt([math.comb(n, j) for j in range(d)])
    return (out / scale[:, None]) * scale[None, :]


def preset_symmetric_power(gens, d):
    if gens.d != 2:
        raise ValueError("symmetric powers need SL_2 generators")
    if d < 2:
        raise ValueError("d must be at least 2")
    new = tuple(symmetric_power_matrix(g, d) for g in gens.gens)
    return GeneratorSet(new, labels=gens.labels, free=gens.free, name=f"sym{d - 1}[{gens.name}]")


def preset_perturbed(gens, eps=0.05, seed=0):
    """Multiply each generator by exp(eps X), X a seeded traceless unit matrix."""
    if not 0 <= eps <= 0.1:
        raise ValueError("eps must lie in [0, 0.1]")
    if eps == 0:
        return GeneratorSet(gens.gens, labels=gens.labels, free=gens.free, name=gens.name)
    rng = np.random.default_rng(seed)
    d = gens.d
    new = []
    for g in gens.gens:
        x = rng.standard_normal((d, d))
        x -= np.trace(x) / d * np.eye(d)
        x /= np.linalg.norm(x)
        h = g @ scipy.linalg.expm(eps * x)
        det = np.linalg.det(h)
        new.append(h / det ** (1.0 / d))
    return GeneratorSet(
        tuple(new), labels=gens.labels, free=gens.free, name=f"perturbed({eps},{seed})[{gens.name}]"
    )


def preset_anosov_family(d, spacing=3.0, m=2, eps=0.05, seed=0):
    """Perturbed Sym^{d-1} image of the SL_2 Schottky preset (plain Schottky for d = 2)."""
    base = preset_schottky_sl2(spacing, m)
    if d == 2:
        return base
    return preset_perturbed(preset_symmetric_power(base, d), eps, seed)
