import mpmath
import numpy as np
import pytest

from anosovlab.enumeration import BUDGET_ENV, OrbitTable, ball_size, enumerate_ball, word_flags
from anosovlab.errors import BudgetExceeded
from anosovlab.groups import GeneratorSet, rotation
from anosovlab.linalg import PartialFlag, cartan_projection, flag_distance, opposition_involution, sv_flag


@pytest.mark.parametrize("m,maxlen,rows", [(2, 2, 17), (2, 3, 53), (3, 2, 37), (1, 5, 11)])
def test_ball_size_formula(m, maxlen, rows):
    assert ball_size(m, maxlen) == rows


def test_small_ball_counts(schottky):
    assert len(enumerate_ball(schottky, 2)) == 17
    assert len(enumerate_ball(schottky, 3)) == 53


def test_table_layout(sl2_table):
    t = sl2_table
    assert len(t) == ball_size(2, 8)
    assert t.length[0] == 0 and np.all(t.mu[0] == 0)
    assert np.all(np.diff(t.length) >= 0)
    # lexicographic order inside each shell
    for n in (2, 3):
        words = [tuple(w) for w in t.words(np.arange(t.shell(n).start, t.shell(n).stop))]
        assert words == sorted(words)
    # reduced words only
    w = t.words(np.arange(len(t)))
    assert not np.any((w[:, 1:] >= 0) & (w[:, 1:] == (w[:, :-1] ^ 1)))


def _mu_high_precision(gens, word):
    with mpmath.workdps(60):
        m = mpmath.eye(gens.d)
        for c in word:
            m = m * mpmath.matrix(gens.letters[c].tolist())
        logs = np.array([float(mpmath.log(x)) for x in mpmath.svd_r(m, compute_uv=False)])
    return np.sort(logs - logs.mean())[::-1]


def test_mu_matches_high_precision_products(sl3_gens, sl3_table):
    # plain float64 SVD loses ~1e-7 on the middle value, hence the 60-digit oracle
    rng = np.random.default_rng(7)
    for row in rng.choice(len(sl3_table), 40, replace=False):
        ref = _mu_high_precision(sl3_gens, sl3_table.word(row))
        np.testing.assert_allclose(sl3_table.mu[row], ref, atol=1e-10 * (1 + np.abs(ref).max()))


def test_mu_agrees_with_cartan_projection_on_short_words(schottky, sl2_table):
    for row in range(sl2_table.shell(3).stop):
        g = schottky.word_matrix(sl2_table.word(row))
        np.testing.assert_allclose(sl2_table.mu[row], cartan_projection(g), atol=1e-9)


def test_parent_is_prefix(sl3_table):
    for row in (5, 100, 5000, len(sl3_table) - 1):
        word = sl3_table.word(row)
        assert sl3_table.word(sl3_table.parent[row]) == word[:-1]


def test_inverse_rows(sl3_table):
    lookup = {tuple(sl3_table.word(i)): i for i in range(sl3_table.shell(4).stop)}
    for row in range(1, sl3_table.shell(4).stop, 7):
        inv = tuple(c ^ 1 for c in reversed(sl3_table.word(row)))
        mu = sl3_table.mu[row]
        np.testing.assert_allclose(sl3_table.mu[lookup[inv]], opposition_involution(mu), atol=1e-8 * (1 + np.linalg.norm(mu)))


def test_worker_count_does_not_change_table(sl3_gens):
    a = enumerate_ball(sl3_gens, 7, workers=1)
    b = enumerate_ball(sl3_gens, 7, workers=3)
    assert a.digest() == b.digest()


def test_budget(schottky, monkeypatch):
    with pytest.raises(BudgetExceeded) as info:
        enumerate_ball(schottky, 20, budget=10_000)
    assert info.value.required_bytes > info.value.budget_bytes == 10_000
    monkeypatch.setenv(BUDGET_ENV, "1000")
    with pytest.raises(BudgetExceeded):
        enumerate_ball(schottky, 6)


def test_matrix_dedup_merges_relations():
    # a rotation of order 4 together with a hyperbolic element
    r = rotation(np.pi / 2)
    h = np.diag([2.0, 0.5])
    gens = GeneratorSet((r, h), free=False)
    t = enumerate_ball(gens, 4, policy="matrix")
    assert len(t) < ball_size(2, 4)
    with pytest.raises(ValueError):
        enumerate_ball(gens, 2, policy="bogus")


def test_from_points():
    t = OrbitTable.from_points([[1.0, 0.0, -1.0], [2.0, -1.0, -1.0]], length=[1, 2])
    assert len(t) == 2 and t.d == 3 and t.maxlen == 2
    np.testing.assert_allclose(t.mu_theta((1,)), [[1, -0.5, -0.5], [2, -1, -1]])


def test_word_flags_match_sv_flags(sl3_gens, sl3_table):
    rows = np.arange(sl3_table.shell(5).start, sl3_table.shell(5).start + 20)
    frames, ok = word_flags(sl3_gens, sl3_table.words(rows), (1, 2))
    assert ok.all()
    for row, frame in zip(rows, frames):
        ref = sv_flag(sl3_gens.word_matrix(sl3_table.word(row)), (1, 2))
        assert flag_distance(PartialFlag((1, 2), frame), ref) < 1e-8
