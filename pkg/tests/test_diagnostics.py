import numpy as np
import pytest

from anosovlab.diagnostics import (
    anosov_diagnostic,
    antipodality_check,
    jordan_span_check,
    regularity_diagnostic,
    word_jordan,
)
from anosovlab.enumeration import OrbitTable, enumerate_ball
from anosovlab.errors import InsufficientData
from anosovlab.groups import GeneratorSet, preset_symmetric_power, rotation
from anosovlab.linalg import jordan_projection


@pytest.fixture(scope="module")
def elliptic_table():
    gens = GeneratorSet((rotation(1.0),), free=False)
    return gens, enumerate_ball(gens, 6, policy="matrix")


def test_schottky_is_anosov(sl2_table):
    rep = anosov_diagnostic(sl2_table, (1,))
    assert rep["verdict"] == "anosov-consistent"
    assert rep["C"] >= 1.0
    assert regularity_diagnostic(sl2_table, (1,))["verdict"] == "theta-regular-consistent"


def test_schottky_antipodality(schottky, sl2_table):
    rep = antipodality_check(schottky, sl2_table, (1,), nsamples=200, seed=0)
    assert rep["verdict"] == "antipodal-consistent"
    assert rep["min_margin"] > 0.01


def test_elliptic_generator_fails(elliptic_table):
    _, table = elliptic_table
    rep = anosov_diagnostic(table, (1,))
    assert rep["verdict"] == "not-anosov-consistent"
    assert abs(rep["C"]) < 1e-6
    assert regularity_diagnostic(table, (1,))["verdict"] == "not-theta-regular"


def test_identity_table_is_insufficient():
    table = OrbitTable.from_points([[0.0, 0.0]])
    with pytest.raises(InsufficientData):
        anosov_diagnostic(table, (1,))
    with pytest.raises(InsufficientData):
        regularity_diagnostic(table, (1,))


def test_same_axis_pair_is_not_antipodal():
    h = np.diag([np.e, 1 / np.e])
    gens = GeneratorSet((h, h @ h))
    table = enumerate_ball(gens, 5)
    rep = antipodality_check(gens, table, (1,), nsamples=100)
    assert rep["verdict"] in ("not-antipodal", "untested")
    if rep["min_margin"] is not None:
        assert rep["min_margin"] < 1e-4


def test_no_samples_is_untested(schottky, sl2_table):
    rep = antipodality_check(schottky, sl2_table, (1,), nsamples=0)
    assert rep["verdict"] == "untested" and rep["pairs"] == 0


def test_word_jordan_matches_direct(sl3_gens, sl3_table):
    rows = np.arange(1, sl3_table.shell(3).stop)
    lam = word_jordan(sl3_gens, sl3_table.words(rows))
    for row, got in zip(rows, lam):
        np.testing.assert_allclose(got, jordan_projection(sl3_gens.word_matrix(sl3_table.word(row))), atol=1e-9)


def test_jordan_span_of_perturbed_group(sl3_gens, sl3_table):
    rep = jordan_span_check(sl3_gens, sl3_table, (1, 2))
    assert rep["rank"] == 2 and rep["spans"]
    assert rep["fill_ks"] is not None


def test_jordan_span_of_symmetric_square(schottky):
    gens = preset_symmetric_power(schottky, 3)
    table = enumerate_ball(gens, 6)
    rep = jordan_span_check(gens, table, (1, 2))
    assert rep["rank"] == 1 and rep["fill_ks"] is None


def test_jordan_span_single_generator():
    # the ball also holds g^-1, whose Jordan vector is i(lambda(g)); with an
    # i-symmetric lambda both lie on one line
    gens = GeneratorSet((np.diag(np.exp([1.0, 0.0, -1.0])),))
    table = enumerate_ball(gens, 6)
    assert jordan_span_check(gens, table, (1, 2))["rank"] == 1
    skew = GeneratorSet((np.diag(np.exp([1.0, 0.2, -1.2])),))
    rep = jordan_span_check(skew, enumerate_ball(skew, 6), (1, 2))
    assert rep["rank"] == 2 and rep["fill_ks"] is None
