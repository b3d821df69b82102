import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anosovlab.diagnostics import word_jordan
from anosovlab.enumeration import OrbitTable, enumerate_ball
from anosovlab.errors import DiagnosticsFailed, InsufficientRange, NotProper
from anosovlab.groups import GeneratorSet, preset_anosov_family, preset_schottky_sl2, preset_symmetric_power
from anosovlab.linalg import LinearForm, first_coordinate_form, in_chamber, sum_of_positive_roots_form
from anosovlab.series import (
    DichotomyConfig,
    DirectionSpec,
    RegimeFit,
    SeriesCurve,
    SubspaceSpec,
    abscissa,
    concavity_violation,
    consensus,
    dichotomy_experiment,
    direction_from_simplex,
    filter_directional,
    filter_subspace,
    growth_indicator,
    is_finite_filter,
    limit_cone,
    partial_sums,
    predicted_regime,
    principal_subspace,
    regime_fit,
    simplex_coordinates,
    tangent_form,
    vector_from_simplex,
)

THETA3 = (1, 2)


def ray_table(u, rate, tmax, d=None):
    """Rows t_k u with N(t) = floor(e^{rate t}); lengths are floor(t) + 1."""
    n = int(math.exp(rate * tmax))
    t = np.log(np.arange(1, n + 1)) / rate
    mu = t[:, None] * np.asarray(u)[None, :]
    return OrbitTable.from_points(mu, length=np.floor(t).astype(int) + 1)


def curve(T, S):
    T = np.asarray(T, dtype=float)
    return SeriesCurve(T, np.asarray(S, dtype=float), 1.0, math.inf, np.zeros(T.size, dtype=bool), T.size)


@pytest.fixture(scope="module")
def sl3_deep():
    gens = preset_anosov_family(3)
    return gens, enumerate_ball(gens, 10)


@pytest.fixture(scope="module")
def sl3_indicator_table(sl3_deep):
    # below maxlen 11 the concavity score is dominated by small-ball noise
    gens, _ = sl3_deep
    return enumerate_ball(gens, 12)


@pytest.fixture(scope="module")
def sl3_indicator(sl3_indicator_table):
    cone = limit_cone(sl3_indicator_table, THETA3)
    return cone, growth_indicator(sl3_indicator_table, THETA3, cone)


# --- specs and filters --------------------------------------------------------


def test_direction_spec_validation():
    u = DirectionSpec.from_vector([1.0, 0.0, -1.0], THETA3)
    assert np.linalg.norm(u.u) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        DirectionSpec(np.array([-1.0, 0.0, 1.0]) / math.sqrt(2), THETA3)  # outside the chamber
    with pytest.raises(ValueError):
        DirectionSpec(np.array([1.0, 0.0, -1.0]), THETA3)  # not unit


def test_directional_filter_hand_example():
    table = OrbitTable.from_points([[1.0, 0.0, -1.0], [2.0, -1.0, -1.0]])
    u = DirectionSpec.from_vector([1.0, 0.0, -1.0], THETA3)
    np.testing.assert_array_equal(filter_directional(table, u, 0.5), [True, False])
    resid = SubspaceSpec.line(u).distance(table.mu_theta(THETA3))
    assert resid[1] == pytest.approx(math.sqrt(1.5))
    assert filter_directional(table, u, 1e9).all()


def test_filter_on_ray_table_keeps_everything():
    u = DirectionSpec.from_vector([2.0, 0.5, -2.5], THETA3)
    table = ray_table(u.u, 1.0, 6.0)
    assert filter_directional(table, u, 1e-6).all()


def test_full_subspace_keeps_everything(sl3_table):
    W = SubspaceSpec.full(3, THETA3)
    assert W.codim == 0
    assert filter_subspace(sl3_table, W, 1e-9).all()


@settings(max_examples=30, deadline=None)
@given(st.floats(0.05, 5.0), st.floats(0.1, 3.0), st.floats(0.0, 2.0))
def test_line_filter_is_directional_filter(r, a, b):
    rng = np.random.default_rng(int(1000 * r))
    pts = np.sort(rng.standard_normal((200, 3)), axis=1)[:, ::-1]
    table = OrbitTable.from_points(pts - pts.mean(axis=1, keepdims=True))
    u = DirectionSpec.from_vector([a + b, b, 0.0], THETA3)
    np.testing.assert_array_equal(filter_subspace(table, SubspaceSpec.line(u), r), filter_directional(table, u, r))


def test_kernel_subspace_filter_is_finite():
    psi = sum_of_positive_roots_form(3, THETA3)
    u = DirectionSpec.from_vector([1.0, 0.2, -1.2], THETA3)
    table = ray_table(u.u, 1.0, 8.0)
    kernel = SubspaceSpec.span([[1.0, -2.0, 1.0]], THETA3)  # psi = rho vanishes on it
    assert is_finite_filter(kernel, psi)
    assert not is_finite_filter(SubspaceSpec.line(u), psi)
    kept = filter_subspace(table, kernel, 0.5)
    assert 0 < kept.sum() < 10
    assert np.all(table.length[kept] <= 2)


def test_subspace_spec_geometry():
    W = SubspaceSpec.span([[1.0, 0.0, -1.0]], THETA3)
    assert W.dim == 1 and W.codim == 1
    comp = W.complement()
    assert comp.shape == (1, 3)
    assert abs(comp[0] @ W.basis[0]) < 1e-12
    assert W.contains(np.array([2.0, 0.0, -2.0]))
    with pytest.raises(ValueError):
        SubspaceSpec(np.array([[1.0, 1.0, -2.0]]), THETA3)  # not unit


# --- partial sums ---------------------------------------------------------------


def test_single_row_partial_sums():
    table = OrbitTable.from_points([[1.0, -1.0]], length=[1])
    psi = first_coordinate_form(2)
    c = partial_sums(table, np.ones(1, dtype=bool), psi, 1.0, [0.5, 0.99, 1.0, 3.0])
    np.testing.assert_allclose(c.S, [0.0, 0.0, math.exp(-1), math.exp(-1)])


def test_geometric_table_grows_linearly():
    psi = first_coordinate_form(2)
    table = ray_table([1.0, -1.0], 1.0, 12.0)
    T = np.linspace(2, 8.5, 15)
    c = partial_sums(table, np.ones(len(table), dtype=bool), psi, 1.0, T)
    # sum_{k <= e^T} 1/k = T + Euler gamma + O(e^-T)
    np.testing.assert_allclose(c.S - T, np.euler_gamma, atol=0.15)
    assert np.all(np.diff(c.S) >= 0)
    assert not c.truncated.any()


def test_partial_sums_flag_truncation(sl2_table):
    psi = first_coordinate_form(2)
    c = partial_sums(sl2_table, np.ones(len(sl2_table), dtype=bool), psi, 1.0, [1.0, 100.0])
    assert c.truncated.tolist() == [False, True]


def test_not_proper():
    table = OrbitTable.from_points([[-3.0, 3.0], [1.0, -1.0]], length=[1, 1])
    with pytest.raises(NotProper):
        partial_sums(table, np.ones(2, dtype=bool), first_coordinate_form(2), 1.0, [1.0])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_resummation_is_order_independent(seed):
    rng = np.random.default_rng(seed)
    x = rng.exponential(3.0, size=3000)
    mu = np.column_stack([x, -x])
    perm = rng.permutation(x.size)
    psi = first_coordinate_form(2)
    T = np.linspace(0.5, 10, 9)
    a = partial_sums(OrbitTable.from_points(mu), np.ones(x.size, dtype=bool), psi, 1.0, T).S
    b = partial_sums(OrbitTable.from_points(mu[perm]), np.ones(x.size, dtype=bool), psi, 1.0, T).S
    assert np.max(np.abs(a - b)) <= 1e-12


# --- regime fits --------------------------------------------------------------------


def test_regime_power():
    T = np.geomspace(1, 100, 24)
    fit = regime_fit(curve(T, 3 * T))
    assert fit.regime == "power"
    assert fit.exponent == pytest.approx(1.0, abs=0.01)


def test_regime_logarithmic():
    T = np.geomspace(1, 1000, 24)
    assert regime_fit(curve(T, 2 + np.log(T))).regime == "logarithmic"


def test_regime_bounded():
    T = np.geomspace(1, 1000, 24)
    fit = regime_fit(curve(T, 5 - 1 / T))
    assert fit.regime == "bounded" and fit.tail < 0.05


def test_regime_exponential():
    T = np.linspace(1, 20, 24)
    assert regime_fit(curve(T, np.exp(0.5 * T))).regime == "divergent-linear"


def test_regime_needs_points():
    T = np.geomspace(1, 10, 8)
    with pytest.raises(InsufficientRange):
        regime_fit(curve(T, T))


# --- abscissa --------------------------------------------------------------------------


def test_abscissa_of_constructed_counts():
    table = ray_table([1.0, -1.0], 0.7, 14.0)
    psi = first_coordinate_form(2)
    fit = abscissa(table, np.ones(len(table), dtype=bool), psi)
    assert fit.s == pytest.approx(0.7, abs=0.02)


@pytest.mark.parametrize("c", [0.5, 2.0])
def test_abscissa_homogeneity(sl2_table, c):
    psi = first_coordinate_form(2)
    mask = np.ones(len(sl2_table), dtype=bool)
    base = abscissa(sl2_table, mask, psi)
    other = abscissa(sl2_table, mask, psi.scaled(c))
    assert abs(other.s - base.s / c) <= 3 * (other.stderr + base.stderr / c) + 1e-12


def test_abscissa_needs_shells():
    table = OrbitTable.from_points([[1.0, -1.0], [2.0, -2.0]], length=[1, 2])
    with pytest.raises(InsufficientRange):
        abscissa(table, np.ones(2, dtype=bool), first_coordinate_form(2))


def test_abscissa_matches_length_spectrum():
    # independent oracle: growth of the Jordan (translation-length) spectrum
    # over cyclically reduced words
    gens = preset_schottky_sl2(3.0, 2)
    table = enumerate_ball(gens, 10)
    psi = first_coordinate_form(2)
    fit = abscissa(table, np.ones(len(table), dtype=bool), psi)
    rows = np.arange(1, len(table))
    words = table.words(rows)
    lens = table.length[rows].astype(int)
    cyclic = words[:, 0] != (words[np.arange(rows.size), lens - 1] ^ 1)
    lam = word_jordan(gens, words[cyclic]) @ psi.dual
    top = 0.8 * lam[lens[cyclic] == table.maxlen].min()
    t = np.linspace(top / 2, top, 32)
    counts = np.searchsorted(np.sort(lam), t, side="right")
    slope = np.polyfit(t, np.log(counts), 1)[0]
    assert abs(fit.s - slope) <= 0.05


# --- cones --------------------------------------------------------------------------


def test_simplex_chart_round_trip():
    s = np.array([[0.25, 0.75], [1.0, 0.0]])
    v = vector_from_simplex(s, THETA3, 3)
    np.testing.assert_allclose(simplex_coordinates(v, THETA3), s)
    d = direction_from_simplex(s, THETA3, 3)
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0)


def test_cone_of_ray_table_has_no_interior():
    u = DirectionSpec.from_vector([1.0, 0.3, -1.3], THETA3)
    cone = limit_cone(ray_table(u.u, 1.0, 7.0), THETA3)
    assert not cone.interior and cone.inradius == 0.0
    assert cone.vertices.shape[0] == 1


def test_cone_of_perturbed_group(sl3_deep):
    _, table = sl3_deep
    cone = limit_cone(table, THETA3)
    assert cone.interior and cone.inradius > 1e-3
    for v in cone.vertex_directions:
        assert in_chamber(v, tol=1e-12)
    assert cone.contains(cone.centroid[None, :])[0]


def test_cone_of_unperturbed_symmetric_square():
    gens = preset_symmetric_power(preset_schottky_sl2(3.0, 2), 3)
    cone = limit_cone(enumerate_ball(gens, 8), THETA3)
    assert not cone.interior


# --- growth indicator ---------------------------------------------------------------------


def test_indicator_of_ray_table():
    # a fat symmetric cloud only provides the cone; every row of the table is on the ray
    centre = np.array([0.5, 0.5])
    u = direction_from_simplex(centre, THETA3, 3)
    spread = np.array([[0.2, 0.8], [0.8, 0.2], [0.5, 0.5]])
    cloud = OrbitTable.from_points(vector_from_simplex(spread, THETA3, 3))
    cone = limit_cone(cloud, THETA3)
    table = ray_table(u, 0.8, 14.0)
    ind = growth_indicator(table, THETA3, cone)
    at_u = int(np.argmax(ind.directions @ u))
    assert ind.directions[at_u] @ u == pytest.approx(1.0)
    assert ind.values[at_u] == pytest.approx(0.8, abs=0.02)
    far = np.arccos(np.clip(ind.directions @ u, -1, 1)) > 0.3 * cone.angular_diameter + 1e-9
    assert far.any() and np.all(np.isneginf(ind.values[far]))


def test_indicator_below_unrestricted_rate(sl3_indicator_table, sl3_indicator):
    table = sl3_indicator_table
    _, ind = sl3_indicator
    norms = np.sort(np.linalg.norm(table.mu_theta(THETA3), axis=1))
    total = np.searchsorted(norms, ind.t, side="right")
    rate, _ = np.polyfit(ind.t, np.log(total), 1)
    fin = ind.finite
    assert np.all(ind.values[fin] <= rate + 3 * ind.stderr[fin] + 0.02)


def test_indicator_concavity_and_positivity(sl3_indicator):
    _, ind = sl3_indicator
    assert ind.concavity_violation <= 0.1
    positive, cells = ind.positivity()
    assert positive and cells > 0


def test_concavity_score_sees_a_dip(sl3_indicator):
    _, ind = sl3_indicator
    rel = np.flatnonzero(ind.reliable)
    centre = rel[np.argmin(np.linalg.norm(ind.simplex[rel] - ind.simplex[rel].mean(axis=0), axis=1))]
    values = ind.values.copy()
    values[centre] *= 0.5
    assert concavity_violation(replace(ind, values=values)) > 0.1


# --- tangent forms --------------------------------------------------------------------------


def test_tangent_recovers_a_linear_indicator(sl3_indicator):
    _, ind = sl3_indicator
    psi = LinearForm((1, 2), np.array([0.9, 0.1, -1.0]))
    flat = replace(ind, values=ind.directions @ psi.dual)
    u = DirectionSpec.from_vector(ind.directions[np.flatnonzero(ind.reliable)[0]], THETA3)
    fit = tangent_form(flat, u)
    np.testing.assert_allclose(fit.form.dual, psi.dual, atol=1e-6)
    assert fit.form(u.u) == pytest.approx(fit.value, abs=1e-9)


def test_tangent_touches_a_strictly_concave_indicator_only_at_u(sl3_indicator):
    _, ind = sl3_indicator
    rel = np.flatnonzero(ind.reliable)
    u = ind.directions[rel[len(rel) // 2]]
    cap = 1.0 - 5.0 * np.linalg.norm(ind.directions - u, axis=1) ** 2
    fit = tangent_form(replace(ind, values=cap), DirectionSpec.from_vector(u, THETA3))
    assert fit.form(u) == pytest.approx(1.0, abs=1e-9)
    others = ~np.isclose(ind.directions[ind.reliable] @ u, 1.0)
    assert np.all(fit.slack[others] > 0)


# --- dichotomy ------------------------------------------------------------------------------


def test_predictions():
    assert predicted_regime(0) == ("power", 1.0)
    assert predicted_regime(1) == ("power", 0.5)
    assert predicted_regime(2)[0] == "logarithmic"
    assert predicted_regime(5)[0] == "bounded"


def test_consensus_vote():
    def fit(regime, a):
        return RegimeFit(regime, a, 0.01, (1, 2), {}, 0.5, 20)

    c = consensus([fit("power", 0.5), fit("logarithmic", 2.0), fit("power", 0.7), fit("power", 0.6)])
    assert c.regime == "power" and c.exponent == pytest.approx(0.6)
    assert c.votes == {"power": 3, "logarithmic": 1}
    tie = consensus([fit("power", 0.5), fit("bounded", 0.0)])
    assert tie.regime == "bounded"  # the middle radius decides ties
    assert consensus([]) is None


def test_principal_subspace(sl3_deep):
    _, table = sl3_deep
    u = DirectionSpec.from_vector([1.0, 0.0, -1.0], THETA3)
    W = principal_subspace(table, THETA3, u, 2)
    assert W.dim == 2 and W.codim == 0
    np.testing.assert_allclose(W.basis[0], u.u, atol=1e-12)


def test_dichotomy_refuses_without_anosov():
    h = np.diag([math.e, 1 / math.e])
    gens = GeneratorSet((h, h @ h))
    table = enumerate_ball(gens, 6)
    with pytest.raises(DiagnosticsFailed) as info:
        dichotomy_experiment(table, (1,), config=DichotomyConfig(), gens=gens)
    assert info.value.report["passed"] is False
    with pytest.raises(ValueError):
        dichotomy_experiment(table, (1,))


def test_dichotomy_on_small_sl2_ball():
    gens = preset_schottky_sl2(3.0, 2)
    table = enumerate_ball(gens, 10)
    rep = dichotomy_experiment(table, (1,), gens=gens)
    assert rep.codim == 0
    assert rep.verdict == "DIVERGENT"
    assert rep.consensus.regime == "power"
    data = rep.to_dict()
    assert data["verdict"] == "DIVERGENT" and len(data["runs"]) == 5
