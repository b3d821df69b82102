import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anosovlab.errors import GapTooSmall, NonFinite, NotTransverse, RankDeficient, TypeMismatch
from anosovlab.linalg import (
    LinearForm,
    PartialFlag,
    a_theta_basis,
    busemann,
    cartan_projection,
    compound,
    connecting_element,
    distance,
    eigen_flag,
    first_coordinate_form,
    flag_distance,
    flag_from_matrix,
    full_theta,
    gromov_product,
    hopf_coordinates,
    in_chamber,
    in_general_position,
    iwasawa_sigma,
    jordan_projection,
    make_theta,
    opposite_flag,
    opposite_theta,
    opposition_involution,
    p_theta,
    positive_qr,
    shadow_distance,
    standard_flag,
    sum_of_positive_roots_form,
    sv_flag,
    svd_fixed,
)

from conftest import random_orthogonal, random_sl

seeds = st.integers(min_value=0, max_value=2**31 - 1)
dims = st.integers(min_value=2, max_value=5)


def _theta_for(d, rng):
    k = rng.integers(1, d)
    return make_theta(rng.choice(np.arange(1, d), size=k, replace=False), d)


def test_make_theta_normalizes():
    assert make_theta([3, 1, 1], 4) == (1, 3)
    assert opposite_theta((1,), 4) == (3,)
    with pytest.raises(ValueError):
        make_theta([0], 3)
    with pytest.raises(ValueError):
        make_theta([], 3)


def test_cartan_of_diagonal():
    v = np.array([1.5, 0.2, -1.7])
    mu = cartan_projection(np.diag(np.exp(v[[2, 0, 1]])))
    np.testing.assert_allclose(mu, v, atol=1e-12)


def test_cartan_guard_and_nonfinite():
    with pytest.raises(RankDeficient):
        cartan_projection(np.diag([1e7, 1e-7]))
    with pytest.raises(NonFinite):
        cartan_projection(np.array([[np.nan, 0], [0, 1.0]]))


@settings(max_examples=60, deadline=None)
@given(seeds, dims)
def test_cartan_invariants(seed, d):
    rng = np.random.default_rng(seed)
    g = random_sl(d, rng)
    h = random_sl(d, rng)
    mu = cartan_projection(g)
    assert abs(mu.sum()) < 1e-9
    assert in_chamber(mu)
    scale = 1 + np.linalg.norm(mu)
    np.testing.assert_allclose(cartan_projection(np.linalg.inv(g)), opposition_involution(mu), atol=1e-8 * scale)
    k, l = random_orthogonal(d, rng), random_orthogonal(d, rng)
    np.testing.assert_allclose(cartan_projection(k @ g @ l), mu, atol=1e-8 * scale)
    assert np.linalg.norm(cartan_projection(g @ h) - mu) <= np.linalg.norm(cartan_projection(h)) + 1e-7


def test_svd_sign_convention(rng):
    u, s, vt = svd_fixed(random_sl(4, rng))
    for j in range(4):
        nz = np.flatnonzero(np.abs(u[:, j]) > 1e-14)
        assert u[nz[0], j] > 0
    assert np.all(np.diff(s) <= 0)


@settings(max_examples=40, deadline=None)
@given(seeds, dims)
def test_p_theta_projection(seed, d):
    rng = np.random.default_rng(seed)
    theta = _theta_for(d, rng)
    v = rng.standard_normal(d)
    v -= v.mean()
    w = rng.standard_normal(d)
    w -= w.mean()
    pv = p_theta(v, theta)
    assert np.max(np.abs(p_theta(pv, theta) - pv)) <= 1e-12
    np.testing.assert_allclose(p_theta(2 * v - w, theta), 2 * pv - p_theta(w, theta), atol=1e-12)
    assert np.linalg.norm(pv) <= np.linalg.norm(v) + 1e-12
    basis = a_theta_basis(d, theta)
    np.testing.assert_allclose(basis.T @ basis, np.eye(len(theta)), atol=1e-12)
    np.testing.assert_allclose(basis @ (basis.T @ v), pv, atol=1e-12)


def test_p_theta_block_average():
    # theta = {2} in SL_4: blocks {0,1} and {2,3}
    np.testing.assert_allclose(p_theta([3.0, 1.0, -1.0, -3.0], (2,)), [2, 2, -2, -2])


def test_linear_form_rules():
    with pytest.raises(ValueError):
        LinearForm((1,), np.array([1.0, -0.5, -0.5, 0.0]))  # not constant on the block {1,2,3}
    f = first_coordinate_form(3)
    assert f(np.array([1.0, 0.0, -1.0])) == pytest.approx(2 / 3 + 1 / 3)
    rho = sum_of_positive_roots_form(3, full_theta(3))
    assert rho.norm == pytest.approx(1.0)
    assert rho(np.array([1.0, 0, -1.0])) == pytest.approx(2 / math.sqrt(2))
    opp = rho.compose_opposition()
    np.testing.assert_allclose(opp.dual, rho.dual)


def test_compound_is_multiplicative(rng):
    g, h = random_sl(4, rng), random_sl(4, rng)
    for k in (1, 2, 3):
        np.testing.assert_allclose(compound(g @ h, k), compound(g, k) @ compound(h, k), rtol=1e-9, atol=1e-9)
    assert compound(g, 4)[0, 0] == pytest.approx(1.0)


def test_jordan_matches_eigenvalues(rng):
    for _ in range(20):
        d = int(rng.integers(2, 6))
        g = random_sl(d, rng, log_cond=1.5)
        oracle = np.sort(np.log(np.abs(np.linalg.eigvals(g))))[::-1]
        np.testing.assert_allclose(jordan_projection(g), oracle, atol=1e-8)


def test_jordan_survives_tiny_eigenvalues():
    # eig moduli e^{30}, 1, e^{-30}; plain eigvals loses the smallest
    g = np.diag(np.exp([30.0, 0.0, -30.0]))
    g[0, 2] = 5.0
    np.testing.assert_allclose(jordan_projection(g), [30.0, 0.0, -30.0], atol=1e-9)


def test_positive_qr(rng):
    m = rng.standard_normal((4, 4))
    q, r = positive_qr(m)
    assert np.all(np.diag(r) > 0)
    np.testing.assert_allclose(q @ r, m, atol=1e-12)


def test_iwasawa_of_upper_triangular():
    b = np.array([[2.0, 1.0, 3.0], [0.0, 1.0, -1.0], [0.0, 0.0, 0.5]])
    np.testing.assert_allclose(iwasawa_sigma(b, np.eye(3)), np.log([2.0, 1.0, 0.5]), atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(seeds, dims)
def test_busemann_cocycle_and_invariance(seed, d):
    rng = np.random.default_rng(seed)
    theta = _theta_for(d, rng)
    xi = flag_from_matrix(random_sl(d, rng), theta)
    g, h, k = (random_sl(d, rng) for _ in range(3))
    np.testing.assert_allclose(busemann(xi, g, h) + busemann(xi, h, k), busemann(xi, g, k), atol=1e-7)
    w = random_orthogonal(d, rng)
    np.testing.assert_allclose(busemann(xi.translate(w), w @ g, w @ h), busemann(xi, g, h), atol=1e-7)


def test_busemann_along_the_ray():
    # beta_{e+}(e, a) = mu(a) for a in A+
    v = np.array([1.0, 0.25, -1.25])
    a = np.diag(np.exp(v))
    np.testing.assert_allclose(busemann(standard_flag(3, (1, 2)), np.eye(3), a), v, atol=1e-12)


def test_gromov_product_of_standard_pair():
    for d in (2, 3, 4):
        theta = full_theta(d)
        g = gromov_product(standard_flag(d, theta), opposite_flag(d, theta))
        np.testing.assert_allclose(g, 0.0, atol=1e-10)


def test_gromov_product_symmetry(rng):
    d, theta = 4, (1, 3)
    for _ in range(10):
        xi = flag_from_matrix(random_sl(d, rng), theta)
        eta = flag_from_matrix(random_sl(d, rng), opposite_theta(theta, d))
        np.testing.assert_allclose(
            gromov_product(eta, xi), opposition_involution(gromov_product(xi, eta)), atol=1e-7
        )


def test_general_position_and_connecting_element(rng):
    d, theta = 3, (1, 2)
    e_plus, e_minus = standard_flag(d, theta), opposite_flag(d, theta)
    ok, margin = in_general_position(e_plus, e_minus)
    assert ok and margin == pytest.approx(1.0)
    with pytest.raises(NotTransverse):
        # same frame, opposite type: the members meet
        connecting_element(e_plus, PartialFlag(opposite_theta(theta, d), np.eye(d)))
    xi = flag_from_matrix(random_sl(d, rng), theta)
    eta = flag_from_matrix(random_sl(d, rng), theta)
    g = connecting_element(xi, eta)
    assert np.linalg.det(g) == pytest.approx(1.0)
    assert flag_distance(e_plus.translate(g), xi) < 1e-8
    assert flag_distance(e_minus.translate(g), eta) < 1e-8


def test_general_position_margin_is_frame_independent(rng):
    d, theta = 4, (2,)
    xi = flag_from_matrix(random_sl(d, rng), theta)
    eta = flag_from_matrix(random_sl(d, rng), theta)
    _, m0 = in_general_position(xi, eta)
    # rotate inside the 2-dimensional member: a different frame of the same flag
    c, s = math.cos(0.7), math.sin(0.7)
    rot = np.eye(d)
    rot[:2, :2] = [[c, -s], [s, c]]
    xi2 = PartialFlag(theta, xi.frame @ rot)
    _, m1 = in_general_position(xi2, eta)
    assert abs(m0 - m1) <= 1e-8


def test_type_mismatch():
    with pytest.raises(TypeMismatch):
        flag_distance(standard_flag(3, (1,)), standard_flag(3, (2,)))
    with pytest.raises(TypeMismatch):
        in_general_position(standard_flag(3, (1,)), standard_flag(3, (1,)))


def test_flags_of_diagonal_element():
    g = np.diag(np.exp([2.0, 0.5, -2.5]))
    assert flag_distance(sv_flag(g, (1, 2)), standard_flag(3, (1, 2))) < 1e-12
    assert flag_distance(eigen_flag(g, (1, 2)), standard_flag(3, (1, 2))) < 1e-12
    with pytest.raises(GapTooSmall):
        sv_flag(np.eye(3), (1,))


def test_hopf_coordinates_of_diagonal():
    v = np.array([1.0, 0.0, -1.0])
    hp = hopf_coordinates(np.diag(np.exp(v)), (1, 2))
    np.testing.assert_allclose(hp.b, v, atol=1e-12)


def _hyperbolic_distance(g, h):
    # upper half plane, curvature -1
    def act(m):
        a, b, c, d = m.ravel()
        return (a * 1j + b) / (c * 1j + d)

    z, w = act(g), act(h)
    return math.acosh(1 + abs(z - w) ** 2 / (2 * z.imag * w.imag))


def test_distance_in_sl2_is_scaled_hyperbolic(rng):
    for _ in range(10):
        g, h = random_sl(2, rng), random_sl(2, rng)
        assert distance(g, h) == pytest.approx(_hyperbolic_distance(g, h) / math.sqrt(2), rel=1e-9)


def test_shadow_distance_on_the_ray():
    t = 2.0
    p = np.diag([math.exp(t), math.exp(-t)])
    assert shadow_distance(standard_flag(2, (1,)), np.eye(2), p) < 1e-6


def test_shadow_distance_opposite_endpoint():
    # the ray to e- leaves o in the opposite direction, so o is the closest point
    t = 3.0
    p = np.diag([math.exp(t), math.exp(-t)])
    xi = opposite_flag(2, (1,))
    assert shadow_distance(xi, np.eye(2), p) == pytest.approx(math.sqrt(2) * t, rel=1e-4)


def test_shadow_distance_identity_center(rng):
    xi = flag_from_matrix(random_sl(3, rng), (1, 2))
    assert shadow_distance(xi, np.eye(3), np.eye(3)) < 1e-6
