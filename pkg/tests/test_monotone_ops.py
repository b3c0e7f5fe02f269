from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import TRIANGLE, builtin_operators

from slowfast.errors import InputError
from slowfast.monotone_ops import (
    Ball,
    Box,
    CustomResolventOperator,
    HalfSpace,
    IndicatorOperator,
    InteriorBallCertificate,
    Polytope,
    SubgradientOperator,
    ZeroOperator,
    builtin_subgradient,
    certify_interior_ball,
    convex_set_from_dict,
    interior_gap_check,
    operator_from_dict,
    project,
    resolvent,
    yosida,
)

def grid_projection(x, lo=-2.0, hi=2.0, n=2001):
    """Brute-force closest grid point of the triangle x>=0, y>=0, x+y<=1."""
    g = np.linspace(lo, hi, n)
    X, Y = np.meshgrid(g, g)
    inside = (X >= 0) & (Y >= 0) & (X + Y <= 1)
    d = (X - x[0]) ** 2 + (Y - x[1]) ** 2
    d[~inside] = np.inf
    i = np.unravel_index(np.argmin(d), d.shape)
    return np.array([X[i], Y[i]])


def grid_prox(psi, lam, x, lo=-10.0, hi=10.0, n=2_000_001):
    u = np.linspace(lo, hi, n)
    return u[np.argmin(lam * psi(u) + 0.5 * (u - x) ** 2)]


# -- examples ---------------------------------------------------------------

def test_project_examples():
    np.testing.assert_array_equal(project(Ball([0.0, 0.0], 1.0), [2.0, 0.0]), [1.0, 0.0])
    np.testing.assert_array_equal(project(Box([0, 0], [1, 1]), [0.3, 0.7]), [0.3, 0.7])
    # frozen from grid_projection([1, 1]) == (0.5, 0.5)
    np.testing.assert_allclose(project(TRIANGLE, [1.0, 1.0]), [0.5, 0.5], atol=1e-12)


def test_triangle_projection_matches_grid_oracle():
    rng = np.random.default_rng(3)
    for x in rng.uniform(-1.5, 1.5, size=(12, 2)):
        np.testing.assert_allclose(project(TRIANGLE, x), grid_projection(x), atol=2.5e-3)


def test_resolvent_examples():
    j, k = resolvent(ZeroOperator(2), 0.5, [3.0, -1.0])
    np.testing.assert_array_equal(j, [3.0, -1.0])
    np.testing.assert_array_equal(k, [0.0, 0.0])
    j, k = resolvent(IndicatorOperator(HalfSpace([-1.0], 0.0)), 0.1, [-2.0])
    assert j[0] == 0.0 and k[0] == -2.0
    # frozen from grid_prox(abs, 1, 3) == 2
    j, k = resolvent(builtin_subgradient("abs", 1), 1.0, [3.0])
    assert j[0] == pytest.approx(2.0, abs=1e-9)
    assert k[0] == pytest.approx(1.0, abs=1e-9)


def test_grid_prox_oracle_values():
    assert grid_prox(np.abs, 1.0, 3.0) == pytest.approx(2.0, abs=1e-5)
    assert 4.0 - grid_prox(lambda u: 0.5 * u * u, 1.0, 4.0) == pytest.approx(2.0, abs=1e-5)


def test_yosida_examples():
    np.testing.assert_array_equal(yosida(ZeroOperator(3), 0.7, [1.0, 2.0, 3.0]), 0.0)
    assert yosida(IndicatorOperator(HalfSpace([-1.0], 0.0)), 0.5, [-1.0])[0] == -2.0
    assert yosida(builtin_subgradient("half_square", 1), 1.0, [4.0])[0] == pytest.approx(2.0, abs=1e-9)


def test_bisection_prox_matches_closed_form():
    rng = np.random.default_rng(0)
    x = rng.normal(scale=3, size=(200, 3))
    for name in ("abs", "half_square"):
        num = builtin_subgradient(name, 3, weight=0.7)
        exact = builtin_subgradient(name, 3, weight=0.7, closed_form=True)
        for lam in (0.1, 1.0, 4.0):
            np.testing.assert_allclose(resolvent(num, lam, x)[0], resolvent(exact, lam, x)[0],
                                       atol=1e-9)


def test_dimension_mismatch_is_input_error():
    with pytest.raises(InputError):
        project(Box([0, 0], [1, 1]), [1.0, 2.0, 3.0])
    with pytest.raises(InputError):
        resolvent(ZeroOperator(2), 1.0, [1.0])
    with pytest.raises(InputError):
        resolvent(ZeroOperator(1), 0.0, [1.0])


def test_set_validation():
    with pytest.raises(InputError):
        Ball([0.0], -1.0)
    with pytest.raises(InputError):
        Box([1.0], [0.0])
    with pytest.raises(InputError):
        Polytope([[1.0]], [0.0], [1.0])


def test_config_round_trip():
    for cset in (HalfSpace([1.0, 1.0], 2.0), Box([0, -1], [1, 1]), Ball([1, 2], 3.0), TRIANGLE):
        back = convex_set_from_dict(cset.to_dict())
        x = np.random.default_rng(1).normal(scale=3, size=(50, 2))
        np.testing.assert_array_equal(project(back, x), project(cset, x))
    op = operator_from_dict({"kind": "indicator", "set": {"kind": "box", "lower": [-1], "upper": [1]}}, 1)
    assert resolvent(op, 1.0, [3.0])[0][0] == 1.0
    with pytest.raises(InputError):
        operator_from_dict({"kind": "zero", "extra": 1}, 1)
    with pytest.raises(InputError):
        operator_from_dict({"kind": "indicator", "set": {"kind": "box", "lower": [0], "upper": [1]}}, 2)


def test_custom_resolvent_probe_flags_expansive_maps():
    ok = CustomResolventOperator(lambda lam, x: np.clip(x, -1, 1), 2)
    assert ok.probe_ok
    with pytest.warns(RuntimeWarning):
        bad = CustomResolventOperator(lambda lam, x: 2.0 * x, 2)
    assert not bad.probe_ok


# -- interior ball ----------------------------------------------------------

def test_interior_gap_examples():
    ball = IndicatorOperator(Ball([0.0, 0.0], 1.0))
    assert interior_gap_check(ball, InteriorBallCertificate([0.0, 0.0], 1.0), [[1.0, 0.0]]).passed
    box = IndicatorOperator(Box([0.0], [2.0]))
    rep = interior_gap_check(box, InteriorBallCertificate([1.0], 1.0), [[0.0]])
    assert rep.passed and rep.values == [1.0]
    cert = certify_interior_ball(TRIANGLE, [0.25, 0.25])
    assert cert.r == pytest.approx(0.25, abs=1e-15)
    mids = [[0.0, 0.5], [0.5, 0.0], [0.5, 0.5]]
    assert interior_gap_check(IndicatorOperator(TRIANGLE), cert, mids).passed
    assert cert.verify(IndicatorOperator(TRIANGLE))


def test_interior_gap_reports_violation_and_rejects_off_boundary():
    box = IndicatorOperator(Box([0.0], [2.0]))
    rep = interior_gap_check(box, InteriorBallCertificate([1.0], 1.5), [[0.0], [2.0]])
    assert rep.violations == [0, 1]
    with pytest.raises(InputError):
        interior_gap_check(box, InteriorBallCertificate([1.0], 1.0), [[3.0]])
    with pytest.raises(InputError):
        interior_gap_check(box, InteriorBallCertificate([1.0], 1.0), [[1.0]])


# -- properties over every built-in -----------------------------------------

@pytest.mark.parametrize("name", list(builtin_operators()))
def test_nonexpansive_and_yosida_monotone(name):
    op = builtin_operators()[name]
    rng = np.random.default_rng(11)
    x = rng.normal(scale=3, size=(1000, 2))
    y = rng.normal(scale=3, size=(1000, 2))
    for lam in (0.1, 1.0):
        jx, kx = resolvent(op, lam, x)
        jy, ky = resolvent(op, lam, y)
        lhs = np.linalg.norm(jx - jy, axis=1)
        assert np.all(lhs <= np.linalg.norm(x - y, axis=1) + 1e-10)
        inner = np.einsum("ij,ij->i", x - y, kx / lam - ky / lam)
        assert np.all(inner >= -1e-10)
        np.testing.assert_allclose(jx + kx, x, rtol=0, atol=1e-12)


@pytest.mark.parametrize("name", ["halfspace", "box", "ball", "triangle"])
def test_projection_idempotent_and_lambda_free(name):
    op = builtin_operators()[name]
    x = np.random.default_rng(5).normal(scale=3, size=(1000, 2))
    p = project(op.cset, x)
    assert np.all(op.cset.violation(p) <= 1e-10)
    np.testing.assert_allclose(project(op.cset, p), p, rtol=0, atol=1e-12)
    j1, k1 = resolvent(op, 0.01, x)
    j2, k2 = resolvent(op, 7.0, x)
    np.testing.assert_array_equal(j1, j2)
    np.testing.assert_array_equal(k1, k2)
    inside = op.cset.contains(x, tol=0.0)
    np.testing.assert_array_equal(j1[inside], x[inside])
    assert np.all(k1[inside] == 0.0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=2),
       st.lists(st.floats(-50, 50), min_size=2, max_size=2))
def test_triangle_projection_property(x, y):
    px, py = project(TRIANGLE, np.array(x)), project(TRIANGLE, np.array(y))
    assert TRIANGLE.violation(px) <= 1e-10
    assert np.linalg.norm(px - py) <= np.linalg.norm(np.subtract(x, y)) + 1e-10
    # variational inequality of the projection: <x - Px, z - Px> <= 0 at the vertices
    for z in ([0.0, 0.0], [1.0, 0.0], [0.0, 1.0]):
        assert np.dot(np.subtract(x, px), np.subtract(z, px)) <= 1e-8


def test_value_bisection_fallback_is_close():
    op = SubgradientOperator(lambda u: np.sum(np.abs(u), axis=-1), 1)
    x = np.linspace(-4, 4, 41)[:, None]
    np.testing.assert_allclose(resolvent(op, 1.0, x)[0][:, 0],
                               np.sign(x[:, 0]) * np.maximum(np.abs(x[:, 0]) - 1, 0), atol=1e-6)
