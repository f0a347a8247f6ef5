import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aelab.bodies import ConvexBody
from aelab.errors import BarycenterError, NotNormalizedError
from aelab.functionals import (DivergenceSpec, LogConcaveDensity, StabilityReport,
                               affine_isoperimetric_sides, affine_surface_area_lambda, barycenter,
                               divergence_scale, divergence_sides, dumps_records, gaussian_entropy,
                               identity_intvc_residual, monge_ampere_residual, quadratic_as_lambda,
                               quadratic_fit_distance, record, recenter,
                               reverse_logsobolev_sides, santalo_product_functional,
                               shannon_entropy, total_mass)
from aelab.grid import FunctionSpec

A2 = np.diag([2.0, 0.5])
F_ALL = [DivergenceSpec("log"), DivergenceSpec("power", lam=0.5), DivergenceSpec("linear"),
         DivergenceSpec("neg_reciprocal"), DivergenceSpec("power", lam=2.0)]


def density(spec, **kw):
    return LogConcaveDensity.from_spec(spec, **kw)


@pytest.fixture(scope="module")
def gauss2():
    return density(FunctionSpec.quadratic(np.eye(2)))


@pytest.fixture(scope="module")
def quad():
    return density(FunctionSpec.quadratic(A2, 0.3))


@pytest.fixture(scope="module")
def quartic():
    return density(FunctionSpec.quartic(np.eye(2), 0.2))


# -- mass, barycenter, entropy ---------------------------------------------

def test_masses(gauss2):
    assert total_mass(gauss2) == pytest.approx(2 * math.pi, rel=1e-5)
    assert total_mass(density(FunctionSpec.quadratic(np.diag([4.0, 1.0])))) == pytest.approx(math.pi, rel=1e-5)
    disk = density(FunctionSpec.gauge_square(ConvexBody.ball()))
    assert total_mass(disk) == pytest.approx(2 * math.pi, rel=1e-5)


def test_barycenter_and_recenter():
    v = np.array([0.4, -0.3])
    d = density(FunctionSpec.quadratic(np.eye(2), shift=v))
    assert np.allclose(barycenter(d), v, atol=1e-6)
    r = recenter(d)
    assert np.allclose(barycenter(r), 0, atol=1e-6)
    assert np.allclose(barycenter(recenter(r)), barycenter(r), atol=1e-9)
    assert np.allclose(barycenter(density(FunctionSpec.quartic(A2, 0.3))), 0, atol=1e-9)


def test_shannon_entropy():
    d = density(FunctionSpec.quadratic(np.eye(2))).normalize()
    assert shannon_entropy(d) == pytest.approx(math.log(2 * math.pi * math.e), rel=1e-5)
    assert gaussian_entropy(2) == pytest.approx(2.8379, abs=1e-4)
    s2 = density(FunctionSpec.quadratic(np.array([[0.25]]))).normalize()
    assert shannon_entropy(s2) == pytest.approx(0.5 * math.log(2 * math.pi * math.e * 4), rel=1e-5)
    shifted = density(FunctionSpec.quadratic(np.array([[0.25]]), shift=[1.5])).normalize()
    assert shannon_entropy(shifted) == pytest.approx(shannon_entropy(s2), rel=1e-5)


def test_entropy_requires_normalization(gauss2):
    with pytest.raises(NotNormalizedError):
        shannon_entropy(gauss2)


# -- reverse log-Sobolev ---------------------------------------------------

@pytest.mark.parametrize("sigma", [0.5, 1.0, 2.0])
def test_reverse_logsobolev_gaussian_equality(sigma):
    d = density(FunctionSpec.quadratic(np.eye(2) / sigma ** 2)).normalize()
    lhs, rhs = reverse_logsobolev_sides(d)
    assert lhs == pytest.approx(-4 * math.log(sigma), abs=1e-6)
    assert abs(lhs - rhs) <= 1e-3 * max(1.0, abs(rhs))


def test_reverse_logsobolev_strict_on_quartic(quartic):
    lhs, rhs = reverse_logsobolev_sides(quartic.normalize())
    assert rhs - lhs > 1e-2


# -- divergence inequality -------------------------------------------------

@pytest.mark.parametrize("f", F_ALL, ids=lambda f: f.describe())
def test_divergence_equality_on_quadratics(f, quad):
    lhs, rhs = divergence_sides(f, quad)
    assert abs(lhs - rhs) <= 1e-3 * abs(rhs)


@pytest.mark.parametrize("f", F_ALL, ids=lambda f: f.describe())
def test_divergence_direction_on_quartic(f, quartic):
    lhs, rhs = divergence_sides(f, quartic)
    slack = 1e-3 * abs(rhs)
    if f.relation == "eq":
        assert abs(lhs - rhs) <= slack
    elif f.relation == "le":
        assert lhs <= rhs + slack
    else:
        assert lhs >= rhs - slack


def test_log_divergence_strict_on_quartic(quartic):
    lhs, rhs = divergence_sides(DivergenceSpec("log"), quartic)
    assert rhs - lhs > 1e-3 * abs(rhs)


def test_divergence_spec_tags():
    assert DivergenceSpec("power", lam=0.5).shape == "concave"
    assert DivergenceSpec("power", lam=2.0).shape == "convex"
    assert DivergenceSpec("power", lam=-1.0).monotonicity == "decreasing"
    assert DivergenceSpec("linear", shape="convex").relation == "eq"
    with pytest.raises(ValueError):
        DivergenceSpec("power", lam=2.0, shape="concave")
    with pytest.raises(ValueError):
        DivergenceSpec("log", monotonicity="decreasing")
    f = DivergenceSpec("power", lam=0.25)
    assert DivergenceSpec.from_json(f.to_json()) == f


# -- identity, Santalo, as_lambda, Monge-Ampere ----------------------------

def test_intvc_identity(gauss2, quad):
    assert identity_intvc_residual(gauss2) <= 1e-3
    assert identity_intvc_residual(quad) <= 1e-3
    assert identity_intvc_residual(density(FunctionSpec.quartic(np.eye(2), 0.1))) <= 5e-3


@pytest.mark.parametrize("n", [1, 2, 3])
def test_gaussian_santalo(n):
    prod, ratio = santalo_product_functional(density(FunctionSpec.quadratic(np.eye(n))))
    assert prod == pytest.approx((2 * math.pi) ** n, rel=5e-3)


def test_santalo_quadratic_and_quartic():
    _, r = santalo_product_functional(density(FunctionSpec.quadratic(A2)))
    assert r == pytest.approx(1.0, abs=1e-3)
    _, r4 = santalo_product_functional(density(FunctionSpec.quartic(np.zeros((1, 1)), 1.0)))
    assert r4 < 1 - 1e-2


def test_santalo_requires_centering():
    d = density(FunctionSpec.quadratic(np.eye(2), shift=[0.5, 0.0]))
    with pytest.raises(BarycenterError):
        santalo_product_functional(d)


@pytest.mark.parametrize("lam", [-1.0, 0.0, 0.25, 0.5, 1.0])
def test_as_lambda_standard_gaussian(lam, gauss2):
    assert affine_surface_area_lambda(gauss2, lam) == pytest.approx(2 * math.pi, rel=5e-3)


@pytest.mark.parametrize("lam", [-0.5, 0.25, 0.75])
def test_as_lambda_quadratic_closed_form(lam, quad):
    assert affine_surface_area_lambda(quad, lam) == pytest.approx(quadratic_as_lambda(A2, lam, 0.3), rel=5e-3)


@pytest.mark.parametrize("lam", [-1.0, -0.5, 0.25, 0.5, 0.75, 1.0])
def test_as_lambda_inequalities_on_quartic(lam, quartic):
    lhs, rhs, rel = affine_isoperimetric_sides(quartic, lam)
    assert (lhs <= rhs * (1 + 1e-3)) if rel == "le" else (lhs >= rhs * (1 - 1e-3))


def test_as_lambda_zero_is_mass(quartic):
    assert affine_surface_area_lambda(quartic, 0.0) == quartic.mass


def test_monge_ampere_separation(quad, quartic):
    sup_q, l1_q = monge_ampere_residual(quad)
    assert sup_q <= 1e-2 and l1_q <= 1e-2
    sup_t, _ = monge_ampere_residual(quartic)
    assert sup_t >= 10 * 1e-2


# -- quadratic fit ---------------------------------------------------------

def test_quadratic_fit_exact_members():
    rep = quadratic_fit_distance(density(FunctionSpec.quadratic(np.eye(2))))
    assert rep.delta_L1 <= 1e-4
    assert np.allclose(rep.fitted_A, np.eye(2), atol=1e-3)
    A0 = np.array([[1.5, 0.3], [0.3, 0.8]])
    rep = quadratic_fit_distance(density(FunctionSpec.quadratic(A0, 3.0)))
    assert rep.delta_L1 <= 1e-3
    assert rep.fitted_c == pytest.approx(3.0, abs=1e-4)
    # psi(Ax) = |x|^2 / 2 needs A A0 A = I
    assert np.allclose(rep.fitted_A @ A0 @ rep.fitted_A, np.eye(2), atol=1e-3)


def test_quadratic_fit_invariances():
    spec = FunctionSpec.quartic(np.eye(2), 0.1)
    base = quadratic_fit_distance(density(spec)).delta_L1
    shifted = quadratic_fit_distance(density(spec.with_changes(shift=np.array([0.3, -0.2])))).delta_L1
    L = np.array([[1.3, 0.2], [0.2, 0.8]])
    composed = quadratic_fit_distance(density(spec.with_changes(linear=L))).delta_L1
    assert shifted == pytest.approx(base, rel=1e-2)
    assert composed == pytest.approx(base, rel=1e-2)


def test_stability_report_validation():
    with pytest.raises(ValueError):
        StabilityReport(0.1, np.eye(2), 0.0, 2.0, -1.0)
    with pytest.raises(ValueError):
        StabilityReport(0.1, -np.eye(2), 0.0, 2.0, 1.0)


def test_records_serialize_non_finite():
    rec = record("divergence:neg_reciprocal", "x", -math.inf, -2.0, 1e-3)
    text = dumps_records([rec])
    assert '"-inf"' in text and '"functional"' in text


# -- properties ------------------------------------------------------------

@settings(max_examples=10, deadline=None)
@given(a=st.floats(0.5, 2.0), b=st.floats(0.5, 2.0), th=st.floats(0, math.pi), c=st.floats(-0.5, 0.5))
def test_quadratic_equality_family(a, b, th, c):
    Q = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    A = Q @ np.diag([a, b]) @ Q.T
    d = density(FunctionSpec.quadratic(0.5 * (A + A.T), c))
    for f in (DivergenceSpec("log"), DivergenceSpec("power", lam=2.0)):
        lhs, rhs = divergence_sides(f, d)
        assert abs(lhs - rhs) <= 1e-3 * divergence_scale(f, d, rhs)
    assert santalo_product_functional(d)[1] == pytest.approx(1.0, abs=1e-3)


@settings(max_examples=10, deadline=None)
@given(a=st.floats(0.5, 2.0), t=st.floats(0.05, 0.3), lam=st.sampled_from([0.25, 0.5, 0.75]))
def test_quartic_inequalities_1d(a, t, lam):
    d = density(FunctionSpec.quartic(np.array([[a]]), t))
    lhs, rhs = divergence_sides(DivergenceSpec("power", lam=lam), d)
    assert lhs <= rhs + 1e-3 * abs(rhs)
    lhs, rhs, _ = affine_isoperimetric_sides(d, lam)
    assert lhs <= rhs * (1 + 1e-3)
    assert santalo_product_functional(d)[1] <= 1 + 1e-3
