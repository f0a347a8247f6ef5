import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aelab.errors import ConvexityError, DomainError, StencilError, TruncationError
from aelab.grid import (Axis, FunctionSpec, GridFunction, check_convexity, conjugate_1d,
                        differentials, dual_log_concave, gradient_field, hessian_det_field,
                        integrate, integrate_function, legendre_transform,
                        legendre_transform_centered, load_grid, mesh, save_grid, tail_halfwidth)

A2 = np.diag([2.0, 0.5])


def quad_grid(A=A2, lo=-6.0, hi=6.0, count=241, c=0.0):
    n = np.atleast_2d(A).shape[0]
    return GridFunction.from_spec(FunctionSpec.quadratic(A, c), [Axis(lo, hi, count)] * n)


# -- oracles ---------------------------------------------------------------

def test_quadratic_conjugate_closed_form():
    f = quad_grid()
    dual = [Axis(-3, 3, 121)] * 2
    Y = mesh(dual)
    exact = 0.5 * np.einsum("...i,ij,...j->...", Y, np.linalg.inv(A2), Y)
    g = legendre_transform(f, dual)
    assert np.abs(g.values - exact).max() < 2e-3
    assert g.convex
    r = legendre_transform(f, dual, refine=True)
    assert np.abs(r.values - exact).max() < 1e-10


def test_fast_and_brute_agree():
    f = quad_grid(count=121)
    dual = [Axis(-3, 3, 61)] * 2
    a = legendre_transform(f, dual)
    b = legendre_transform(f, dual, method="brute")
    assert np.abs(a.values - b.values).max() < 1e-12


def test_abs_conjugate_is_indicator():
    x = np.linspace(-1, 1, 201)
    y = np.array([-0.5, 0.0, 0.9, 1.5])
    out = conjugate_1d(x, np.abs(x)[None, :], y)[0][0]
    assert np.allclose(out[:3], 0.0, atol=1e-12)
    # outside the slope range the discrete sup is attained at the boundary
    assert out[3] == pytest.approx(0.5, abs=1e-12)


def test_centered_transform_zero_shift_identical():
    f = quad_grid(count=121)
    dual = [Axis(-3, 3, 61)] * 2
    a = legendre_transform(f, dual)
    b = legendre_transform_centered(f, [0.0, 0.0], dual)
    assert np.array_equal(a.values, b.values)


def test_centered_transform_quadratic_closed_form():
    # with w = y - z: sup_x <x, w> - |x|^2 / 2 - <z, w> = |w|^2 / 2 - <z, w>
    f = quad_grid(np.eye(2), -6, 6, 241)
    z = np.array([1.0, 0.0])
    dual = [Axis(-2, 3, 51), Axis(-2, 2, 41)]
    g = legendre_transform_centered(f, z, dual, refine=True)
    W = mesh(dual) - z
    exact = 0.5 * (W ** 2).sum(-1) - W @ z
    assert np.abs(g.values - exact).max() < 1e-8


def test_quartic_conjugate_closed_form():
    f = GridFunction.from_spec(FunctionSpec.quartic(np.zeros((1, 1)), 1.0), [Axis(-2, 2, 2401)])
    dual = [Axis(-4, 4, 81)]
    g = legendre_transform(f, dual, refine=True)
    y = dual[0].nodes
    assert np.abs(g.values - 0.75 * np.abs(y) ** (4 / 3)).max() < 1e-6


@pytest.mark.parametrize("A", [np.eye(2), A2])
def test_biconjugation_quadratic(A):
    f = quad_grid(A, -3, 3, 241)
    s = legendre_transform(f, [Axis(-8, 8, 961)] * 2)
    ss = legendre_transform(s, f.axes)
    err = np.abs(ss.values - f.values)[2:-2, 2:-2]
    assert err.max() <= 1e-3


def test_biconjugation_quartic_1d():
    f = GridFunction.from_spec(FunctionSpec.quartic(np.zeros((1, 1)), 1.0), [Axis(-2, 2, 241)])
    s = legendre_transform(f, [Axis(-8, 8, 961)])
    ss = legendre_transform(s, f.axes)
    assert np.abs(ss.values - f.values)[2:-2].max() <= 1e-3


def test_dual_log_concave_residual_within_interpolation_tolerance():
    f = GridFunction.from_spec(FunctionSpec.quartic(np.eye(2), 0.1), [Axis(-6, 6, 241)] * 2)
    star, res = dual_log_concave(f, [Axis(-8, 8, 241)] * 2)
    from aelab.grid import interpolation_tolerance
    assert res <= 5 * interpolation_tolerance(star)


def test_gaussian_integral():
    ax = [Axis(-6, 6, 241)] * 2
    g = GridFunction(ax, np.exp(-0.5 * (mesh(ax) ** 2).sum(-1)))
    q = integrate_function(g)
    assert q.value == pytest.approx(2 * math.pi, rel=1e-8)
    assert q.tail < 1e-6


def test_truncated_box_raises():
    ax = [Axis(-1, 1, 41)]
    with pytest.raises(TruncationError):
        integrate(ax, np.exp(-0.5 * ax[0].nodes ** 2))


def test_tail_halfwidth_gaussian():
    hw = tail_halfwidth(FunctionSpec.quadratic(np.eye(1)), 1e-6)
    assert 4.5 < hw[0] < 7.0


def test_differentials_quadratic():
    f = quad_grid(count=121)
    g, det = differentials(f, (60, 70))
    x = f.node((60, 70))
    assert np.allclose(g, A2 @ x, atol=1e-10)
    assert det == pytest.approx(1.0, rel=1e-8)
    assert np.allclose(hessian_det_field(f)[5:-5, 5:-5], 1.0, atol=1e-8)
    assert gradient_field(f).shape == f.shape + (2,)


def test_quartic_differentials_match_finite_differences():
    spec = FunctionSpec.quartic(np.eye(2), 0.1)
    f = GridFunction.from_spec(spec, [Axis(-2, 2, 81)] * 2)
    idx = (60, 40)  # x = (1, 0)
    g, det = differentials(f, idx)
    x = f.node(idx)
    k = f.spacing[0] / 4
    e = np.eye(2) * k
    fd_grad = np.array([(spec.value(x + e[i]) - spec.value(x - e[i])) / (2 * k) for i in range(2)])
    H = np.empty((2, 2))
    for i in range(2):
        for j in range(2):
            H[i, j] = (spec.value(x + e[i] + e[j]) - spec.value(x + e[i] - e[j])
                       - spec.value(x - e[i] + e[j]) + spec.value(x - e[i] - e[j])) / (4 * k * k)
    assert np.allclose(g, fd_grad, atol=10 * k ** 2)
    assert det == pytest.approx(np.linalg.det(H), abs=10 * k ** 2)


def test_gauge_square_of_disk_integrates_to_2pi():
    from aelab.bodies import ConvexBody
    spec = FunctionSpec.gauge_square(ConvexBody.ball())
    f = GridFunction.from_spec(spec, [Axis(-6, 6, 241)] * 2)
    q = integrate(f.axes, np.exp(-f.values))
    assert q.value == pytest.approx(2 * math.pi, rel=1e-3)


def test_quartic_density_grid_refinement():
    spec = FunctionSpec.quartic(np.eye(2), 0.2)
    vals = []
    for count in (121, 1201):
        f = GridFunction.from_spec(spec, [Axis(-6, 6, count)] * 2)
        vals.append(integrate(f.axes, np.exp(-f.values)).value)
    assert vals[0] == pytest.approx(vals[1], rel=2e-3)


def test_stencil_error_at_boundary():
    f = quad_grid(count=61)
    with pytest.raises(StencilError):
        differentials(f, (0, 30))


# -- validation ------------------------------------------------------------

def test_nonconvex_input_rejected():
    x = np.linspace(-1, 1, 101)
    with pytest.raises(ConvexityError):
        GridFunction([Axis(-1, 1, 101)], x ** 4 - x ** 2, convex=True)
    rep = check_convexity(GridFunction([Axis(-1, 1, 101)], x ** 4 - x ** 2))
    assert not rep.is_convex


def test_disconnected_domain_rejected():
    v = np.zeros(41)
    v[10:20] = np.inf
    with pytest.raises(DomainError):
        GridFunction([Axis(-1, 1, 41)], v)


def test_evaluate_off_grid_raises():
    f = GridFunction([Axis(-1, 1, 41)], np.linspace(-1, 1, 41) ** 2)
    assert f.evaluate(np.array([[0.5]]))[0] == pytest.approx(0.25, abs=1e-3)
    with pytest.raises(DomainError):
        f.evaluate(np.array([[2.0]]))


def test_axis_json_roundtrip():
    a = Axis(-1.5, 2.5, 81)
    assert Axis.from_json(a.to_json()) == a
    assert a.h == pytest.approx(0.05)


def test_grid_save_load(tmp_path):
    f = quad_grid(count=51)
    save_grid(tmp_path / "f", f)
    g = load_grid(tmp_path / "f")
    assert np.array_equal(f.values, g.values)
    assert g.axes == f.axes


def test_concave_quadratic_has_witness():
    f = GridFunction([Axis(-1, 1, 41)] * 2, -0.5 * (mesh([Axis(-1, 1, 41)] * 2) ** 2).sum(-1))
    rep = check_convexity(f)
    assert not rep.is_convex and rep.worst_violation > 0 and rep.witness is not None
    assert check_convexity(quad_grid(count=41)).is_convex


# -- properties ------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(a=st.floats(0.3, 3.0), t=st.floats(0.0, 1.0), c=st.floats(-1, 1))
def test_fenchel_young(a, t, c):
    """psi(x) + psi*(y) >= <x, y> at every pair of nodes."""
    f = GridFunction.from_spec(FunctionSpec.quartic(np.array([[a]]), t, c), [Axis(-2, 2, 81)])
    dual = [Axis(-1.5, 1.5, 61)]
    g = legendre_transform(f, dual)
    x, y = f.axes[0].nodes, dual[0].nodes
    gap = f.values[None, :] + g.values[:, None] - x[None, :] * y[:, None]
    assert gap.min() >= -1e-12


@settings(max_examples=25, deadline=None)
@given(a=st.floats(0.3, 3.0), t=st.floats(0.0, 1.0), c=st.floats(-1, 1))
def test_conjugate_is_convex_and_order_reversing(a, t, c):
    f = GridFunction.from_spec(FunctionSpec.quartic(np.array([[a]]), t, c), [Axis(-2, 2, 81)])
    dual = [Axis(-1.5, 1.5, 61)]
    g = legendre_transform(f, dual)
    assert check_convexity(g).is_convex
    g2 = legendre_transform(f.plus_constant(0.5), dual)
    assert np.allclose(g2.values, g.values - 0.5)


@settings(max_examples=20, deadline=None)
@given(s=st.floats(-0.5, 0.5))
def test_translation_rule(s):
    """(psi(. - s))*(y) = psi*(y) + <s, y>."""
    f = GridFunction.from_spec(FunctionSpec.quadratic(np.eye(1)), [Axis(-4, 4, 161)])
    dual = [Axis(-2, 2, 41)]
    g = legendre_transform(f, dual, refine=True)
    gs = legendre_transform(f.translated([s]), dual, refine=True)
    y = dual[0].nodes
    assert np.abs(gs.values - (g.values + s * y)).max() < 1e-8
