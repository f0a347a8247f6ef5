import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import ndtr

from aelab.errors import (CurvatureError, InfeasibleError, RankDeficiencyError, SizeCapError,
                          TruncationError)
from aelab.functionals import LogConcaveDensity
from aelab.grid import Axis, FunctionSpec, GridFunction, mesh
from aelab.transport import (DiscreteMeasure, MapSamples, brenier_map, complementary_slackness,
                             density_pair, discretize, discretize_field, dual_feasibility, dual_log_density,
                             kantorovich_potentials, linear_map_fit, linearity_probe,
                             monge_ampere_pair_check, probe_axes, pushforward_check,
                             solve_quadratic_ot)

A2 = np.diag([2.0, 0.5])


def gaussian_1d(sigma, count=201, z=6.0):
    x = np.linspace(-z * sigma, z * sigma, count)
    return DiscreteMeasure.from_unnormalized(x[:, None], np.exp(-0.5 * (x / sigma) ** 2))


@pytest.fixture(scope="module")
def gauss_pair():
    src, dst = gaussian_1d(1.0), gaussian_1d(2.0)
    return src, dst, solve_quadratic_ot(src, dst)


@pytest.fixture(scope="module")
def quad_probe():
    return linearity_probe(FunctionSpec.quadratic(A2))


# -- measures --------------------------------------------------------------

def test_measure_validation():
    with pytest.raises(ValueError):
        DiscreteMeasure([[0.0], [1.0]], [0.5, 0.6])
    with pytest.raises(ValueError):
        DiscreteMeasure([[0.0], [1.0]], [1.5, -0.5])
    with pytest.raises(ValueError):
        DiscreteMeasure([[0.0], [0.0]], [0.5, 0.5])


def test_discretize_gaussian_symmetric():
    d = LogConcaveDensity.from_spec(FunctionSpec.quadratic(np.eye(1)))
    m = discretize(d, [Axis(-5, 5, 101)])
    assert m.weights.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(m.weights, m.weights[::-1], rtol=0, atol=1e-15)
    assert np.allclose(m.atoms[:, 0], -m.atoms[::-1, 0])


def test_discretize_matches_cell_masses():
    d = LogConcaveDensity.from_spec(FunctionSpec.quadratic(A2))
    axes = [Axis(-4, 4, 161), Axis(-8, 8, 161)]
    m = discretize(d, axes)
    sig = 1 / np.sqrt(np.diag(A2))
    X = m.atoms
    exact = np.ones(len(X))
    for k, ax in enumerate(axes):
        hi, lo = (X[:, k] + ax.h / 2) / sig[k], (X[:, k] - ax.h / 2) / sig[k]
        exact *= ndtr(hi) - ndtr(lo)
    # compare on the bulk, within three standard deviations per axis
    bulk = np.all(np.abs(X) <= 3 * sig, axis=1)
    rel = np.abs(m.weights - exact)[bulk] / exact[bulk]
    assert rel.max() <= 1e-2


def test_discretize_empty_heavy_set():
    axes = [Axis(-1, 1, 11)]
    with pytest.raises(TruncationError):
        discretize_field(axes, np.full(11, -np.inf))


def test_measure_csv_roundtrip(tmp_path):
    m = gaussian_1d(1.0, 21)
    m.to_csv(tmp_path / "m.csv")
    back = DiscreteMeasure.from_csv(tmp_path / "m.csv")
    assert np.array_equal(back.atoms, m.atoms)
    assert np.allclose(back.weights, m.weights, rtol=1e-15)


# -- solver and duality ----------------------------------------------------

def test_identical_measures_diagonal_plan():
    m = gaussian_1d(1.0, 31)
    plan = solve_quadratic_ot(m, m)
    assert plan.total_cost == pytest.approx(0.0, abs=1e-14)
    P = plan.dense()
    assert np.allclose(P, np.diag(m.weights), atol=1e-12)
    p = plan.potentials
    # u + v = 0 on the diagonal and u is constant up to the shared shift
    assert np.allclose(p.u + p.v, 0, atol=1e-9)
    assert abs(p.duality_gap) <= 1e-12
    samples = brenier_map(plan)
    assert np.allclose(samples.images, samples.points, atol=1e-12)
    assert pushforward_check(samples, m, m)[0] <= 1e-12


def test_two_atom_example():
    src = DiscreteMeasure([[0.0], [1.0]], [0.5, 0.5])
    dst = DiscreteMeasure([[2.0], [3.0]], [0.5, 0.5])
    plan = solve_quadratic_ot(src, dst)
    assert plan.total_cost == pytest.approx(2.0, abs=1e-12)
    assert np.allclose(plan.dense(), np.diag([0.5, 0.5]))
    pots = kantorovich_potentials(src, dst, plan)
    assert pots.dual_value == pytest.approx(2.0, abs=1e-9)


def test_gaussian_pair_cost_and_certificate(gauss_pair):
    src, dst, plan = gauss_pair
    assert plan.total_cost == pytest.approx(0.5, rel=2e-2)
    gap = plan.potentials.duality_gap
    assert -1e-9 <= gap <= 1e-8 * (1 + plan.total_cost)
    assert complementary_slackness(plan) <= 1e-8
    assert dual_feasibility(plan) <= 1e-9


def test_gaussian_pair_map_is_doubling(gauss_pair):
    src, dst, plan = gauss_pair
    s = brenier_map(plan)
    h = dst.atoms[1, 0] - dst.atoms[0, 0]
    assert np.abs(s.images[:, 0] - 2 * s.points[:, 0]).max() <= 3 * h
    assert s.cyclically_monotone


def test_pushforward_second_moment(gauss_pair):
    src, dst, plan = gauss_pair
    sq = {"x^2": lambda Y: Y[:, 0] ** 2}
    doubling = MapSamples(src.atoms, 2 * src.atoms, src.weights)
    assert pushforward_check(doubling, src, dst, sq)[0] <= 0.02 * 4
    wrong = MapSamples(src.atoms, src.atoms.copy(), src.weights)
    assert pushforward_check(wrong, src, dst, sq)[0] == pytest.approx(3.0, rel=2e-2)
    assert pushforward_check(brenier_map(plan), src, dst)[0] <= 1e-9


def test_plan_marginals(gauss_pair):
    src, dst, plan = gauss_pair
    P = plan.dense()
    assert np.abs(P.sum(1) - src.weights).max() <= 1e-9
    assert np.abs(P.sum(0) - dst.weights).max() <= 1e-9
    assert P.min() >= 0


def test_size_cap():
    m = gaussian_1d(1.0, 50)
    with pytest.raises(SizeCapError):
        solve_quadratic_ot(m, m, size_cap=40)


def test_dimension_mismatch():
    a = DiscreteMeasure([[0.0], [1.0]], [0.5, 0.5])
    b = DiscreteMeasure([[0.0, 0.0], [1.0, 1.0]], [0.5, 0.5])
    with pytest.raises(InfeasibleError):
        solve_quadratic_ot(a, b)


def test_sinkhorn_close_to_exact(gauss_pair):
    src, dst, plan = gauss_pair
    reg = solve_quadratic_ot(src, dst, method="sinkhorn", reg=1e-2)
    assert reg.potentials is None
    assert reg.total_cost == pytest.approx(plan.total_cost, rel=5e-2)


def test_plan_csv(tmp_path, gauss_pair):
    plan = gauss_pair[2]
    plan.to_csv(tmp_path / "p.csv")
    rows = (tmp_path / "p.csv").read_text().splitlines()
    assert rows[0] == "i,j,mass" and len(rows) == len(plan.mass) + 1


# -- maps and fits ---------------------------------------------------------

def test_linear_fit_exact_samples():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(30, 2))
    A = np.array([[1.5, 0.2], [0.2, 0.7]])
    w = np.full(30, 1 / 30)
    A_hat, res = linear_map_fit(MapSamples(X, X @ A.T, w))
    assert np.allclose(A_hat, A, atol=1e-12)
    assert res <= 1e-12


def test_linear_fit_rank_deficiency():
    X = np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0], [4.0, 4.0]])
    with pytest.raises(RankDeficiencyError):
        linear_map_fit(MapSamples(X, X, np.full(4, 0.25)))
    with pytest.raises(RankDeficiencyError):
        linear_map_fit(MapSamples(X[:2], X[:2], np.full(2, 0.5)))


def test_brenier_zero_weight_source():
    src = DiscreteMeasure([[0.0], [1.0]], [1.0, 0.0])
    dst = DiscreteMeasure([[2.0], [3.0]], [0.5, 0.5])
    plan = solve_quadratic_ot(src, dst)
    with pytest.raises(ValueError):
        brenier_map(plan)


def test_linearity_probe_quadratic(quad_probe):
    r = quad_probe
    assert r.residual <= 0.05
    assert np.allclose(r.A_hat, A2, rtol=0.05, atol=0.05 * 2)
    assert np.abs(np.diag(r.A_hat) / np.diag(A2) - 1).max() <= 0.05
    assert r.duality_gap_rel <= 1e-8
    assert r.pushforward_second_moment <= 0.02
    assert r.samples.cyclically_monotone


def test_linearity_probe_quartic_detects_nonlinearity():
    r = linearity_probe(FunctionSpec.quartic(A2, 0.3))
    assert r.residual > 0.10


def test_probe_grid_cap():
    with pytest.raises(SizeCapError):
        linearity_probe(FunctionSpec.quadratic(A2), count=40, size_cap=1000)


def test_gradient_pushforward_for_quadratic():
    """x -> A x pushes the discretized alpha to beta within quadrature tolerance."""
    d = LogConcaveDensity.from_spec(FunctionSpec.quadratic(A2))
    src_axes, dst_axes = probe_axes(d, 40)
    src = discretize(d, src_axes)
    dst = discretize_field(dst_axes, dual_log_density(d, dst_axes))
    s = MapSamples(src.atoms, src.atoms @ A2.T, src.weights)
    sq = {f"x{k + 1}^2": (lambda Y, k=k: Y[:, k] ** 2) for k in range(2)}
    _, table = pushforward_check(s, src, dst, sq)
    assert max(table[k] / dst.expectation(g) for k, g in sq.items()) <= 0.02


# -- Monge-Ampere pair -----------------------------------------------------

def test_monge_ampere_pair_quadratic():
    spec = FunctionSpec.quadratic(A2)
    d = LogConcaveDensity.from_spec(spec)
    src_axes, dst_axes = probe_axes(d, 60)
    alpha, beta = density_pair(d, src_axes, dst_axes)
    assert monge_ampere_pair_check(spec, alpha, beta) <= 1e-2


def test_monge_ampere_pair_standard_gaussian():
    spec = FunctionSpec.quadratic(np.eye(2))
    axes = [Axis(-5, 5, 101)] * 2
    g = np.exp(-0.5 * (mesh(axes) ** 2).sum(-1)) / (2 * math.pi)
    alpha = GridFunction(axes, g)
    assert monge_ampere_pair_check(spec, alpha, alpha) <= 1e-12


def test_monge_ampere_pair_mismatch():
    spec = FunctionSpec.quadratic(A2)
    d = LogConcaveDensity.from_spec(spec)
    other = LogConcaveDensity.from_spec(FunctionSpec.quadratic(np.diag([1.0, 1.0])))
    src_axes, dst_axes = probe_axes(d, 60)
    alpha, _ = density_pair(d, src_axes, dst_axes)
    _, beta = density_pair(other, src_axes, dst_axes)
    assert monge_ampere_pair_check(spec, alpha, beta) > 0.1


def test_monge_ampere_pair_requires_closed_form():
    axes = [Axis(-2, 2, 41)]
    alpha = GridFunction(axes, np.exp(-0.5 * axes[0].nodes ** 2))
    with pytest.raises(ValueError):
        monge_ampere_pair_check(GridFunction(axes, 0.5 * axes[0].nodes ** 2), alpha, alpha)


def test_monge_ampere_pair_curvature():
    # the Hessian of |x|^4 / 4 vanishes at the origin
    spec = FunctionSpec.quartic(np.zeros((1, 1)), 1.0)
    axes = [Axis(-2, 2, 41)]
    alpha = GridFunction(axes, np.exp(-0.25 * axes[0].nodes ** 4))
    with pytest.raises(CurvatureError):
        monge_ampere_pair_check(spec, alpha, alpha)


# -- properties ------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(data=st.data(), m=st.integers(2, 12), k=st.integers(2, 12))
def test_random_1d_instances_sorted_and_certified(data, m, k):
    xs = data.draw(st.lists(st.integers(-200, 200), min_size=m, max_size=m, unique=True))
    ys = data.draw(st.lists(st.integers(-200, 200), min_size=k, max_size=k, unique=True))
    wx = data.draw(st.lists(st.integers(1, 20), min_size=m, max_size=m))
    wy = data.draw(st.lists(st.integers(1, 20), min_size=k, max_size=k))
    src = DiscreteMeasure.from_unnormalized(np.array(xs, float)[:, None] / 50, wx)
    dst = DiscreteMeasure.from_unnormalized(np.array(ys, float)[:, None] / 50, wy)
    plan = solve_quadratic_ot(src, dst)
    gap = plan.potentials.duality_gap
    assert -1e-9 <= gap <= 1e-8 * (1 + plan.total_cost)
    assert complementary_slackness(plan) <= 1e-8
    assert dual_feasibility(plan) <= 1e-9
    # monotone: no two coupled pairs cross
    x = src.atoms[plan.rows, 0]
    y = dst.atoms[plan.cols, 0]
    order = np.lexsort((y, x))
    assert np.all(np.diff(y[order]) >= -1e-12)
    # sorting oracle: the quantile coupling has the same cost
    assert plan.total_cost == pytest.approx(_quantile_cost(src, dst), abs=1e-9)


def _quantile_cost(src, dst):
    xi = np.argsort(src.atoms[:, 0])
    yi = np.argsort(dst.atoms[:, 0])
    cx = np.concatenate([[0], np.cumsum(src.weights[xi])])
    cy = np.concatenate([[0], np.cumsum(dst.weights[yi])])
    cuts = np.unique(np.concatenate([cx, cy]))
    cuts = cuts[(cuts >= 0) & (cuts <= 1)]
    total = 0.0
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        mid = 0.5 * (lo + hi)
        a = src.atoms[xi[min(np.searchsorted(cx, mid), len(xi)) - 1], 0]
        b = dst.atoms[yi[min(np.searchsorted(cy, mid), len(yi)) - 1], 0]
        total += (hi - lo) * 0.5 * (a - b) ** 2
    return total


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10 ** 6), m=st.integers(3, 30), k=st.integers(3, 30))
def test_random_2d_instances_certified(seed, m, k):
    rng = np.random.default_rng(seed)
    src = DiscreteMeasure.from_unnormalized(rng.normal(size=(m, 2)), rng.uniform(0.1, 1, m))
    dst = DiscreteMeasure.from_unnormalized(rng.normal(size=(k, 2)) + 1, rng.uniform(0.1, 1, k))
    plan = solve_quadratic_ot(src, dst)
    gap = plan.potentials.duality_gap
    assert -1e-9 <= gap <= 1e-8 * (1 + plan.total_cost)
    assert complementary_slackness(plan) <= 1e-8
    assert dual_feasibility(plan) <= 1e-9
    assert brenier_map(plan).cyclically_monotone
