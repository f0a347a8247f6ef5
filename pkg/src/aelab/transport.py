"""Discrete optimal transport for the quadratic cost 1/2 |x - y|^2.

The exact solver is a column-generation linear program: HiGHS dual simplex
solves the Kantorovich problem restricted to a sparse edge set, and edges
with negative reduced cost under the returned potentials are added until
none remain.  The final potentials certify optimality over all pairs.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numba
import numpy as np
import scipy.sparse as sp
from scipy.interpolate import RegularGridInterpolator
from scipy.optimize import linprog
from scipy.special import logsumexp

from .errors import (CurvatureError, DomainError, InfeasibleError, RankDeficiencyError,
                     SizeCapError, TruncationError)
from .functionals import HEAVY_REL, LogConcaveDensity, _coverage_ok
from .grid import Axis, FunctionSpec, GridFunction, legendre_transform, mesh

DEFAULT_SIZE_CAP = 4096
WEIGHT_TOL = 1e-12
MARGINAL_TOL = 1e-9
DISCRETIZE_REL = 1e-9


# --------------------------------------------------------------------------
# Measures
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.atoms, dtype=float))
        if X.shape[0] == 1 and np.ndim(self.atoms) == 1:
            X = X.T
        w = np.asarray(self.weights, dtype=float).ravel()
        if X.shape[0] != w.shape[0]:
            raise ValueError("atoms and weights differ in length")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        if abs(w.sum() - 1) > WEIGHT_TOL:
            raise ValueError(f"weights sum to {w.sum():.15g}, not 1")
        if len(np.unique(X, axis=0)) != len(X):
            raise ValueError("atoms must be distinct")
        X.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "atoms", X)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_unnormalized(cls, atoms, weights) -> "DiscreteMeasure":
        w = np.asarray(weights, dtype=float)
        return cls(atoms, w / w.sum())

    @property
    def size(self) -> int:
        return self.atoms.shape[0]

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    def expectation(self, g: Callable) -> float:
        return float(np.sum(self.weights * g(self.atoms)))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow([f"x{k + 1}" for k in range(self.dim)] + ["w"])
            for x, w in zip(self.atoms, self.weights):
                wr.writerow([repr(float(v)) for v in x] + [repr(float(w))])

    @classmethod
    def from_csv(cls, path) -> "DiscreteMeasure":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        data = np.array([[float(v) for v in r] for r in rows[1:]])
        return cls.from_unnormalized(data[:, :-1], data[:, -1])


def discretize_field(axes: Sequence[Axis], log_density: np.ndarray,
                     rel: float = DISCRETIZE_REL) -> DiscreteMeasure:
    """Atoms at grid nodes whose density is at least ``rel`` times the maximum."""
    axes = tuple(axes)
    ld = np.asarray(log_density, dtype=float)
    fin = np.isfinite(ld)
    if not fin.any():
        raise TruncationError("density vanishes on the whole grid")
    m = ld[fin].max()
    w = np.where(fin, np.exp(ld - m), 0.0)
    heavy = w >= rel
    if not heavy.any():
        raise TruncationError("no heavy node on the grid")
    X = mesh(axes)[heavy]
    cell = float(np.prod([a.h for a in axes]))
    return DiscreteMeasure.from_unnormalized(X, w[heavy] * cell)


def discretize(d: LogConcaveDensity, axes: Sequence[Axis] | None = None,
               rel: float = DISCRETIZE_REL) -> DiscreteMeasure:
    """Atoms of ``exp(-psi)`` at the heavy nodes of ``axes`` (default: the density grid)."""
    axes = d.psi.axes if axes is None else tuple(axes)
    if axes == d.psi.axes:
        ld = -d.psi.values
    else:
        ld = -d.psi.evaluate(mesh(axes))
    return discretize_field(axes, ld, rel)


def dual_log_density(d: LogConcaveDensity, axes: Sequence[Axis]) -> np.ndarray:
    """``-psi*`` on ``axes`` by a direct transform from the density grid."""
    star = legendre_transform(d.psi, axes, refine=True)
    if not _coverage_ok(d.psi.axes, star, d.budget).all():
        raise DomainError("dual grid needs gradients beyond the density grid")
    return -star.values


def density_pair(d: LogConcaveDensity, src_axes, dst_axes):
    """``(alpha, beta)`` on their grids: exp(-psi)/mass and exp(-psi*)/dual mass."""
    src_axes, dst_axes = tuple(src_axes), tuple(dst_axes)
    a = np.exp(-d.psi.evaluate(mesh(src_axes))) / d.mass
    b = np.exp(dual_log_density(d, dst_axes)) / d.dual_mass
    return GridFunction(src_axes, a), GridFunction(dst_axes, b)


# --------------------------------------------------------------------------
# Plans and potentials
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DualPotentials:
    u: np.ndarray
    v: np.ndarray
    dual_value: float
    duality_gap: float


@dataclass(frozen=True, eq=False)
class TransportPlan:
    src: DiscreteMeasure
    dst: DiscreteMeasure
    rows: np.ndarray
    cols: np.ndarray
    mass: np.ndarray
    total_cost: float
    potentials: DualPotentials | None = None

    def __post_init__(self):
        if np.any(self.mass < 0):
            raise ValueError("negative coupling mass")
        r = np.bincount(self.rows, self.mass, minlength=self.src.size)
        c = np.bincount(self.cols, self.mass, minlength=self.dst.size)
        err = max(np.abs(r - self.src.weights).max(), np.abs(c - self.dst.weights).max())
        if err > MARGINAL_TOL:
            raise InfeasibleError(f"plan marginals off by {err:.3g}")

    def dense(self) -> np.ndarray:
        P = np.zeros((self.src.size, self.dst.size))
        np.add.at(P, (self.rows, self.cols), self.mass)
        return P

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["i", "j", "mass"])
            for i, j, m in zip(self.rows, self.cols, self.mass):
                wr.writerow([int(i), int(j), repr(float(m))])


def quadratic_cost(X, Y) -> np.ndarray:
    X = np.asarray(X, float)
    Y = np.asarray(Y, float)
    return 0.5 * (np.einsum("ij,ij->i", X, X)[:, None] + np.einsum("ij,ij->i", Y, Y)[None, :]
                  - 2 * X @ Y.T)


def _northwest(a, b):
    i = j = 0
    ra, rb = a.copy(), b.copy()
    edges = []
    while i < len(a) and j < len(b):
        edges.append((i, j))
        if ra[i] < rb[j]:
            rb[j] -= ra[i]
            i += 1
        else:
            ra[i] -= rb[j]
            j += 1
    return edges


def _solve_restricted(C, I, J, a, b):
    m, k = len(a), len(b)
    ne = len(I)
    rows = np.r_[I, m + J]
    cols = np.r_[np.arange(ne), np.arange(ne)]
    Aeq = sp.csr_matrix((np.ones(2 * ne), (rows, cols)), shape=(m + k, ne))[:-1]
    # weights are scaled to O(1) so the solver's feasibility tolerance is relative to atom mass
    scale = float(max(m, k))
    r = linprog(C[I, J], A_eq=Aeq, b_eq=scale * np.r_[a, b][:-1], bounds=(0, None), method="highs-ds",
                options=dict(primal_feasibility_tolerance=1e-10, dual_feasibility_tolerance=1e-10))
    if r.status != 0:
        raise InfeasibleError(f"restricted transport LP failed: {r.message}")
    y = r.eqlin.marginals
    return r.x / scale, y[:m], np.r_[y[m:], 0.0]


@numba.njit(cache=True)
def _sinkhorn_potentials(C, la, lb, reg, iters):
    m, k = C.shape
    f = np.zeros(m)
    g = np.zeros(k)
    for _ in range(iters):
        for i in range(m):
            mx = -np.inf
            for j in range(k):
                t = (g[j] - C[i, j]) / reg + lb[j]
                if t > mx:
                    mx = t
            s = 0.0
            for j in range(k):
                s += np.exp((g[j] - C[i, j]) / reg + lb[j] - mx)
            f[i] = -reg * (mx + np.log(s))
        for j in range(k):
            mx = -np.inf
            for i in range(m):
                t = (f[i] - C[i, j]) / reg + la[i]
                if t > mx:
                    mx = t
            s = 0.0
            for i in range(m):
                s += np.exp((f[i] - C[i, j]) / reg + la[i] - mx)
            g[j] = -reg * (mx + np.log(s))
    return f, g


def _top_k_keys(S, kk, axis, k):
    """Keys ``i * k + j`` of the ``kk`` largest entries of S along ``axis``."""
    if axis == 1:
        n_other = S.shape[1]
        top = np.argpartition(-S, kk - 1, axis=1)[:, :kk] if kk < n_other else np.tile(np.arange(n_other), (S.shape[0], 1))
        return (np.arange(S.shape[0])[:, None] * k + top).ravel()
    n_other = S.shape[0]
    top = np.argpartition(-S, kk - 1, axis=0)[:kk, :] if kk < n_other else np.tile(np.arange(n_other)[:, None], (1, S.shape[1]))
    return (top * k + np.arange(S.shape[1])[None, :]).ravel()


def _exact_plan(src, dst, neighbours=8, max_rounds=200):
    a, b = src.weights, dst.weights
    m, k = len(a), len(b)
    C = quadratic_cost(src.atoms, dst.atoms)
    key_a = src.atoms[:, 0] + 1e-3 * src.atoms.sum(axis=1)
    key_b = dst.atoms[:, 0] + 1e-3 * dst.atoms.sum(axis=1)
    oa, ob = np.argsort(key_a, kind="stable"), np.argsort(key_b, kind="stable")
    nw = np.array(_northwest(a[oa], b[ob]))
    keys = [oa[nw[:, 0]] * k + ob[nw[:, 1]]]
    # a rough entropic plan points each atom at the right neighbourhood of the other side
    reg = 0.02 * float(np.median(C)) + 1e-12
    with np.errstate(divide="ignore"):
        f, g = _sinkhorn_potentials(C, np.log(a), np.log(b), reg, 60)
    S = (f[:, None] + g[None, :] - C) / reg
    keys.append(_top_k_keys(S, min(neighbours, k), 1, k))
    keys.append(_top_k_keys(S, min(neighbours, m), 0, k))
    E = np.unique(np.concatenate(keys))
    for _ in range(max_rounds):
        I, J = np.divmod(E, k)
        x, u, v = _solve_restricted(C, I, J, a, b)
        red = C - u[:, None] - v[None, :]
        bad = red < -1e-11
        if not bad.any():
            break
        R = np.where(bad, red, 0.0)
        add = [_top_k_keys(-R[bad.any(axis=1)], min(neighbours, k), 1, k)]
        # rows of the sub-block need their original indices back
        rows = np.nonzero(bad.any(axis=1))[0]
        ii, jj = np.divmod(add[0], k)
        add[0] = rows[ii] * k + jj
        cols = np.nonzero(bad.any(axis=0))[0]
        add.append(np.argmin(red[:, cols], axis=0) * k + cols)
        new = np.concatenate(add)
        new = new[red.ravel()[new] < -1e-11]
        E = np.union1d(E, new)
    else:
        raise InfeasibleError("column generation did not converge")
    keep = x > 0
    I, J, x = I[keep], J[keep], x[keep]
    # c-transforms give exactly feasible potentials with no loss in dual value
    v = np.min(C - u[:, None], axis=0)
    u = np.min(C - v[None, :], axis=1)
    return C, I, J, x, u, v


def _sinkhorn_plan(src, dst, reg, iters=5000, tol=1e-12):
    C = quadratic_cost(src.atoms, dst.atoms)
    la, lb = np.log(src.weights), np.log(dst.weights)
    f = np.zeros(src.size)
    g = np.zeros(dst.size)
    for _ in range(iters):
        f = -reg * logsumexp((g[None, :] - C) / reg + lb[None, :], axis=1)
        g_new = -reg * logsumexp((f[:, None] - C) / reg + la[:, None], axis=0)
        if np.max(np.abs(g_new - g)) < tol:
            g = g_new
            break
        g = g_new
    P = np.exp((f[:, None] + g[None, :] - C) / reg + la[:, None] + lb[None, :])
    P *= (src.weights / P.sum(axis=1))[:, None]
    return C, P


def solve_quadratic_ot(src: DiscreteMeasure, dst: DiscreteMeasure, *,
                       size_cap: int = DEFAULT_SIZE_CAP, method: str = "exact",
                       reg: float = 1e-2) -> TransportPlan:
    """Optimal coupling for the cost ``1/2 |x - y|^2``.

    ``method="exact"`` (default) returns an optimal vertex of the discrete
    Kantorovich problem together with certified potentials.
    ``method="sinkhorn"`` returns the entropic plan with regularization
    ``reg``; its column marginals are approximate and it carries no potentials.
    """
    if src.size > size_cap or dst.size > size_cap:
        raise SizeCapError(f"measure sizes {src.size}, {dst.size} exceed the cap {size_cap}")
    if src.dim != dst.dim:
        raise InfeasibleError("source and target live in different dimensions")
    if method == "exact":
        C, I, J, x, u, v = _exact_plan(src, dst)
        primal = float(np.sum(C[I, J] * x))
        dual = float(u @ src.weights + v @ dst.weights)
        pots = DualPotentials(u, v, dual, primal - dual)
        return TransportPlan(src, dst, I, J, x, primal, pots)
    if method == "sinkhorn":
        C, P = _sinkhorn_plan(src, dst, reg)
        I, J = np.nonzero(P > 1e-300)
        plan = object.__new__(TransportPlan)
        for name, val in dict(src=src, dst=dst, rows=I, cols=J, mass=P[I, J],
                              total_cost=float(np.sum(C * P)), potentials=None).items():
            object.__setattr__(plan, name, val)
        return plan
    raise ValueError(f"unknown method {method!r}")


def kantorovich_potentials(src: DiscreteMeasure, dst: DiscreteMeasure,
                           plan: TransportPlan | None = None) -> DualPotentials:
    """Potentials ``(u, v)`` with ``u_i + v_j <= cost_ij`` and zero duality gap."""
    if plan is None or plan.potentials is None:
        plan = solve_quadratic_ot(src, dst)
    return plan.potentials


def complementary_slackness(plan: TransportPlan) -> float:
    """Max of ``|u_i + v_j - cost_ij|`` over coupled pairs."""
    p = plan.potentials
    C = 0.5 * np.sum((plan.src.atoms[plan.rows] - plan.dst.atoms[plan.cols]) ** 2, axis=1)
    return float(np.max(np.abs(p.u[plan.rows] + p.v[plan.cols] - C)))


def dual_feasibility(plan: TransportPlan) -> float:
    """Max of ``u_i + v_j - cost_ij`` over all pairs (<= 0 when feasible)."""
    p = plan.potentials
    C = quadratic_cost(plan.src.atoms, plan.dst.atoms)
    return float(np.max(p.u[:, None] + p.v[None, :] - C))


# --------------------------------------------------------------------------
# Maps
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MapSamples:
    points: np.ndarray
    images: np.ndarray
    weights: np.ndarray
    cycle_violation: float = 0.0
    cycle_tolerance: float = math.inf

    @property
    def cyclically_monotone(self) -> bool:
        return self.cycle_violation <= self.cycle_tolerance


def cyclic_violation(points, images, n_cycles: int = 200, seed: int = 0) -> float:
    """Largest ``sum <T x_i, x_{i+1} - x_i>`` over random 3-cycles (<= 0 when monotone)."""
    rng = np.random.default_rng(seed)
    m = len(points)
    if m < 3:
        return 0.0
    idx = np.array([rng.choice(m, size=3, replace=False) for _ in range(n_cycles)])
    X = points[idx]
    T = images[idx]
    nxt = np.roll(X, -1, axis=1)
    s = np.einsum("cki,cki->c", T, nxt - X)
    return float(s.max())


def brenier_map(plan: TransportPlan, *, n_cycles: int = 200, seed: int = 0) -> MapSamples:
    """Barycentric projection ``T(x_i) = sum_j P_ij y_j / w_i`` with a 3-cycle monotonicity check."""
    w = plan.src.weights
    if np.any(w <= 0):
        raise ValueError("source atoms with zero weight have no image")
    n = plan.src.dim
    T = np.zeros((plan.src.size, n))
    np.add.at(T, plan.rows, plan.mass[:, None] * plan.dst.atoms[plan.cols])
    T /= w[:, None]
    viol = cyclic_violation(plan.src.atoms, T, n_cycles, seed)
    scale = max(plan.total_cost, 1e-300) if plan.total_cost > 0 else 1.0
    return MapSamples(plan.src.atoms, T, w, viol, 1e-7 * scale)


def default_test_functions(dim: int, dst: DiscreteMeasure) -> dict:
    """Coordinates, squares, pairwise products and half-space indicators."""
    tests = {}
    for k in range(dim):
        tests[f"x{k + 1}"] = lambda Y, k=k: Y[:, k]
        tests[f"x{k + 1}^2"] = lambda Y, k=k: Y[:, k] ** 2
        for j in range(k + 1, dim):
            tests[f"x{k + 1}*x{j + 1}"] = lambda Y, k=k, j=j: Y[:, k] * Y[:, j]
    mean = dst.weights @ dst.atoms
    sd = np.sqrt(dst.weights @ (dst.atoms - mean) ** 2)
    dirs = [np.eye(dim)[k] for k in range(dim)]
    if dim == 2:
        dirs += [np.array([1.0, 1.0]) / math.sqrt(2), np.array([1.0, -1.0]) / math.sqrt(2)]
    for di, e in enumerate(dirs):
        s = float(np.sqrt(np.sum((e * sd) ** 2)))
        for q in (-1.0, 0.0, 1.0):
            # thresholds are nudged off the lattice so atoms never sit on the boundary
            c = float(e @ mean) + (q + 0.0137) * s
            tests[f"half{di}({q:+.0f})"] = lambda Y, e=e, c=c: (Y @ e <= c).astype(float)
    return tests


def pushforward_check(samples: MapSamples, src: DiscreteMeasure, dst: DiscreteMeasure,
                      test_functions: dict | None = None) -> tuple[float, dict]:
    """Max over g of ``|sum_i w_i g(T x_i) - int g dnu_2|`` and the per-g table."""
    tests = default_test_functions(dst.dim, dst) if test_functions is None else test_functions
    w = src.weights
    table = {}
    for name, g in tests.items():
        table[name] = abs(float(np.sum(w * g(samples.images))) - dst.expectation(g))
    return max(table.values()), table


def linear_map_fit(samples: MapSamples, weights=None) -> tuple[np.ndarray, float]:
    """Weighted least squares ``T(x) ~ A_hat x`` and the relative weighted RMS residual."""
    X, T = samples.points, samples.images
    w = samples.weights if weights is None else np.asarray(weights, float)
    n = X.shape[1]
    if X.shape[0] < n * n:
        raise RankDeficiencyError(f"need at least {n * n} samples")
    G = (X * w[:, None]).T @ X
    if np.linalg.matrix_rank(G) < n:
        raise RankDeficiencyError("sample points do not span the space")
    B = (T * w[:, None]).T @ X
    A = np.linalg.solve(G.T, B.T).T
    R = T - X @ A.T
    res = math.sqrt(float(np.sum(w * np.sum(R ** 2, axis=1))) /
                    float(np.sum(w * np.sum(T ** 2, axis=1))))
    return A, res


def monge_ampere_pair_check(psi, alpha: GridFunction, beta: GridFunction,
                            heavy: float = HEAVY_REL) -> float:
    """``sup |alpha(x) - beta(grad psi(x)) det D^2 psi(x)| / sup alpha`` over heavy alpha nodes.

    ``psi`` is a FunctionSpec or a GridFunction with closed-form provenance.
    ``beta`` is interpolated multilinearly; gradients more than one cell
    outside its grid raise :class:`DomainError`, closer ones are clamped.
    """
    spec = psi.spec if isinstance(psi, GridFunction) else psi
    if spec is None or not spec.analytic:
        raise ValueError("monge_ampere_pair_check needs closed-form differentials")
    X = alpha.points()
    a = alpha.values
    mask = a >= heavy * a.max()
    x = X[mask]
    g = spec.gradient(x)
    det = np.linalg.det(spec.hessian(x))
    if np.any(det <= 0):
        raise CurvatureError("Hessian determinant <= 0 on a heavy node")
    for k, ax in enumerate(beta.axes):
        if g[:, k].min() < ax.lo - ax.h or g[:, k].max() > ax.hi + ax.h:
            raise DomainError("grad psi leaves the beta grid by more than one cell")
        g[:, k] = np.clip(g[:, k], ax.lo, ax.hi)
    b = RegularGridInterpolator([ax.nodes for ax in beta.axes], beta.values)(g)
    return float(np.max(np.abs(a[mask] - b * det)) / a.max())


# --------------------------------------------------------------------------
# Linearity probe
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ProbeResult:
    A_hat: np.ndarray
    residual: float
    duality_gap_rel: float
    pushforward_second_moment: float
    plan: TransportPlan
    samples: MapSamples


def _quantile_halfwidths(f: GridFunction, tail: float) -> np.ndarray:
    """Per-axis half-width holding all but ``tail`` of the exp(-f) marginal on each side."""
    v = f.values
    fin = np.isfinite(v)
    w = np.where(fin, np.exp(-(v - v[fin].min())), 0.0)
    out = np.empty(f.dim)
    for k, ax in enumerate(f.axes):
        marg = w.sum(axis=tuple(i for i in range(f.dim) if i != k))
        cdf = np.cumsum(marg) / marg.sum()
        nodes = ax.nodes
        lo = np.interp(tail, cdf, nodes)
        hi = np.interp(1 - tail, cdf, nodes)
        out[k] = max(abs(lo), abs(hi))
    return out


def probe_axes(d: LogConcaveDensity, count: int = 40, z: float = 3.5):
    """Source and target grids for the (alpha, beta) pair.

    Each axis spans the symmetric range holding the marginal up to the
    Gaussian two-sided ``z`` tail, so for quadratics the grids are
    ``+-z sigma_i`` and ``+-z sqrt(H_ii)`` and are images of each other.
    """
    tail = 0.5 * math.erfc(z / math.sqrt(2))
    hs = _quantile_halfwidths(d.psi, tail)
    hd = _quantile_halfwidths(d.conjugate, tail)
    src = tuple(Axis(-w, w, count) for w in hs)
    dst = tuple(Axis(-w, w, count) for w in hd)
    return src, dst


def linearity_probe(spec: FunctionSpec, *, count: int = 40, z: float = 3.5,
                    size_cap: int = DEFAULT_SIZE_CAP, seed: int = 0) -> ProbeResult:
    """Discretize (alpha, beta), solve exact OT, fit a linear map to the Brenier samples."""
    d = LogConcaveDensity.from_spec(spec)
    src_axes, dst_axes = probe_axes(d, count, z)
    if count ** d.dim > size_cap:
        raise SizeCapError(f"{count}^{d.dim} atoms exceed the cap {size_cap}")
    src = discretize(d, src_axes)
    dst = discretize_field(dst_axes, dual_log_density(d, dst_axes))
    plan = solve_quadratic_ot(src, dst, size_cap=size_cap)
    samples = brenier_map(plan, seed=seed)
    A_hat, res = linear_map_fit(samples)
    gap = plan.potentials.duality_gap / (1 + abs(plan.total_cost))
    sq = {f"x{k + 1}^2": (lambda Y, k=k: Y[:, k] ** 2) for k in range(d.dim)}
    _, table = pushforward_check(samples, src, dst, sq)
    rel = max(table[name] / dst.expectation(g) for name, g in sq.items())
    return ProbeResult(A_hat, res, gap, rel, plan, samples)
