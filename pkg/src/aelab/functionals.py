"""Scalar functionals of log-concave densities ``exp(-psi)``.

Every integral is a tensor trapezoid sum over the truncated box of the
density's grid.  Integrands built from the differentials of ``psi`` are
assembled in the log domain through

    log_arg(x) = 2 psi(x) - <grad psi(x), x> + log det D^2 psi(x),

the logarithm of the argument of the divergence functional.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import optimize
from scipy.special import erfcinv

from .errors import (BarycenterError, CurvatureError, DivergentIntegralError, DomainError,
                     LegendreDomainError, NotNormalizedError, OptimizerError, TruncationError)
from .grid import (DEFAULT_TAIL_BUDGET, Axis, FunctionSpec, GridFunction, gaussian_tail_bound,
                   gradient_field, hessian_field, integrate, legendre_transform, mesh,
                   tail_halfwidth, trapezoid_weights)

log = logging.getLogger(__name__)

NORMALIZED_TOL = 1e-6
HEAVY_REL = 1e-6          # heavy node: weight >= HEAVY_REL * max weight
DROP_NODE_REL = 1e-9      # det <= 0 tolerated below this share of the mass per node
DROP_TOTAL_REL = 1e-6     # ... and below this share in total
INTEGRAND_BUDGET = 1e-4   # tail budget for integrands other than the density itself
BARYCENTER_TOL = 1e-6

DEFAULT_H = {1: 0.02, 2: 0.1}
DEFAULT_COUNT_3D = 97


# --------------------------------------------------------------------------
# Densities
# --------------------------------------------------------------------------

def auto_axes(spec: FunctionSpec, budget: float = DEFAULT_TAIL_BUDGET, h: float | None = None,
              count: int | None = None) -> tuple:
    """Box around the minimizer of ``spec`` keeping the exp(-psi) tail within budget."""
    n = spec.dim
    hw = tail_halfwidth(spec, budget)
    s = spec.center
    if n == 3 and h is None and count is None:
        count = DEFAULT_COUNT_3D
    if h is None and count is None:
        h = DEFAULT_H[n]
    return tuple(Axis.centered(s[k], hw[k], h=h, count=count) for k in range(n))


@dataclass(frozen=True, eq=False)
class LogConcaveDensity:
    """The measure ``exp(-psi) dx`` for a convex grid function ``psi``.

    Mass, barycenter, conjugate and differential fields are computed lazily
    and cached; the object is otherwise immutable.
    """

    psi: GridFunction
    budget: float = DEFAULT_TAIL_BUDGET

    def __post_init__(self):
        if not self.psi.convex:
            raise ValueError("psi must be convex-flagged")

    @classmethod
    def from_spec(cls, spec: FunctionSpec, *, h: float | None = None, count: int | None = None,
                  budget: float = DEFAULT_TAIL_BUDGET, axes=None) -> "LogConcaveDensity":
        axes = auto_axes(spec, budget, h, count) if axes is None else tuple(axes)
        return cls(GridFunction.from_spec(spec, axes), budget)

    @property
    def dim(self) -> int:
        return self.psi.dim

    @property
    def spec(self) -> FunctionSpec | None:
        return self.psi.spec

    @cached_property
    def _weights(self):
        """Relative weights exp(-(psi - min psi)) and the shift min psi."""
        v = self.psi.values
        m = float(v[np.isfinite(v)].min())
        with np.errstate(over="ignore"):
            w = np.exp(-(v - m))
        return w, m

    @cached_property
    def mass(self) -> float:
        w, m = self._weights
        spec = self.spec
        H = spec.lower_hessian() if spec is not None else None
        certified = H is not None and np.linalg.eigvalsh(H).min() > 0
        if certified:
            # the closed-form Gaussian comparison replaces the heuristic face estimate
            bound = gaussian_tail_bound(spec, self.psi.axes)
            if bound > self.budget * (1 + 1e-9):
                raise TruncationError(f"Gaussian tail bound {bound:.3g} exceeds budget {self.budget:.3g}")
        q = integrate(self.psi.axes, w, budget=self.budget, check_tail=not certified)
        mass = q.value * math.exp(-m)
        if not (mass > 0 and math.isfinite(mass)):
            raise TruncationError(f"mass is not positive and finite: {mass}")
        return mass

    @property
    def normalized(self) -> bool:
        return abs(self.mass - 1) <= NORMALIZED_TOL

    @cached_property
    def barycenter(self) -> np.ndarray:
        w, m = self._weights
        X = self.psi.points()
        tot = integrate(self.psi.axes, w, check_tail=False).value
        out = np.empty(self.dim)
        for k in range(self.dim):
            out[k] = integrate(self.psi.axes, w * X[..., k], check_tail=False).value / tot
        return out

    def normalize(self) -> "LogConcaveDensity":
        """Add log(mass) to psi so that the mass is 1."""
        return LogConcaveDensity(self.psi.plus_constant(math.log(self.mass)), self.budget)

    def translated(self, v) -> "LogConcaveDensity":
        return LogConcaveDensity(self.psi.translated(v), self.budget)

    def recenter(self) -> "LogConcaveDensity":
        """Translate psi so that the barycenter sits at the origin."""
        b = self.barycenter
        if np.all(np.abs(b) <= BARYCENTER_TOL * 1e-3):
            return self
        return self.translated(-b)

    # -- conjugate ------------------------------------------------------

    @cached_property
    def conjugate(self) -> GridFunction:
        """``psi*`` on a dual box whose exp(-psi*) tail is within budget."""
        return _conjugate_for(self)

    @cached_property
    def dual_mass(self) -> float:
        """``int exp(-psi*) dy``."""
        star = self.conjugate
        v = star.values
        m = float(v[np.isfinite(v)].min())
        w = np.where(np.isfinite(v), np.exp(-(v - m)), 0.0)
        return integrate(star.axes, w, budget=self.budget).value * math.exp(-m)

    # -- differential fields --------------------------------------------

    @cached_property
    def fields(self) -> "_Fields":
        return _build_fields(self)


@dataclass(frozen=True)
class _Fields:
    axes: tuple
    psi: np.ndarray
    log_arg: np.ndarray      # -inf on dropped nodes
    logdet: np.ndarray
    xgrad: np.ndarray        # <grad psi(x), x>
    keep: np.ndarray
    dropped: int
    analytic_t: float | None  # quartic weight when closed form, else None


def _build_fields(d: LogConcaveDensity) -> _Fields:
    f = d.psi
    spec = f.spec
    if spec is not None and spec.analytic:
        axes = f.axes
        X = f.points()
        psi = f.values
        g = spec.gradient(X)
        sign, logdet = np.linalg.slogdet(spec.hessian(X))
        det_ok = sign > 0
        t = spec._quadratic_part()[1]
    else:
        sl = tuple(slice(1, -1) for _ in range(f.dim))
        axes = tuple(Axis(a.lo + a.h, a.hi - a.h, a.count - 2) for a in f.axes)
        X = f.points()[sl]
        psi = f.values[sl]
        g = gradient_field(f)[sl]
        H = hessian_field(f)[sl]
        Hn = np.nan_to_num(H)
        sign, logdet = np.linalg.slogdet(Hn)
        det_ok = (sign > 0) & np.isfinite(H).all(axis=(-1, -2))
        t = None
    finite = np.isfinite(psi)
    m = float(psi[finite].min())
    with np.errstate(over="ignore", invalid="ignore"):
        w = np.where(finite, np.exp(-(psi - m)), 0.0)
    tot = w.sum()
    bad = finite & ~det_ok
    if bad.any():
        wb = w[bad]
        if wb.max() >= DROP_NODE_REL * tot:
            idx = np.argwhere(bad)[int(np.argmax(wb))]
            raise CurvatureError(f"Hessian determinant <= 0 on a heavy node {tuple(idx)}")
        if wb.sum() > DROP_TOTAL_REL * tot:
            raise CurvatureError(f"dropped weight {wb.sum() / tot:.3g} exceeds {DROP_TOTAL_REL}")
        log.warning("dropped %d nodes with non-positive Hessian determinant", int(bad.sum()))
    keep = finite & det_ok
    xg = np.einsum("...i,...i->...", g, X)
    with np.errstate(invalid="ignore"):
        log_arg = np.where(keep, 2 * psi - xg + np.where(keep, logdet, 0.0), -np.inf)
    return _Fields(axes, psi, log_arg, np.where(keep, logdet, np.nan), xg, keep,
                   int(bad.sum()), t)


def _exp_integral(d: LogConcaveDensity, a: float, b: float, budget: float = INTEGRAND_BUDGET) -> float:
    """``int exp(a * log_arg + b * psi) dx`` over kept nodes, ``+inf`` when divergent."""
    F = d.fields
    if F.analytic_t is not None:
        # quartic coefficient of the exponent: a * (-t/2) + b * (t/4); quadratic part b/2
        lead = F.analytic_t * (-a / 2 + b / 4)
        if lead > 0 or (lead == 0 and b >= 0):
            return math.inf
    with np.errstate(invalid="ignore"):
        e = np.where(F.keep, a * F.log_arg + b * F.psi, -np.inf)
    m = float(e[np.isfinite(e)].max())
    v = np.exp(e - m)
    try:
        q = integrate(F.axes, v, budget=budget)
    except DivergentIntegralError:
        return math.inf
    with np.errstate(over="ignore"):
        return float(q.value * math.exp(m)) if m < 700 else math.inf


def _signed_integral(d: LogConcaveDensity, g: np.ndarray, budget: float = INTEGRAND_BUDGET) -> float:
    """``int g exp(-psi) dx`` over kept nodes for a finite field ``g``."""
    F = d.fields
    m = float(F.psi[np.isfinite(F.psi)].min())
    w = np.where(F.keep, np.exp(-(F.psi - m)), 0.0)
    vals = np.where(F.keep, g, 0.0) * w
    scale = float(np.sum((np.abs(vals) + w) * trapezoid_weights(F.axes)))
    return integrate(F.axes, vals, budget=budget, scale=scale).value * math.exp(-m)


def _mu_mass(d: LogConcaveDensity) -> float:
    """Mass on the node set used for differential integrands."""
    return _exp_integral(d, 0.0, -1.0, budget=d.budget)


# --------------------------------------------------------------------------
# Conjugate with automatic dual box
# --------------------------------------------------------------------------

def _hessian_at(d: LogConcaveDensity, x) -> np.ndarray:
    spec = d.spec
    if spec is not None and spec.analytic:
        return spec.hessian(np.asarray(x, float))
    H = hessian_field(d.psi)
    idx = tuple(int(round((xk - a.lo) / a.h)) for xk, a in zip(x, d.psi.axes))
    return np.nan_to_num(H[idx])


def _gradient_at(d: LogConcaveDensity, x) -> np.ndarray:
    spec = d.spec
    if spec is not None and spec.analytic:
        return spec.gradient(np.asarray(x, float))
    g = gradient_field(d.psi)
    idx = tuple(int(round((xk - a.lo) / a.h)) for xk, a in zip(x, d.psi.axes))
    return np.nan_to_num(g[idx])


def _coverage_ok(src_axes, star: GridFunction, budget: float) -> np.ndarray:
    """Per-axis flag: grad psi* on non-negligible dual nodes stays inside the source box."""
    v = star.values
    fin = np.isfinite(v)
    m = float(v[fin].min())
    w = np.where(fin, np.exp(-(v - m)), 0.0)
    heavy = w >= budget * 1e-3 * w.max()
    ok = np.ones(star.dim, dtype=bool)
    for k, (a, sa) in enumerate(zip(star.axes, src_axes)):
        gk = np.gradient(v, a.h, axis=k)
        gk = gk[heavy & np.isfinite(gk)]
        if gk.size and (gk.min() < sa.lo + sa.h or gk.max() > sa.hi - sa.h):
            ok[k] = False
    return ok


def _conjugate_for(d: LogConcaveDensity) -> GridFunction:
    f = d.psi
    n = f.dim
    spec = d.spec
    origin = np.zeros(n)
    inside = all(a.lo < 0 < a.hi for a in f.axes)
    if not inside:
        raise DomainError("the origin must lie inside the grid to place the dual box")
    y0 = _gradient_at(d, origin)
    H0 = _hessian_at(d, origin)
    z = math.sqrt(2) * float(erfcinv(d.budget / n))
    diag = np.sqrt(np.clip(np.diag(H0), 0, None))
    Ly = z * diag
    if np.any(Ly <= 0):
        fin = np.isfinite(f.values)
        for k in range(n):
            if Ly[k] <= 0:
                sl = np.diff(f.values, axis=k) / f.axes[k].h
                Ly[k] = 0.5 * float(np.abs(sl[np.isfinite(sl)]).max())
    hy = np.array([a.h for a in f.axes])
    src = f
    src_scale = np.ones(n)
    for _ in range(16):
        dual_axes = tuple(Axis.centered(y0[k], Ly[k], count=max(f.axes[k].count,
                                                                  int(math.ceil(2 * Ly[k] / hy[k])) + 1))
                          for k in range(n))
        star = legendre_transform(src, dual_axes, refine=True)
        ok = _coverage_ok(src.axes, star, d.budget)
        if not ok.all():
            if spec is None or spec.variant == "tabulated":
                raise LegendreDomainError("the dual box needs gradients beyond the sampled domain")
            src_scale = np.where(ok, src_scale, src_scale * 1.3)
            axes = tuple(Axis.centered(0.5 * (a.lo + a.hi), 0.5 * (a.hi - a.lo) * s, h=a.h)
                         for a, s in zip(f.axes, src_scale))
            src = GridFunction.from_spec(spec, axes)
            continue
        v = star.values
        fin = np.isfinite(v)
        mn = float(v[fin].min())
        w = np.where(fin, np.exp(-(v - mn)), 0.0)
        try:
            integrate(star.axes, w, budget=d.budget)
            return star
        except TruncationError:
            Ly = Ly * 1.4
    raise TruncationError("could not find a dual box holding the exp(-psi*) mass")


# --------------------------------------------------------------------------
# Entropy, log-Sobolev, divergence
# --------------------------------------------------------------------------

def total_mass(d: LogConcaveDensity) -> float:
    return d.mass


def barycenter(d: LogConcaveDensity) -> np.ndarray:
    return d.barycenter.copy()


def recenter(d: LogConcaveDensity) -> LogConcaveDensity:
    return d.recenter()


def _require_normalized(d):
    if not d.normalized:
        raise NotNormalizedError(f"density has mass {d.mass:.9g}, normalize first")


def shannon_entropy(d: LogConcaveDensity) -> float:
    """``S(mu) = int psi dmu`` for a normalized density."""
    _require_normalized(d)
    w, m = d._weights
    psi = np.where(d.psi.finite, d.psi.values, 0.0)
    vals = psi * w
    scale = float(np.sum((np.abs(vals) + w) * trapezoid_weights(d.psi.axes)))
    return integrate(d.psi.axes, vals, budget=INTEGRAND_BUDGET, scale=scale).value * math.exp(-m)


def gaussian_entropy(n: int) -> float:
    return 0.5 * n * math.log(2 * math.pi * math.e)


def reverse_logsobolev_sides(d: LogConcaveDensity) -> tuple[float, float]:
    """``(int log det D^2 psi dmu, 2 (S(gamma_n) - S(mu)))``; expected lhs <= rhs."""
    _require_normalized(d)
    F = d.fields
    lhs = _signed_integral(d, np.where(F.keep, F.logdet, 0.0))
    rhs = 2 * (gaussian_entropy(d.dim) - shannon_entropy(d))
    return lhs, rhs


DIVERGENCE_VARIANTS = ("log", "power", "linear", "neg_reciprocal")


@dataclass(frozen=True)
class DivergenceSpec:
    """A closed-form function f on (0, inf) with its shape and monotonicity tags.

    Tags are derived when omitted and validated when given.  An affine f is
    both concave and convex, so either shape tag is accepted for it.
    """

    variant: str
    lam: float | None = None
    a: float | None = None
    b: float | None = None
    shape: str | None = None
    monotonicity: str | None = None

    def __post_init__(self):
        if self.variant not in DIVERGENCE_VARIANTS:
            raise ValueError(f"unknown divergence variant {self.variant!r}")
        if self.variant == "power" and self.lam is None:
            raise ValueError("power variant needs lambda")
        if self.variant == "linear":
            object.__setattr__(self, "a", 1.0 if self.a is None else float(self.a))
            object.__setattr__(self, "b", 0.0 if self.b is None else float(self.b))
        shapes = self._shapes()
        mono = self._monotonicity()
        if self.shape is None:
            object.__setattr__(self, "shape", shapes[0])
        elif self.shape not in shapes:
            raise ValueError(f"shape tag {self.shape!r} does not match {self.describe()}")
        if self.monotonicity is None:
            object.__setattr__(self, "monotonicity", mono)
        elif self.monotonicity != mono:
            raise ValueError(f"monotonicity tag {self.monotonicity!r} does not match {self.describe()}")

    def describe(self) -> str:
        if self.variant == "power":
            return f"power({self.lam})"
        if self.variant == "linear":
            return f"linear({self.a}, {self.b})"
        return self.variant

    @property
    def is_linear(self) -> bool:
        return self.variant == "linear" or (self.variant == "power" and self.lam in (0.0, 1.0))

    def _shapes(self):
        if self.is_linear:
            return ("concave", "convex")
        if self.variant in ("log", "neg_reciprocal"):
            return ("concave",)
        return ("concave",) if 0 <= self.lam <= 1 else ("convex",)

    def _monotonicity(self):
        if self.variant in ("log", "neg_reciprocal"):
            return "increasing"
        c = self.lam if self.variant == "power" else self.a
        return "increasing" if c > 0 else "decreasing" if c < 0 else "neither"

    @property
    def relation(self) -> str:
        """Expected relation of (lhs, rhs): 'eq', 'le' or 'ge'."""
        if self.is_linear:
            return "eq"
        return "le" if self.shape == "concave" else "ge"

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        if self.variant == "log":
            return np.log(s)
        if self.variant == "power":
            return s ** self.lam
        if self.variant == "linear":
            return self.a * s + self.b
        return -1.0 / s

    def sensitivity(self, s: float) -> float:
        """``|s f'(s)|``: change of f(s) per unit relative change of s."""
        if self.variant == "log":
            return 1.0
        if self.variant == "power":
            return abs(self.lam) * s ** self.lam
        if self.variant == "linear":
            return abs(self.a) * s
        return 1.0 / s

    def to_json(self) -> dict:
        d = {"f": self.variant}
        if self.variant == "power":
            d["lambda"] = self.lam
        if self.variant == "linear":
            d["a"], d["b"] = self.a, self.b
        return d

    @classmethod
    def from_json(cls, d: dict) -> "DivergenceSpec":
        lam = d.get("lambda")
        return cls(d["f"], lam=None if lam is None else float(lam), a=d.get("a"), b=d.get("b"))


def divergence_sides(f: DivergenceSpec, d: LogConcaveDensity) -> tuple[float, float]:
    """``lhs = int f(arg) dmu`` and ``rhs = f(int exp(-psi*) / int dmu) int dmu``.

    ``arg = exp(2 psi - <grad psi, x>) det D^2 psi``.  A divergent lhs is
    reported as a signed infinity.
    """
    F = d.fields
    mass = _mu_mass(d)
    if f.variant == "log":
        lhs = _signed_integral(d, np.where(F.keep, F.log_arg, 0.0))
    elif f.variant == "power":
        lhs = _exp_integral(d, f.lam, -1.0)
    elif f.variant == "linear":
        lhs = f.a * _exp_integral(d, 1.0, -1.0) + f.b * mass
    else:
        lhs = -_exp_integral(d, -1.0, -1.0)
    rhs = float(f(d.dual_mass / mass)) * mass
    return float(lhs), rhs


def divergence_scale(f: DivergenceSpec, d: LogConcaveDensity, rhs: float) -> float:
    """Magnitude against which ``lhs - rhs`` is judged.

    ``max(|rhs|, mass * |r f'(r)|)`` with ``r = int exp(-psi*) / mass``: the
    second term is the first-order response of rhs to a relative quadrature
    error in r, which keeps the test meaningful where f(r) = 0 (log at r = 1).
    """
    mass = d.mass
    r = d.dual_mass / mass
    return max(abs(rhs), mass * f.sensitivity(r))


def intvc_sides(d: LogConcaveDensity) -> tuple[float, float]:
    """``(int exp(-psi*), int exp(psi - <grad psi, x>) det D^2 psi)``; equal by change of variables."""
    return d.dual_mass, _exp_integral(d, 1.0, -1.0)


def identity_intvc_residual(d: LogConcaveDensity) -> float:
    """Relative gap between the two sides of :func:`intvc_sides`."""
    first, second = intvc_sides(d)
    return abs(first - second) / abs(first)


def santalo_product_functional(d: LogConcaveDensity) -> tuple[float, float]:
    """``(int exp(-psi) * int exp(-psi*), product / (2 pi)^n)`` for a centered density."""
    b = d.barycenter
    scale = max(1.0, float(np.max([a.hi - a.lo for a in d.psi.axes])))
    if np.max(np.abs(b)) > BARYCENTER_TOL * scale:
        raise BarycenterError(f"barycenter {b} is not at the origin; recenter first")
    product = d.mass * d.dual_mass
    return product, product / (2 * math.pi) ** d.dim


def affine_surface_area_lambda(d: LogConcaveDensity, lam: float) -> float:
    """``as_lambda(psi) = int exp((2 lam - 1) psi - lam <grad psi, x>) (det D^2 psi)^lam dx``.

    ``lam = 0`` is the mass and ``lam = 1`` is ``int exp(-psi*)``.
    """
    lam = float(lam)
    if lam == 0:
        return d.mass
    if lam == 1:
        return d.dual_mass
    return _exp_integral(d, lam, -1.0)


def affine_isoperimetric_sides(d: LogConcaveDensity, lam: float) -> tuple[float, float, str]:
    """``(as_lambda, (2 pi)^(n lam) mass^(1 - 2 lam), relation)``.

    The relation is 'le' for lam in [0, 1] and 'ge' for lam < 0; it is
    stated for centered densities.
    """
    if lam > 1:
        raise ValueError("the bound is stated for lambda <= 1")
    lhs = affine_surface_area_lambda(d, lam)
    rhs = (2 * math.pi) ** (d.dim * lam) * d.mass ** (1 - 2 * lam)
    return lhs, rhs, ("le" if lam >= 0 else "ge")


def quadratic_as_lambda(A, lam: float, c: float = 0.0) -> float:
    """Closed form of as_lambda for ``1/2 <Ax, x> + c``."""
    A = np.atleast_2d(A)
    n = A.shape[0]
    return float(np.linalg.det(A)) ** (lam - 0.5) * (2 * math.pi) ** (n / 2) * math.exp((2 * lam - 1) * c)


def monge_ampere_residual(d: LogConcaveDensity) -> tuple[float, float]:
    """Sup and mu-weighted L1 norms of ``det D^2 psi - C exp(-2 psi + <grad psi, x>)``.

    ``C = int exp(-psi*) / int exp(-psi)``; the sup runs over heavy nodes.
    """
    F = d.fields
    C = d.dual_mass / _mu_mass(d)
    with np.errstate(over="ignore", invalid="ignore"):
        res = np.exp(F.logdet) - C * np.exp(-2 * F.psi + F.xgrad)
    m = float(F.psi[F.keep].min())
    w = np.where(F.keep, np.exp(-(F.psi - m)), 0.0)
    heavy = F.keep & (w >= HEAVY_REL * w.max())
    r = np.abs(res[heavy])
    sup = float(np.max(r)) if np.all(np.isfinite(r)) else math.inf
    rfin = np.where(heavy & np.isfinite(res), np.abs(res), 0.0)
    l1 = integrate(F.axes, rfin * w, check_tail=False).value / integrate(F.axes, w, check_tail=False).value
    if not np.all(np.isfinite(r)):
        l1 = math.inf
    return sup, float(l1)


# --------------------------------------------------------------------------
# Quadratic fit distance
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class StabilityReport:
    epsilon_gap: float
    fitted_A: np.ndarray
    fitted_c: float
    radius_R: float
    delta_L1: float

    def __post_init__(self):
        if self.delta_L1 < 0 or self.radius_R <= 0:
            raise ValueError("invalid stability report")
        if np.linalg.eigvalsh(self.fitted_A).min() <= 0:
            raise ValueError("fitted A must be positive definite")


def ball_quadrature(n: int, R: float, nr: int = 48, nt: int = 96):
    """Nodes and weights integrating over the centered ball of radius R (n = 1, 2)."""
    r, wr = np.polynomial.legendre.leggauss(nr)
    if n == 1:
        return (R * r)[:, None], R * wr
    if n != 2:
        raise ValueError("ball quadrature is implemented for n <= 2")
    rr = 0.5 * R * (r + 1)
    wrr = 0.5 * R * wr * rr
    th = 2 * math.pi * np.arange(nt) / nt
    P = np.stack([np.outer(rr, np.cos(th)), np.outer(rr, np.sin(th))], axis=-1).reshape(-1, 2)
    W = np.outer(wrr, np.full(nt, 2 * math.pi / nt)).ravel()
    return P, W


def _unpack(theta, n):
    L = np.zeros((n, n))
    L[np.tril_indices(n)] = theta[:-1]
    return L @ L.T, theta[-1]


def _pack(A, c):
    L = np.linalg.cholesky(A)
    return np.concatenate([L[np.tril_indices(A.shape[0])], [c]])


def _coordinate_search(obj, theta0, step0, floor=1e-6, max_sweeps=400):
    theta = theta0.copy()
    best = obj(theta)
    step = step0
    sweeps = 0
    while step >= floor and sweeps < max_sweeps:
        sweeps += 1
        improved = False
        for i in range(len(theta)):
            def g(s, i=i):
                th = theta.copy()
                th[i] = s
                return obj(th)
            r = optimize.minimize_scalar(g, bounds=(theta[i] - step, theta[i] + step),
                                         method="bounded", options={"xatol": floor * 1e-2})
            if r.fun < best - 1e-14 * max(1.0, abs(best)):
                theta[i] = r.x
                best = r.fun
                improved = True
        if not improved:
            step *= 0.5
    return theta, best


def quadratic_fit_distance(d: LogConcaveDensity, R: float = 2.0, *, restarts: int = 3,
                           epsilon_gap: float | None = None) -> StabilityReport:
    """Best fit of ``1/2 |x|^2 + c`` by ``psi(A x)`` in L1 over the ball of radius R.

    The density is recentered first, so the fit compares shapes rather than
    positions.  ``A`` ranges over positive-definite matrices through its
    Cholesky factor.  ``epsilon_gap`` defaults to ``1 - `` the functional
    Santalo ratio.
    """
    n = d.dim
    if n > 2:
        raise ValueError("quadratic_fit_distance supports n <= 2")
    dc = d.recenter()
    P, W = ball_quadrature(n, R)
    half = 0.5 * np.einsum("ij,ij->i", P, P)
    f = dc.psi

    def psi_at(Y):
        return f.evaluate(Y)

    def delta(theta):
        A, c = _unpack(theta, n)
        if np.linalg.eigvalsh(A).min() <= 1e-10:
            return math.inf
        try:
            v = psi_at(P @ A.T)
        except DomainError:
            return math.inf
        return float(np.sum(W * np.abs(half + c - v)))

    H0 = _hessian_at(dc, np.zeros(n))
    ev, Q = np.linalg.eigh(H0)
    if ev.min() <= 1e-8:
        A0 = np.eye(n)
    else:
        A0 = (Q / np.sqrt(ev)) @ Q.T
    c0 = float(psi_at(np.zeros((1, n)))[0])
    theta0 = _pack(A0, c0)
    if not math.isfinite(delta(theta0)):
        raise DomainError("psi(A0 x) leaves the grid on the fitting ball")
    best_theta, best = _coordinate_search(delta, theta0, 0.25)
    rng_scales = (1.1, 0.9, 1.05)
    for k in range(restarts):
        th = best_theta.copy()
        th[:-1] *= rng_scales[k % len(rng_scales)]
        th2, val = _coordinate_search(delta, th, 0.1)
        if val < best:
            best_theta, best = th2, val
    if not math.isfinite(best):
        raise OptimizerError("quadratic fit did not reach a finite objective")
    A, c = _unpack(best_theta, n)
    if epsilon_gap is None:
        epsilon_gap = 1.0 - santalo_product_functional(dc)[1]
    return StabilityReport(float(epsilon_gap), A, float(c), float(R), float(best))


# --------------------------------------------------------------------------
# Records
# --------------------------------------------------------------------------

def _json_number(x):
    x = float(x)
    if math.isfinite(x):
        return x
    return "inf" if x > 0 else "-inf" if x < 0 else "nan"


def record(functional: str, instance_id, lhs, rhs, tolerance: float, **extra) -> dict:
    """A JSON-ready result record; non-finite numbers are written as strings."""
    gap = rhs - lhs if math.isfinite(lhs) or math.isfinite(rhs) else math.nan
    if math.isinf(lhs) and math.isinf(rhs):
        gap = math.nan
    out = {"functional": functional, "instance_id": instance_id, "lhs": _json_number(lhs),
           "rhs": _json_number(rhs), "gap": _json_number(gap), "tolerance": tolerance}
    out.update(extra)
    return out


def dumps_records(records) -> str:
    return json.dumps(records, indent=1, sort_keys=False)
