"""Convex functions sampled on uniform box grids.

The central object is :class:`GridFunction`, an extended-real array on a
tensor-product grid (``+inf`` marks nodes outside the effective domain).
Analytic provenance is carried by a :class:`FunctionSpec`; when present,
differentials and tail bounds are taken from closed forms instead of the
samples.

Conjugation is dimension-wise: the supremum over a box factorizes into a
sequence of one-dimensional conjugations, each computed either by a direct
O(N*M) scan or by the linear-time lower-hull / monotone-slope scan.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numba
import numpy as np
from scipy import ndimage
from scipy.interpolate import RegularGridInterpolator
from scipy.special import erfcinv

from .errors import ConvexityError, DomainError, StencilError, TruncationError, DivergentIntegralError

MIN_COUNT = 33
CONVEXITY_RTOL = 1e-9
DEFAULT_TAIL_BUDGET = 1e-6


# --------------------------------------------------------------------------
# Axes
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Axis:
    lo: float
    hi: float
    count: int

    def __post_init__(self):
        object.__setattr__(self, "lo", float(self.lo))
        object.__setattr__(self, "hi", float(self.hi))
        object.__setattr__(self, "count", int(self.count))
        if not self.hi > self.lo:
            raise ValueError(f"axis needs hi > lo, got [{self.lo}, {self.hi}]")
        if self.count < 2:
            raise ValueError("axis needs at least two nodes")

    @property
    def h(self) -> float:
        return (self.hi - self.lo) / (self.count - 1)

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.count)

    def shifted(self, offset: float) -> "Axis":
        return Axis(self.lo + offset, self.hi + offset, self.count)

    def to_json(self) -> dict:
        return {"min": self.lo, "max": self.hi, "count": self.count}

    @classmethod
    def from_json(cls, d: dict) -> "Axis":
        return cls(float(d["min"]), float(d["max"]), int(d["count"]))

    @classmethod
    def centered(cls, center: float, half_width: float, h: float | None = None,
                 count: int | None = None) -> "Axis":
        """Axis ``[center - half_width, center + half_width]`` with spacing about ``h``."""
        if count is None:
            count = max(MIN_COUNT, int(math.ceil(2 * half_width / h)) + 1)
        return cls(center - half_width, center + half_width, count)


def mesh(axes: Sequence[Axis]) -> np.ndarray:
    """Node coordinates, shape ``(*shape, n)``."""
    grids = np.meshgrid(*[a.nodes for a in axes], indexing="ij")
    return np.stack(grids, axis=-1)


def trapezoid_weights(axes: Sequence[Axis]) -> np.ndarray:
    """Tensor-product trapezoid weights with the grid's shape."""
    w = None
    for a in axes:
        wa = np.full(a.count, a.h)
        wa[0] = wa[-1] = a.h / 2
        w = wa if w is None else np.multiply.outer(w, wa)
    return w


# --------------------------------------------------------------------------
# Closed-form function descriptions
# --------------------------------------------------------------------------

VARIANTS = ("quadratic", "quartic_perturbed", "gauge_square", "tabulated")


@dataclass(frozen=True, eq=False)
class FunctionSpec:
    """Tagged description of a convex function.

    ``quadratic``          psi(x) = 1/2 <A z, z> + c
    ``quartic_perturbed``  psi(x) = 1/2 <A z, z> + t/4 |z|^4 + c
    ``gauge_square``       psi(x) = ||z||_K^2 / 2 + c
    ``tabulated``          sampled values only

    where ``z = linear @ (x - shift)``.  ``linear`` defaults to the identity
    and ``shift`` to the origin; both exist so that translations and linear
    pre-compositions stay in closed form.
    """

    variant: str
    A: np.ndarray | None = None
    c: float = 0.0
    t: float = 0.0
    shift: np.ndarray | None = None
    linear: np.ndarray | None = None
    body: object | None = None
    dim_hint: int | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant in ("quadratic", "quartic_perturbed"):
            A = np.atleast_2d(np.asarray(self.A, dtype=float))
            if A.shape[0] != A.shape[1] or not np.allclose(A, A.T, atol=1e-12):
                raise ValueError("A must be a symmetric square matrix")
            eig = np.linalg.eigvalsh(A)
            if self.variant == "quadratic" and eig.min() <= 1e-12:
                raise ValueError("quadratic variant requires positive-definite A")
            if self.variant == "quartic_perturbed":
                if self.t < 0:
                    raise ValueError("quartic perturbation weight t must be >= 0")
                if eig.min() < -1e-12 or (eig.min() <= 1e-12 and self.t == 0):
                    raise ValueError("quartic_perturbed needs A >= 0 and t > 0 when A is singular")
            object.__setattr__(self, "A", A)
        if self.variant == "gauge_square" and self.body is None:
            raise ValueError("gauge_square needs a body")
        n = self.dim
        if self.shift is not None:
            object.__setattr__(self, "shift", np.asarray(self.shift, dtype=float).reshape(n))
        if self.linear is not None:
            L = np.atleast_2d(np.asarray(self.linear, dtype=float))
            if L.shape != (n, n) or abs(np.linalg.det(L)) < 1e-14:
                raise ValueError("linear pre-composition must be an invertible n x n matrix")
            object.__setattr__(self, "linear", L)

    # -- constructors -----------------------------------------------------

    @classmethod
    def quadratic(cls, A, c: float = 0.0, shift=None) -> "FunctionSpec":
        return cls("quadratic", A=A, c=float(c), shift=shift)

    @classmethod
    def quartic(cls, A, t: float, c: float = 0.0, shift=None) -> "FunctionSpec":
        return cls("quartic_perturbed", A=A, t=float(t), c=float(c), shift=shift)

    @classmethod
    def gauge_square(cls, body, c: float = 0.0) -> "FunctionSpec":
        return cls("gauge_square", body=body, c=float(c))

    # -- structure --------------------------------------------------------

    @property
    def dim(self) -> int:
        if self.A is not None:
            return int(np.atleast_2d(self.A).shape[0])
        if self.body is not None:
            return int(self.body.dim)
        if self.dim_hint is None:
            raise ValueError("tabulated spec needs dim_hint")
        return self.dim_hint

    @property
    def center(self) -> np.ndarray:
        return np.zeros(self.dim) if self.shift is None else self.shift

    @property
    def L(self) -> np.ndarray:
        return np.eye(self.dim) if self.linear is None else self.linear

    def _quadratic_part(self):
        if self.variant in ("quadratic", "quartic_perturbed"):
            return self.A, self.t
        if self.variant == "gauge_square" and getattr(self.body, "variant", None) == "ellipsoid":
            return self.body.M, 0.0
        return None

    @property
    def analytic(self) -> bool:
        """True when value, gradient and Hessian are available in closed form."""
        return self._quadratic_part() is not None

    def lower_hessian(self) -> np.ndarray | None:
        """Hessian of the quadratic part in x-coordinates, a global lower bound."""
        qp = self._quadratic_part()
        if qp is None:
            return None
        L = self.L
        return L.T @ qp[0] @ L

    def with_changes(self, **kw) -> "FunctionSpec":
        d = dict(variant=self.variant, A=self.A, c=self.c, t=self.t, shift=self.shift,
                 linear=self.linear, body=self.body, dim_hint=self.dim_hint)
        d.update(kw)
        return FunctionSpec(**d)

    # -- evaluation -------------------------------------------------------

    def _z(self, x):
        x = np.asarray(x, dtype=float)
        z = x - self.center
        if self.linear is not None:
            z = z @ self.linear.T
        return z

    def value(self, x) -> np.ndarray:
        z = self._z(x)
        qp = self._quadratic_part()
        if qp is not None:
            A, t = qp
            q = np.einsum("...i,ij,...j->...", z, A, z)
            out = 0.5 * q + self.c
            if t:
                out = out + 0.25 * t * np.einsum("...i,...i->...", z, z) ** 2
            return out
        if self.variant == "gauge_square":
            return 0.5 * self.body.gauge(z) ** 2 + self.c
        raise ValueError("tabulated spec has no closed-form value")

    def gradient(self, x) -> np.ndarray:
        qp = self._quadratic_part()
        if qp is None:
            raise ValueError(f"no closed-form gradient for {self.variant}")
        A, t = qp
        z = self._z(x)
        g = z @ A.T
        if t:
            g = g + t * np.einsum("...i,...i->...", z, z)[..., None] * z
        return g @ self.L

    def hessian(self, x) -> np.ndarray:
        qp = self._quadratic_part()
        if qp is None:
            raise ValueError(f"no closed-form Hessian for {self.variant}")
        A, t = qp
        z = self._z(x)
        n = self.dim
        H = np.broadcast_to(A, z.shape[:-1] + (n, n)).copy()
        if t:
            r2 = np.einsum("...i,...i->...", z, z)
            H += t * (r2[..., None, None] * np.eye(n) + 2 * z[..., :, None] * z[..., None, :])
        L = self.L
        if self.linear is not None:
            H = L.T @ H @ L
        return H

    # -- serialization ----------------------------------------------------

    def to_json(self) -> dict:
        d = {"variant": self.variant, "c": self.c}
        if self.A is not None:
            d["A"] = np.asarray(self.A).tolist()
        if self.variant == "quartic_perturbed":
            d["t"] = self.t
        if self.shift is not None:
            d["shift"] = self.shift.tolist()
        if self.linear is not None:
            d["linear"] = self.linear.tolist()
        if self.body is not None:
            d["body"] = self.body.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "FunctionSpec":
        variant = d["variant"]
        body = None
        if variant == "gauge_square":
            from .bodies import ConvexBody
            body = ConvexBody.from_json(d["body"])
        if variant == "tabulated":
            raise ValueError("tabulated specs are loaded with tabulated_from_json")
        return cls(variant, A=d.get("A"), c=float(d.get("c", 0.0)), t=float(d.get("t", 0.0)),
                   shift=d.get("shift"), linear=d.get("linear"), body=body)


# --------------------------------------------------------------------------
# GridFunction
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GridFunction:
    axes: tuple
    values: np.ndarray
    spec: FunctionSpec | None = None
    convex: bool = False

    def __post_init__(self):
        axes = tuple(self.axes)
        object.__setattr__(self, "axes", axes)
        if not 1 <= len(axes) <= 3:
            raise ValueError("grids are limited to dimensions 1, 2 and 3")
        if any(a.count < MIN_COUNT for a in axes):
            raise ValueError(f"each axis needs at least {MIN_COUNT} nodes")
        v = np.array(self.values, dtype=float)
        if v.shape != tuple(a.count for a in axes):
            raise ValueError(f"values shape {v.shape} does not match axes")
        if np.isnan(v).any() or np.isneginf(v).any():
            raise ValueError("values must be finite reals or +inf")
        fin = np.isfinite(v)
        if not fin.any():
            raise DomainError("finite domain is empty")
        _, ncomp = ndimage.label(fin)
        if ncomp != 1:
            raise DomainError("finite domain is not grid-connected")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if self.convex:
            rep = check_convexity(self)
            if not rep.is_convex:
                raise ConvexityError(f"flagged convex but midpoint violation {rep.worst_violation:.3g} at {rep.witness}")

    @classmethod
    def from_spec(cls, spec: FunctionSpec, axes: Sequence[Axis], convex: bool = True) -> "GridFunction":
        axes = tuple(axes)
        if len(axes) != spec.dim:
            raise ValueError("axes do not match the spec dimension")
        return cls(axes, spec.value(mesh(axes)), spec, convex)

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def spacing(self) -> np.ndarray:
        return np.array([a.h for a in self.axes])

    @property
    def finite(self) -> np.ndarray:
        return np.isfinite(self.values)

    def points(self) -> np.ndarray:
        return mesh(self.axes)

    def node(self, index) -> np.ndarray:
        return np.array([a.nodes[i] for a, i in zip(self.axes, index)])

    def evaluate(self, x) -> np.ndarray:
        """Values at arbitrary points: closed form if known, else multilinear interpolation."""
        x = np.asarray(x, dtype=float)
        if self.spec is not None and self.spec.variant != "tabulated":
            return self.spec.value(x)
        interp = RegularGridInterpolator([a.nodes for a in self.axes], self.values,
                                         bounds_error=True)
        try:
            return interp(x)
        except ValueError as exc:
            raise DomainError(str(exc)) from exc

    def translated(self, offset) -> "GridFunction":
        """psi(. - offset) on the grid moved by ``offset`` (values unchanged)."""
        offset = np.asarray(offset, dtype=float).reshape(self.dim)
        axes = tuple(a.shifted(o) for a, o in zip(self.axes, offset))
        spec = self.spec
        if spec is not None and spec.variant != "tabulated":
            spec = spec.with_changes(shift=spec.center + offset)
        return GridFunction(axes, self.values, spec, False if not self.convex else True)

    def plus_constant(self, c: float) -> "GridFunction":
        spec = self.spec
        if spec is not None and spec.variant != "tabulated":
            spec = spec.with_changes(c=spec.c + c)
        return GridFunction(self.axes, self.values + c, spec, self.convex)

    def with_values(self, values, convex: bool = False) -> "GridFunction":
        return GridFunction(self.axes, values, None, convex)


# --------------------------------------------------------------------------
# Convexity
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvexityReport:
    is_convex: bool
    worst_violation: float
    witness: tuple | None


def _directions(n: int):
    dirs = [tuple(int(i == k) for i in range(n)) for k in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            for s in (1, -1):
                d = [0] * n
                d[i], d[j] = 1, s
                dirs.append(tuple(d))
    return dirs


def _shift_slices(n, d, which):
    """Slices picking x - d (which=-1), x (0) or x + d (+1) over the common interior."""
    sl = []
    for k in range(n):
        dk = d[k]
        lo = abs(dk)
        stop = -abs(dk) if dk else None
        off = which * dk
        start = lo + off
        end = (stop + off) if stop is not None else None
        if end == 0:
            end = None
        sl.append(slice(start, end))
    return tuple(sl)


def check_convexity(f: GridFunction, rtol: float = CONVEXITY_RTOL) -> ConvexityReport:
    """Midpoint convexity along all axis-parallel and diagonal grid lines."""
    v = f.values
    n = v.ndim
    fin = np.isfinite(v)
    scale = max(1.0, float(np.abs(v[fin]).max()))
    tol = rtol * scale
    worst, witness = -np.inf, None
    for d in _directions(n):
        lo = v[_shift_slices(n, d, -1)]
        mid = v[_shift_slices(n, d, 0)]
        hi = v[_shift_slices(n, d, +1)]
        if mid.size == 0:
            continue
        with np.errstate(invalid="ignore"):
            chord = 0.5 * (lo + hi)
            viol = np.where(np.isfinite(chord), mid - chord, -np.inf)
        viol = np.where(np.isposinf(mid) & np.isfinite(chord), np.inf, viol)
        k = int(np.argmax(viol))
        if viol.flat[k] > worst:
            worst = float(viol.flat[k])
            idx = np.unravel_index(k, mid.shape)
            witness = tuple(int(i + abs(dd)) for i, dd in zip(idx, d))
    worst = max(worst, 0.0) if np.isfinite(worst) or worst > 0 else 0.0
    return ConvexityReport(bool(worst <= tol), worst, witness if worst > tol else None)


# --------------------------------------------------------------------------
# One-dimensional conjugation kernels
# --------------------------------------------------------------------------

@numba.njit(cache=True)
def _conj_rows_hull(x, F, y, out, arg):
    L, N = F.shape
    M = y.shape[0]
    hull = np.empty(N, np.int64)
    for r in range(L):
        k = 0
        for i in range(N):
            fi = F[r, i]
            if not np.isfinite(fi):
                continue
            while k >= 2:
                i1 = hull[k - 2]
                i2 = hull[k - 1]
                if (F[r, i2] - F[r, i1]) * (x[i] - x[i2]) >= (fi - F[r, i2]) * (x[i2] - x[i1]):
                    k -= 1
                else:
                    break
            hull[k] = i
            k += 1
        if k == 0:
            for m in range(M):
                out[r, m] = -np.inf
                arg[r, m] = -1
            continue
        j = 0
        for m in range(M):
            yy = y[m]
            while j < k - 1 and (F[r, hull[j + 1]] - F[r, hull[j]]) < yy * (x[hull[j + 1]] - x[hull[j]]):
                j += 1
            out[r, m] = x[hull[j]] * yy - F[r, hull[j]]
            arg[r, m] = hull[j]


def _conj_rows_brute(x, F, y):
    L, N = F.shape
    M = y.shape[0]
    out = np.empty((L, M))
    arg = np.empty((L, M), dtype=np.int64)
    chunk = max(1, int(4_000_000 // max(1, N * M)))
    xy = x[:, None] * y[None, :]
    for s in range(0, L, chunk):
        Fi = F[s:s + chunk]
        vals = xy[None, :, :] - np.where(np.isfinite(Fi), Fi, np.inf)[:, :, None]
        a = np.argmax(vals, axis=1)
        arg[s:s + chunk] = a
        out[s:s + chunk] = np.take_along_axis(vals, a[:, None, :], axis=1)[:, 0, :]
    allinf = ~np.isfinite(F).any(axis=1)
    arg[allinf] = -1
    return out, arg


def _refine_rows(x, F, y, out, arg):
    """Parabolic sub-grid correction of the discrete maximum of x*y - F(x)."""
    N = x.shape[0]
    ok = (arg >= 1) & (arg <= N - 2)
    a = np.clip(arg, 1, N - 2)
    rows = np.arange(F.shape[0])[:, None]
    fm, f0, fp = F[rows, a - 1], F[rows, a], F[rows, a + 1]
    gm = x[a - 1] * y[None, :] - fm
    g0 = x[a] * y[None, :] - f0
    gp = x[a + 1] * y[None, :] - fp
    with np.errstate(invalid="ignore", over="ignore"):
        den = 2 * g0 - gm - gp
        ok &= np.isfinite(gm) & np.isfinite(gp) & (den > 0)
        corr = np.where(ok, (gp - gm) ** 2 / (8 * np.where(ok, den, 1.0)), 0.0)
    # the vertex lies within half a cell, so the correction is bounded by the larger neighbour gap
    corr = np.minimum(corr, np.where(ok, np.maximum(g0 - gm, g0 - gp), 0.0))
    return out + corr


def conjugate_1d(x, F, y, method: str = "fast", refine: bool = False):
    """Row-wise discrete conjugate ``max_i x_i y_j - F[r, i]``.

    ``F`` has shape ``(rows, len(x))``; ``+inf`` entries are excluded.
    Returns ``(values, argmax)`` of shape ``(rows, len(y))``.
    """
    x = np.ascontiguousarray(x, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    F = np.ascontiguousarray(F, dtype=float)
    if method == "fast":
        out = np.empty((F.shape[0], y.shape[0]))
        arg = np.empty((F.shape[0], y.shape[0]), dtype=np.int64)
        _conj_rows_hull(x, F, y, out, arg)
    elif method == "brute":
        out, arg = _conj_rows_brute(x, F, y)
    else:
        raise ValueError(f"unknown method {method!r}")
    if refine:
        out = _refine_rows(x, F, y, out, arg)
    return out, arg


# --------------------------------------------------------------------------
# Legendre transforms
# --------------------------------------------------------------------------

def slope_range(f: GridFunction) -> list[tuple[float, float]]:
    """Per-axis min and max of the finite forward-difference slopes."""
    out = []
    for k, a in enumerate(f.axes):
        d = np.diff(f.values, axis=k) / a.h
        d = d[np.isfinite(d)]
        if d.size == 0:
            out.append((-1.0, 1.0))
        else:
            out.append((float(d.min()), float(d.max())))
    return out


def default_dual_axes(f: GridFunction) -> tuple:
    axes = []
    for (lo, hi), a in zip(slope_range(f), f.axes):
        if hi - lo < 1e-12:
            lo, hi = lo - 1.0, hi + 1.0
        axes.append(Axis(lo, hi, a.count))
    return tuple(axes)


def _require_convex(f: GridFunction):
    if not f.convex:
        rep = check_convexity(f)
        if not rep.is_convex:
            raise ConvexityError(f"input is not convex: midpoint violation {rep.worst_violation:.3g} at {rep.witness}")


def _conjugate_values(values, axes, dual_axes, method, refine):
    H = np.array(values, dtype=float)
    n = H.ndim
    for k in reversed(range(n)):
        Hk = np.moveaxis(H, k, -1)
        shp = Hk.shape
        rows = Hk.reshape(-1, shp[-1])
        out, _ = conjugate_1d(axes[k].nodes, rows, dual_axes[k].nodes, method, refine)
        G = np.moveaxis(out.reshape(shp[:-1] + (dual_axes[k].count,)), -1, k)
        H = -G
    with np.errstate(invalid="ignore"):
        res = -H
    res[np.isneginf(res)] = np.inf
    return res


def legendre_transform(f: GridFunction, dual_axes: Sequence[Axis] | None = None, *,
                       method: str = "fast", refine: bool = False) -> GridFunction:
    """Discrete Legendre transform ``psi*(y) = max_x <x, y> - psi(x)`` over grid nodes.

    With ``refine=True`` each one-dimensional pass adds a parabolic sub-cell
    correction around the discrete maximizer, which is exact for quadratics.
    """
    _require_convex(f)
    dual_axes = default_dual_axes(f) if dual_axes is None else tuple(dual_axes)
    if len(dual_axes) != f.dim:
        raise ValueError("dual axes dimension mismatch")
    vals = _conjugate_values(f.values, f.axes, dual_axes, method, refine)
    # a max of affine functions is convex; the sub-cell correction can break that slightly
    return GridFunction(dual_axes, vals, None, not refine)


def legendre_transform_centered(f: GridFunction, z, dual_axes: Sequence[Axis] | None = None, *,
                                method: str = "fast", refine: bool = False) -> GridFunction:
    """``L_z psi(x) = sup_y <x - z, y - z> - psi(y)`` on the grid ``dual_axes``.

    Uses ``L_z psi(x) = psi*(x - z) - <x - z, z>``.
    """
    _require_convex(f)
    z = np.asarray(z, dtype=float).reshape(f.dim)
    dual_axes = default_dual_axes(f) if dual_axes is None else tuple(dual_axes)
    moved = tuple(a.shifted(-zk) if zk != 0 else a for a, zk in zip(dual_axes, z))
    vals = _conjugate_values(f.values, f.axes, moved, method, refine)
    if np.any(z != 0):
        w = mesh(moved)
        vals = vals - w @ z
    return GridFunction(dual_axes, vals, None, not refine)


def dual_log_concave(psi: GridFunction, dual_axes: Sequence[Axis] | None = None, *,
                     samples: int = 100, seed: int = 0, refine: bool = True):
    """Conjugate ``psi*`` with ``phi° = exp(-psi*)``, plus the dual-identity residual.

    The residual is ``max |psi*(grad psi(x)) - (<x, grad psi(x)> - psi(x))|`` over
    ``samples`` random interior nodes whose gradient lands inside the dual grid,
    with ``psi*`` interpolated multilinearly.
    """
    star = legendre_transform(psi, dual_axes, refine=refine)
    rng = np.random.default_rng(seed)
    interior = _interior_mask(psi, margin=2)
    idx = np.argwhere(interior)
    pts = psi.points()
    grads = gradient_field(psi)
    inside = np.ones(len(idx), dtype=bool)
    g_at = grads[tuple(idx.T)]
    for k, a in enumerate(star.axes):
        inside &= (g_at[:, k] >= a.lo) & (g_at[:, k] <= a.hi)
    idx = idx[inside]
    if len(idx) == 0:
        raise DomainError("no interior node maps into the dual grid")
    pick = idx[rng.choice(len(idx), size=min(samples, len(idx)), replace=False)]
    x = pts[tuple(pick.T)]
    g = grads[tuple(pick.T)]
    lhs = RegularGridInterpolator([a.nodes for a in star.axes], star.values)(g)
    rhs = np.einsum("ij,ij->i", x, g) - psi.values[tuple(pick.T)]
    return star, float(np.max(np.abs(lhs - rhs)))


def interpolation_tolerance(f: GridFunction) -> float:
    """Bound on the multilinear interpolation error: max second difference / 8."""
    tol = 0.0
    for k in range(f.dim):
        d2 = np.diff(f.values, n=2, axis=k)
        d2 = d2[np.isfinite(d2)]
        if d2.size:
            tol = max(tol, float(np.abs(d2).max()) / 8)
    return tol


# --------------------------------------------------------------------------
# Differentials
# --------------------------------------------------------------------------

def _interior_mask(f: GridFunction, margin: int = 1) -> np.ndarray:
    m = np.zeros(f.shape, dtype=bool)
    m[tuple(slice(margin, -margin) for _ in range(f.dim))] = True
    return m & f.finite


def differentials(f: GridFunction, index) -> tuple[np.ndarray, float]:
    """Gradient and Hessian determinant at an interior node.

    Closed-form provenance returns the exact differentials; otherwise central
    first and second differences are used.
    """
    index = tuple(int(i) for i in index)
    if len(index) != f.dim:
        raise ValueError("index dimension mismatch")
    for i, a in zip(index, f.axes):
        if i < 2 or i > a.count - 3:
            raise StencilError(f"node {index} is within two nodes of the boundary")
    x = f.node(index)
    if f.spec is not None and f.spec.analytic:
        return f.spec.gradient(x), float(np.linalg.det(f.spec.hessian(x)))
    sl = tuple(slice(i - 1, i + 2) for i in index)
    block = f.values[sl]
    if not np.isfinite(block).all():
        raise StencilError(f"stencil at {index} touches +inf")
    g, H = _fd_block(block, f.spacing)
    return g, float(np.linalg.det(H))


def _fd_block(block, h):
    n = block.ndim
    c = (1,) * n
    g = np.empty(n)
    H = np.empty((n, n))
    for i in range(n):
        ip = list(c); ip[i] += 1
        im = list(c); im[i] -= 1
        g[i] = (block[tuple(ip)] - block[tuple(im)]) / (2 * h[i])
        H[i, i] = (block[tuple(ip)] - 2 * block[c] + block[tuple(im)]) / h[i] ** 2
        for j in range(i + 1, n):
            vals = 0.0
            for si, sj, w in ((1, 1, 1), (1, -1, -1), (-1, 1, -1), (-1, -1, 1)):
                p = list(c); p[i] += si; p[j] += sj
                vals += w * block[tuple(p)]
            H[i, j] = H[j, i] = vals / (4 * h[i] * h[j])
    return g, H


def gradient_field(f: GridFunction) -> np.ndarray:
    """Gradient at every node, shape ``(*shape, n)``; NaN where unavailable."""
    if f.spec is not None and f.spec.analytic:
        g = f.spec.gradient(f.points())
        return np.where(f.finite[..., None], g, np.nan)
    n = f.dim
    g = np.full(f.shape + (n,), np.nan)
    v = f.values
    for k, a in enumerate(f.axes):
        sl_c = [slice(1, -1) if i == k else slice(None) for i in range(n)]
        sl_p = [slice(2, None) if i == k else slice(None) for i in range(n)]
        sl_m = [slice(None, -2) if i == k else slice(None) for i in range(n)]
        with np.errstate(invalid="ignore"):
            d = (v[tuple(sl_p)] - v[tuple(sl_m)]) / (2 * a.h)
        d[~np.isfinite(d)] = np.nan
        g[tuple(sl_c) + (k,)] = d
    inner = _interior_mask(f, 1)
    g[~inner] = np.nan
    return g


def hessian_field(f: GridFunction) -> np.ndarray:
    """Hessian at every node, shape ``(*shape, n, n)``; NaN where unavailable."""
    if f.spec is not None and f.spec.analytic:
        H = f.spec.hessian(f.points())
        return np.where(f.finite[..., None, None], H, np.nan)
    n = f.dim
    v = f.values
    h = f.spacing
    H = np.full(f.shape + (n, n), np.nan)
    core = tuple(slice(1, -1) for _ in range(n))

    def sh(offs):
        return v[tuple(slice(1 + o, v.shape[i] - 1 + o) for i, o in enumerate(offs))]

    zero = [0] * n
    with np.errstate(invalid="ignore"):
        for i in range(n):
            ep = list(zero); ep[i] = 1
            em = list(zero); em[i] = -1
            H[core + (i, i)] = (sh(ep) - 2 * sh(zero) + sh(em)) / h[i] ** 2
            for j in range(i + 1, n):
                acc = 0
                for si, sj, w in ((1, 1, 1), (1, -1, -1), (-1, 1, -1), (-1, -1, 1)):
                    p = list(zero); p[i] = si; p[j] = sj
                    acc = acc + w * sh(p)
                H[core + (i, j)] = H[core + (j, i)] = acc / (4 * h[i] * h[j])
    bad = ~np.isfinite(H).all(axis=(-1, -2))
    H[bad] = np.nan
    H[~_interior_mask(f, 1)] = np.nan
    return H


def hessian_det_field(f: GridFunction) -> np.ndarray:
    H = hessian_field(f)
    if f.dim == 1:
        return H[..., 0, 0]
    if f.dim == 2:
        return H[..., 0, 0] * H[..., 1, 1] - H[..., 0, 1] * H[..., 1, 0]
    return np.linalg.det(np.nan_to_num(H)) + np.where(np.isnan(H).any(axis=(-1, -2)), np.nan, 0.0)


# --------------------------------------------------------------------------
# Quadrature
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Quadrature:
    value: float
    tail: float


def _tail_estimate(values, axes, ref):
    """Exterior mass, relative to ``ref``, continuing each face geometrically from its last two layers.

    A face that grows outward means divergence unless its mass is negligible
    against ``ref`` (rounding noise on an integrand that vanishes identically).
    """
    n = values.ndim
    a = np.abs(values)
    tail = 0.0
    sign = 1.0
    ref = max(ref, 1e-300)
    for k, ax in enumerate(axes):
        other = [axes[i] for i in range(n) if i != k]
        wf = trapezoid_weights(other) if other else np.array(1.0)
        for outer_i, inner_i in ((0, 1), (-1, -2)):
            bo = np.take(a, outer_i, axis=k)
            bi = np.take(a, inner_i, axis=k)
            Fo = float(np.sum(bo * wf))
            Fi = float(np.sum(bi * wf))
            if Fo == 0.0:
                continue
            if Fo >= Fi and Fo * ax.h <= 1e-12 * ref:
                tail += Fo * ax.h
                continue
            if Fo >= Fi:
                signed = np.take(values, outer_i, axis=k)
                sign = 1.0 if float(np.sum(signed * wf)) >= 0 else -1.0
                raise DivergentIntegralError(
                    f"integrand grows towards the boundary on axis {k}", sign)
            q = Fo / Fi
            tail += Fo * ax.h * q / (1 - q)
    return tail / ref


def integrate(axes: Sequence[Axis], values, *, budget: float = DEFAULT_TAIL_BUDGET,
              check_tail: bool = True, scale: float = 0.0) -> Quadrature:
    """Tensor-product trapezoid quadrature over the box with a tail estimate.

    ``values`` must be finite (mask +inf nodes to zero beforehand).  The tail
    is the exterior mass of a geometric continuation of every face, relative
    to ``max(|value|, scale)``; exceeding ``budget`` raises
    :class:`TruncationError` and outward growth raises
    :class:`DivergentIntegralError`.  Signed integrands that may cancel pass
    a ``scale`` such as the integral of their absolute value.
    """
    axes = tuple(axes)
    values = np.asarray(values, dtype=float)
    if not np.isfinite(values).all():
        raise ValueError("integrand must be finite on the grid")
    w = trapezoid_weights(axes)
    total = float(np.sum(values * w))
    tail = _tail_estimate(values, axes, max(abs(total), scale)) if check_tail else 0.0
    if check_tail and tail > budget:
        raise TruncationError(f"tail estimate {tail:.3g} exceeds budget {budget:.3g}")
    return Quadrature(total, tail)


def integrate_function(f: GridFunction, **kw) -> Quadrature:
    """Integrate the sampled field of ``f`` (``+inf`` nodes count as zero)."""
    vals = np.where(f.finite, f.values, 0.0)
    return integrate(f.axes, vals, **kw)


def gaussian_tail_bound(spec: FunctionSpec, axes: Sequence[Axis]) -> float:
    """Relative mass of exp(-psi) outside the box by Gaussian comparison.

    Union bound over coordinates with the smallest eigenvalue of the
    quadratic part; quartic terms only make the true tail lighter.
    """
    H = spec.lower_hessian()
    if H is None:
        raise ValueError("no quadratic part to compare with")
    lam = float(np.linalg.eigvalsh(H).min())
    if lam <= 0:
        return math.inf
    s = spec.center
    sd = 1 / math.sqrt(lam)
    tot = 0.0
    for a, c in zip(axes, s):
        tot += 0.5 * math.erfc((c - a.lo) / sd / math.sqrt(2)) + 0.5 * math.erfc((a.hi - c) / sd / math.sqrt(2))
    return tot


def tail_halfwidth(spec: FunctionSpec, budget: float = DEFAULT_TAIL_BUDGET) -> np.ndarray:
    """Per-axis half-width around the minimizer keeping the exp(-psi) tail within budget."""
    n = spec.dim
    H = spec.lower_hessian()
    if H is not None and np.linalg.eigvalsh(H).min() > 1e-12:
        lam = float(np.linalg.eigvalsh(H).min())
        z = math.sqrt(2) * float(erfcinv(budget / n))
        return np.full(n, z / math.sqrt(lam))
    # no usable quadratic part: march along the axes until psi rises enough
    rise = math.log(1 / budget) + 4
    s = spec.center
    f0 = float(spec.value(s))
    out = np.empty(n)
    for k in range(n):
        L = 0.5
        e = np.zeros(n); e[k] = 1
        while min(float(spec.value(s + L * e)), float(spec.value(s - L * e))) - f0 < rise:
            L *= 1.25
            if L > 1e6:
                raise TruncationError("function does not grow enough to truncate")
        out[k] = L
    return out


# --------------------------------------------------------------------------
# Interchange
# --------------------------------------------------------------------------

def save_grid(path, f: GridFunction) -> None:
    """Write ``<path>.json`` (header) and ``<path>.bin`` (row-major float64)."""
    path = Path(path)
    header = {"axes": [a.to_json() for a in f.axes], "dtype": "<f8", "order": "C",
              "convex": f.convex}
    if f.spec is not None and f.spec.variant != "tabulated":
        header["spec"] = f.spec.to_json()
    path.with_suffix(".json").write_text(json.dumps(header, indent=1))
    np.ascontiguousarray(f.values, dtype="<f8").tofile(path.with_suffix(".bin"))


def load_grid(path) -> GridFunction:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    axes = tuple(Axis.from_json(a) for a in header["axes"])
    vals = np.fromfile(path.with_suffix(".bin"), dtype="<f8").reshape([a.count for a in axes])
    spec = FunctionSpec.from_json(header["spec"]) if "spec" in header else None
    return GridFunction(axes, vals, spec, bool(header.get("convex", False)))


def spec_from_json(d: dict) -> tuple[FunctionSpec | None, GridFunction | None]:
    """Parse the FunctionSpec JSON schema.

    Returns ``(spec, None)`` for closed forms and ``(None, grid)`` for the
    tabulated variant, whose ``values`` are given row-major with ``axes``.
    """
    if d.get("variant") == "tabulated":
        axes = tuple(Axis.from_json(a) for a in d["axes"])
        vals = np.asarray(d["values"], dtype=float).reshape([a.count for a in axes])
        return None, GridFunction(axes, vals, None, True)
    return FunctionSpec.from_json(d), None
