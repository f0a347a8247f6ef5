"""Convex bodies with the origin in their interior.

Three representations are supported:

``support2d``   support function sampled at M >= 256 uniform angles; angular
                derivatives are spectral, so ``rho = h + h''`` (the radius of
                curvature) is exact for trigonometric polynomials.
``ellipsoid``   ``{x : <M x, x> <= 1}`` in any dimension.
``polytope2d``  counterclockwise vertices of a convex polygon.

Planar integrals over the boundary use the support parametrization
``x(theta) = h u + h' u'`` with ``u = (cos theta, sin theta)``; the boundary
measure is ``rho dtheta``, the curvature ``1 / rho`` and ``<x, N> = h``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import optimize
from scipy.interpolate import CubicSpline
from scipy.special import erfcinv, gamma

from .errors import (CurvatureError, DomainError, OriginNotInteriorError, SearchError)

MIN_SAMPLES = 256
GAUGE_TABLE = 4096
RHO_TOL = 1e-9


def ball_volume(n: int) -> float:
    return math.pi ** (n / 2) / gamma(1 + n / 2)


def _angles(M: int) -> np.ndarray:
    return 2 * math.pi * np.arange(M) / M


# --------------------------------------------------------------------------
# Trigonometric interpolation
# --------------------------------------------------------------------------

def _spectral(h: np.ndarray):
    """Fourier coefficients with the Nyquist mode removed (it has no consistent derivative)."""
    c = np.fft.rfft(h) / len(h)
    if len(h) % 2 == 0:
        c[-1] = 0.0
    return c


def _spectral_derivative(h: np.ndarray, order: int) -> np.ndarray:
    M = len(h)
    c = np.fft.rfft(h)
    k = np.arange(len(c))
    if M % 2 == 0:
        c[-1] = 0.0
    return np.fft.irfft(c * (1j * k) ** order, n=M)


def _trig_eval(c: np.ndarray, theta, order: int = 0) -> np.ndarray:
    """Evaluate the trigonometric interpolant (or a derivative) at arbitrary angles."""
    theta = np.asarray(theta, dtype=float)
    k = np.arange(len(c))
    coef = c * (1j * k) ** order
    flat = theta.ravel()
    res = np.empty(flat.shape)
    step = max(1, 2_000_000 // len(c))
    for s in range(0, flat.size, step):
        E = np.exp(1j * np.outer(flat[s:s + step], k))
        # the k = 0 term is counted once, the others pair with their conjugates
        res[s:s + step] = 2 * (E @ coef).real - coef[0].real
    return res.reshape(theta.shape)


# --------------------------------------------------------------------------
# Bodies
# --------------------------------------------------------------------------

VARIANTS = ("support2d", "ellipsoid", "polytope2d")


@dataclass(frozen=True, eq=False)
class ConvexBody:
    variant: str
    h: np.ndarray | None = None
    M: np.ndarray | None = None
    vertices: np.ndarray | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown body variant {self.variant!r}")
        if self.variant == "support2d":
            h = np.asarray(self.h, dtype=float).ravel()
            if len(h) < MIN_SAMPLES:
                raise ValueError(f"support2d needs at least {MIN_SAMPLES} samples")
            if np.any(h <= 0):
                raise OriginNotInteriorError("support function must be positive (origin interior)")
            rho = h + _spectral_derivative(h, 2)
            if rho.min() < -RHO_TOL * max(1.0, float(np.abs(rho).max())):
                raise ValueError(f"samples are not a support function: rho min {rho.min():.3g}")
            h.setflags(write=False)
            object.__setattr__(self, "h", h)
        elif self.variant == "ellipsoid":
            M = np.atleast_2d(np.asarray(self.M, dtype=float))
            if M.shape[0] != M.shape[1] or not np.allclose(M, M.T, atol=1e-12):
                raise ValueError("ellipsoid matrix must be symmetric")
            if np.linalg.eigvalsh(M).min() <= 0:
                raise ValueError("ellipsoid matrix must be positive definite")
            M.setflags(write=False)
            object.__setattr__(self, "M", M)
        else:
            V = np.asarray(self.vertices, dtype=float)
            if V.ndim != 2 or V.shape[1] != 2 or len(V) < 3:
                raise ValueError("polytope2d needs at least three planar vertices")
            E = np.roll(V, -1, axis=0) - V
            cross = E[:, 0] * np.roll(E, -1, axis=0)[:, 1] - E[:, 1] * np.roll(E, -1, axis=0)[:, 0]
            if np.any(cross <= 0):
                raise ValueError("vertices must be in strictly convex counterclockwise order")
            # the origin is interior iff it is strictly left of every edge
            side = E[:, 0] * (-V[:, 1]) - E[:, 1] * (-V[:, 0])
            if np.any(side <= 0):
                raise OriginNotInteriorError("origin is not interior to the polygon")
            V.setflags(write=False)
            object.__setattr__(self, "vertices", V)

    # -- constructors -----------------------------------------------------

    @classmethod
    def ball(cls, r: float = 1.0, n: int = 2) -> "ConvexBody":
        return cls("ellipsoid", M=np.eye(n) / r ** 2)

    @classmethod
    def ellipse(cls, a: float, b: float, *, variant: str = "support2d", samples: int = 1024) -> "ConvexBody":
        if variant == "ellipsoid":
            return cls("ellipsoid", M=np.diag([1 / a ** 2, 1 / b ** 2]))
        th = _angles(samples)
        return cls("support2d", h=np.sqrt((a * np.cos(th)) ** 2 + (b * np.sin(th)) ** 2))

    @classmethod
    def square(cls, s: float = 1.0) -> "ConvexBody":
        return cls("polytope2d", vertices=s * np.array([[1, -1], [1, 1], [-1, 1], [-1, -1]], float))

    @classmethod
    def from_support(cls, h) -> "ConvexBody":
        return cls("support2d", h=h)

    @classmethod
    def smoothed_square(cls, delta: float = 0.1, width: float = 0.05, samples: int = 2048) -> "ConvexBody":
        """Square [-1, 1]^2 averaged over rotations of angular width ``width`` plus ``delta`` B.

        The Gaussian rotation average keeps the support function convex
        while spreading the corner curvature; adding ``delta`` is the
        Minkowski sum with ``delta`` times the disk.
        """
        th = _angles(samples)
        h = np.abs(np.cos(th)) + np.abs(np.sin(th))
        c = np.fft.rfft(h)
        k = np.arange(len(c))
        h = np.fft.irfft(c * np.exp(-0.5 * (width * k) ** 2), n=samples)
        return cls("support2d", h=h + delta)

    @classmethod
    def perturbed_ellipse(cls, a: float, b: float, t: float, samples: int = 1024) -> "ConvexBody":
        """Ellipse support plus ``t * (rho_min / 4) cos(4 theta)``; convex for t < 4/15."""
        th = _angles(samples)
        hE = np.sqrt((a * np.cos(th)) ** 2 + (b * np.sin(th)) ** 2)
        rho_min = min(a, b) ** 2 / max(a, b)
        return cls("support2d", h=hE + t * 0.25 * rho_min * np.cos(4 * th))

    # -- basic geometry ---------------------------------------------------

    @property
    def dim(self) -> int:
        return self.M.shape[0] if self.variant == "ellipsoid" else 2

    @property
    def samples(self) -> int:
        return len(self.h)

    @cached_property
    def _coef(self):
        return _spectral(self.h)

    @cached_property
    def dh(self) -> np.ndarray:
        return _spectral_derivative(self.h, 1)

    @cached_property
    def rho(self) -> np.ndarray:
        """Radius of curvature ``h + h''`` at the sample angles."""
        return self.h + _spectral_derivative(self.h, 2)

    def support(self, u) -> np.ndarray:
        """Support function at unit (or arbitrary) vectors, shape (..., n)."""
        u = np.asarray(u, dtype=float)
        if self.variant == "ellipsoid":
            Mi = np.linalg.inv(self.M)
            return np.sqrt(np.einsum("...i,ij,...j->...", u, Mi, u))
        if self.variant == "polytope2d":
            return np.max(u @ self.vertices.T, axis=-1)
        r = np.linalg.norm(u, axis=-1)
        th = np.arctan2(u[..., 1], u[..., 0])
        return r * _trig_eval(self._coef, th)

    def support_angle(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        return self.support(np.stack([np.cos(theta), np.sin(theta)], axis=-1))

    def gauge(self, x) -> np.ndarray:
        """Minkowski functional ``||x||_K``, shape (...)."""
        x = np.asarray(x, dtype=float)
        if self.variant == "ellipsoid":
            return np.sqrt(np.maximum(np.einsum("...i,ij,...j->...", x, self.M, x), 0.0))
        if self.variant == "polytope2d":
            N, d = self._edges
            return np.maximum(np.max(x @ N.T / d, axis=-1), 0.0)
        r = np.linalg.norm(x, axis=-1)
        phi = np.mod(np.arctan2(x[..., 1], x[..., 0]), 2 * math.pi)
        return r * self._gauge_spline(phi)

    @cached_property
    def _edges(self):
        """Unit outward normals and offsets of the polygon edges."""
        V = self.vertices
        E = np.roll(V, -1, axis=0) - V
        N = np.stack([E[:, 1], -E[:, 0]], axis=1)
        N /= np.linalg.norm(N, axis=1)[:, None]
        d = np.einsum("ij,ij->i", N, V)
        return N, d

    def _gauge_newton(self, phi: np.ndarray) -> np.ndarray:
        """``||u_phi||_K = max_theta cos(theta - phi) / h(theta)`` by Newton on the interpolant."""
        th = _angles(self.samples)
        h = self.h
        # start from the best sample angle
        best = np.empty(len(phi), dtype=int)
        step = max(1, 4_000_000 // len(th))
        for s in range(0, len(phi), step):
            best[s:s + step] = np.argmax(np.cos(th[None, :] - phi[s:s + step, None]) / h[None, :], axis=1)
        theta = th[best]
        dmax = 2 * math.pi / self.samples
        c = self._coef
        for _ in range(8):
            hv = _trig_eval(c, theta)
            h1 = _trig_eval(c, theta, 1)
            h2 = _trig_eval(c, theta, 2)
            G = -np.sin(theta - phi) * hv - np.cos(theta - phi) * h1
            dG = -np.cos(theta - phi) * (hv + h2)
            with np.errstate(divide="ignore", invalid="ignore"):
                delta = np.where(np.abs(dG) > 1e-300, -G / dG, 0.0)
            delta = np.clip(delta, -dmax, dmax)
            theta = theta + delta
            if np.max(np.abs(delta)) < 1e-14:
                break
        return np.cos(theta - phi) / _trig_eval(c, theta)

    @cached_property
    def _gauge_table(self):
        phi = _angles(GAUGE_TABLE)
        return phi, self._gauge_newton(phi)

    @cached_property
    def _gauge_spline(self):
        phi, g = self._gauge_table
        return CubicSpline(np.r_[phi, 2 * math.pi], np.r_[g, g[0]], bc_type="periodic")

    def boundary_points(self, samples: int | None = None) -> np.ndarray:
        """Boundary points ordered counterclockwise (polygon vertices for polytopes)."""
        if self.variant == "polytope2d":
            return np.array(self.vertices)
        if self.variant == "ellipsoid":
            if self.dim != 2:
                raise ValueError("boundary points are planar only")
            phi = _angles(samples or 4096)
            U = np.stack([np.cos(phi), np.sin(phi)], axis=1)
            return U / self.gauge(U)[:, None]
        if samples is None or samples == self.samples:
            th = _angles(self.samples)
            h, dh = self.h, self.dh
        else:
            th = _angles(samples)
            h, dh = _trig_eval(self._coef, th), _trig_eval(self._coef, th, 1)
        u = np.stack([np.cos(th), np.sin(th)], axis=1)
        up = np.stack([-np.sin(th), np.cos(th)], axis=1)
        return h[:, None] * u + dh[:, None] * up

    # -- transformations --------------------------------------------------

    def as_support2d(self, samples: int = 1024) -> "ConvexBody":
        if self.variant == "support2d":
            return self
        if self.dim != 2:
            raise ValueError("only planar bodies have a support2d form")
        return ConvexBody("support2d", h=self.support_angle(_angles(samples)))

    def translated(self, v) -> "ConvexBody":
        """``K + v`` (ellipsoids become support2d samples)."""
        v = np.asarray(v, dtype=float)
        if self.variant == "polytope2d":
            return ConvexBody("polytope2d", vertices=self.vertices + v)
        K = self.as_support2d()
        th = _angles(K.samples)
        return ConvexBody("support2d", h=K.h + v[0] * np.cos(th) + v[1] * np.sin(th))

    def scaled(self, s: float) -> "ConvexBody":
        if self.variant == "ellipsoid":
            return ConvexBody("ellipsoid", M=self.M / s ** 2)
        if self.variant == "polytope2d":
            return ConvexBody("polytope2d", vertices=self.vertices * s)
        return ConvexBody("support2d", h=self.h * s)

    def linear_image(self, A) -> "ConvexBody":
        """``A K`` for an invertible matrix ``A`` with positive determinant."""
        A = np.asarray(A, dtype=float)
        if np.linalg.det(A) <= 0:
            raise ValueError("linear image needs det A > 0")
        if self.variant == "ellipsoid":
            Ai = np.linalg.inv(A)
            return ConvexBody("ellipsoid", M=Ai.T @ self.M @ Ai)
        if self.variant == "polytope2d":
            return ConvexBody("polytope2d", vertices=self.vertices @ A.T)
        th = _angles(self.samples)
        U = np.stack([np.cos(th), np.sin(th)], axis=1)
        return ConvexBody("support2d", h=self.support(U @ A))

    # -- serialization ----------------------------------------------------

    def to_json(self) -> dict:
        if self.variant == "support2d":
            return {"variant": "support2d", "h": self.h.tolist()}
        if self.variant == "ellipsoid":
            return {"variant": "ellipsoid", "M": self.M.tolist()}
        return {"variant": "polytope2d", "vertices": self.vertices.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "ConvexBody":
        v = d["variant"]
        if v == "support2d":
            return cls(v, h=d["h"])
        if v == "ellipsoid":
            return cls(v, M=d["M"])
        if v == "polytope2d":
            return cls(v, vertices=d["vertices"])
        raise ValueError(f"unknown body variant {v!r}")


# --------------------------------------------------------------------------
# Polar, volume, centroid
# --------------------------------------------------------------------------

def polar(K: ConvexBody) -> ConvexBody:
    """``K° = {y : <x, y> <= 1 for x in K}``; support2d via ``h_{K°}(u) = ||u||_K``."""
    if K.variant == "ellipsoid":
        return ConvexBody("ellipsoid", M=np.linalg.inv(K.M))
    if K.variant == "polytope2d":
        N, d = K._edges
        return ConvexBody("polytope2d", vertices=N / d[:, None])
    return ConvexBody("support2d", h=K._gauge_newton(_angles(K.samples)))


def volume(K: ConvexBody) -> float:
    if K.variant == "ellipsoid":
        return ball_volume(K.dim) / math.sqrt(np.linalg.det(K.M))
    if K.variant == "polytope2d":
        x, y = K.vertices[:, 0], K.vertices[:, 1]
        return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))
    return 0.5 * float(np.mean(K.h * K.rho)) * 2 * math.pi


def polar_volume(K: ConvexBody) -> float:
    """``|K°|``; for support2d this is ``1/2 int h^-2 dtheta``."""
    if K.variant == "support2d":
        return 0.5 * float(np.mean(K.h ** -2)) * 2 * math.pi
    return volume(polar(K))


def centroid(K: ConvexBody) -> np.ndarray:
    if K.variant == "ellipsoid":
        return np.zeros(K.dim)
    if K.variant == "polytope2d":
        V = K.vertices
        W = np.roll(V, -1, axis=0)
        cr = V[:, 0] * W[:, 1] - W[:, 0] * V[:, 1]
        A = 0.5 * cr.sum()
        return ((V + W) * cr[:, None]).sum(axis=0) / (6 * A)
    X = K.boundary_points()
    w = K.h * K.rho
    return (X * w[:, None]).mean(axis=0) * 2 * math.pi / (3 * volume(K))


def recenter_centroid(K: ConvexBody) -> ConvexBody:
    c = centroid(K)
    if np.all(np.abs(c) < 1e-14):
        return K
    return K.translated(-c)


# --------------------------------------------------------------------------
# Santalo product
# --------------------------------------------------------------------------

def _polar_volume_shifted(K: ConvexBody, s: np.ndarray) -> float:
    """``|(K - s)°|``, ``+inf`` when s is not interior."""
    if K.variant == "polytope2d":
        N, d = K._edges
        off = d - N @ s
        if np.any(off <= 0):
            return math.inf
        P = N / off[:, None]
        x, y = P[:, 0], P[:, 1]
        return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))
    th = _angles(K.samples)
    hs = K.h - s[0] * np.cos(th) - s[1] * np.sin(th)
    if np.any(hs <= 0):
        return math.inf
    return 0.5 * float(np.mean(hs ** -2)) * 2 * math.pi


def santalo_product_body(K: ConvexBody, grid: int = 21) -> tuple[float, float, np.ndarray]:
    """``(min_s |K| |(K - s)°|, product / |B|^2, s)``.

    A coarse grid over the bounding box seeds a Nelder-Mead refinement.
    """
    n = K.dim
    Bn = ball_volume(n)
    if K.variant == "ellipsoid":
        prod = volume(K) * volume(polar(K))
        return prod, prod / Bn ** 2, np.zeros(n)
    if K.variant == "support2d":
        for v in (K.h,):
            if np.any(v <= 0):
                raise OriginNotInteriorError("origin is not interior")
    vol = volume(K)
    xs = np.linspace(-K.support(np.array([-1.0, 0])), K.support(np.array([1.0, 0])), grid + 2)[1:-1]
    ys = np.linspace(-K.support(np.array([0, -1.0])), K.support(np.array([0, 1.0])), grid + 2)[1:-1]
    best, s0 = math.inf, None
    for x in xs:
        for y in ys:
            v = _polar_volume_shifted(K, np.array([x, y]))
            if v < best:
                best, s0 = v, np.array([x, y])
    if s0 is None:
        raise SearchError("no interior point on the search grid")
    res = optimize.minimize(lambda s: _polar_volume_shifted(K, s), s0, method="Nelder-Mead",
                            options=dict(xatol=1e-10, fatol=1e-8 * best, maxiter=4000))
    s = res.x
    if not math.isfinite(res.fun):
        raise SearchError("Santalo point search left the interior")
    prod = vol * float(res.fun)
    return prod, prod / Bn ** 2, s


# --------------------------------------------------------------------------
# Affine surface areas
# --------------------------------------------------------------------------

def _check_p(p: float, n: int):
    if p == -n:
        raise ValueError(f"p = -n = {-n} is excluded")


def asp_boundary(K: ConvexBody, p: float) -> float:
    """Planar ``as_p(K) = int rho^(2/(2+p)) h^(-2(p-1)/(2+p)) dtheta``."""
    _check_p(p, 2)
    if K.dim != 2:
        raise ValueError("asp_boundary is planar")
    if K.variant == "polytope2d":
        if p > 0:
            return 0.0
        if p == 0:
            return 2 * volume(K)
        raise CurvatureError("polygons have unbounded integrand for p < 0")
    K = K.as_support2d()
    rho = K.rho
    if np.any(rho <= RHO_TOL * np.abs(rho).max()) and p != 0:
        raise CurvatureError("radius of curvature vanishes on part of the boundary")
    rho = np.maximum(rho, 0.0)
    integrand = rho ** (2 / (2 + p)) * K.h ** (-2 * (p - 1) / (2 + p))
    return float(np.mean(integrand)) * 2 * math.pi


def asp_ellipsoid(K: ConvexBody, p: float) -> float:
    """Closed form ``n |B| det(M)^((p - n) / (2 (n + p)))``."""
    n = K.dim
    _check_p(p, n)
    return n * ball_volume(n) * float(np.linalg.det(K.M)) ** ((p - n) / (2 * (n + p)))


def affine_surface_area(K: ConvexBody, p: float) -> float:
    """as_p by the closed form for ellipsoids, else by the boundary integral."""
    if K.variant == "ellipsoid":
        return asp_ellipsoid(K, p)
    return asp_boundary(K, p)


def _gauge_angular(K: ConvexBody):
    """``G = ||u_phi||^2`` and the angular Hessian determinant table for ``psi = ||x||^2 / 2``.

    In polar coordinates ``psi = r^2 G(phi) / 2`` has Hessian determinant
    ``G (G + G''/2) - G'^2 / 4``, independent of r.
    """
    phi, g = K._gauge_table
    G = g ** 2
    G1 = _spectral_derivative(G, 1)
    G2 = _spectral_derivative(G, 2)
    D = G * (G + 0.5 * G2) - 0.25 * G1 ** 2
    return phi, G, D


def asp_via_gauge(K: ConvexBody, p: float, *, count: int = 402, budget: float = 1e-6) -> float:
    """``as_p(K) = n |B| as_lambda(||x||_K^2 / 2) / (2 pi)^(n/2)`` with ``lambda = p / (n + p)``.

    ``as_lambda`` is a grid integral of ``(det D^2 psi)^lambda exp(-psi)``; for
    planar support bodies the determinant comes from the gauge table, and the
    Euler relation ``<x, grad psi> = 2 psi`` is checked on the grid.
    """
    from .functionals import LogConcaveDensity, affine_surface_area_lambda, quadratic_as_lambda
    from .grid import FunctionSpec

    n = K.dim
    _check_p(p, n)
    lam = p / (n + p)
    Bn = ball_volume(n)
    if K.variant == "polytope2d":
        raise CurvatureError("the gauge Hessian of a polygon is singular off a null set")
    if K.variant == "ellipsoid":
        if n > 3:
            as_lam = quadratic_as_lambda(K.M, lam)
        else:
            d = LogConcaveDensity.from_spec(FunctionSpec.gauge_square(K))
            as_lam = affine_surface_area_lambda(d, lam)
        return n * Bn * as_lam / (2 * math.pi) ** (n / 2)
    phi, G, D = _gauge_angular(K)
    if D.min() <= 0:
        raise CurvatureError("gauge Hessian determinant is not positive")
    Gs = CubicSpline(np.r_[phi, 2 * math.pi], np.r_[G, G[0]], bc_type="periodic")
    Ds = CubicSpline(np.r_[phi, 2 * math.pi], np.r_[D, D[0]], bc_type="periodic")
    R = float(np.max(K.h))
    hw = math.sqrt(2) * float(erfcinv(budget / n)) * R
    if count % 2:
        count += 1  # keep the singular origin off the nodes
    x = np.linspace(-hw, hw, count)
    hx = x[1] - x[0]
    X, Y = np.meshgrid(x, x, indexing="ij")
    ang = np.mod(np.arctan2(Y, X), 2 * math.pi)
    r2 = X ** 2 + Y ** 2
    psi = 0.5 * r2 * Gs(ang)
    _euler_check(psi, X, Y, hx)
    vals = Ds(ang) ** lam * np.exp(-psi)
    w = np.full(count, hx)
    w[0] = w[-1] = hx / 2
    as_lam = float(np.einsum("i,ij,j->", w, vals, w))
    return n * Bn * as_lam / (2 * math.pi) ** (n / 2)


def _euler_check(psi, X, Y, hx, rtol: float = 1e-2):
    gx = (psi[2:, 1:-1] - psi[:-2, 1:-1]) / (2 * hx)
    gy = (psi[1:-1, 2:] - psi[1:-1, :-2]) / (2 * hx)
    x, y, p = X[1:-1, 1:-1], Y[1:-1, 1:-1], psi[1:-1, 1:-1]
    far = (x ** 2 + y ** 2) >= (10 * hx) ** 2
    heavy = far & (p < 20)
    err = np.abs(x * gx + y * gy - 2 * p)[heavy]
    if err.size and np.max(err / (1 + 2 * p[heavy])) > rtol:
        raise DomainError("Euler relation <x, grad psi> = 2 psi fails on the gauge grid")


def isoperimetric_check(K: ConvexBody, p: float, tol: float = 1e-3) -> tuple[float, float, bool]:
    """``(as_p(K) / as_p(B), (|K| / |B|)^((n - p)/(n + p)), holds)`` after centroid recentering."""
    n = K.dim
    _check_p(p, n)
    if p < -n:
        raise ValueError("p must exceed -n")
    Kc = recenter_centroid(K)
    Bn = ball_volume(n)
    lhs = affine_surface_area(Kc, p) / (n * Bn)
    rhs = (volume(Kc) / Bn) ** ((n - p) / (n + p))
    holds = lhs <= rhs * (1 + tol) if p >= 0 else lhs >= rhs * (1 - tol)
    return lhs, rhs, bool(holds)


def asp_hypothesis_gap(K: ConvexBody, p: float) -> float:
    """The epsilon with ``as_p(K)/as_p(B) = (1 - eps)^(p/(n+p)) (|K|/|B|)^((n-p)/(n+p))``."""
    n = K.dim
    lhs, rhs, _ = isoperimetric_check(K, p)
    return 1.0 - (lhs / rhs) ** ((n + p) / p)


# --------------------------------------------------------------------------
# Entropy power
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class OmegaTable:
    p: tuple
    omega: tuple
    estimate: float
    error_bar: float


def entropy_power(K: ConvexBody, p_list=(1, 2, 4, 8, 16, 32, 64)) -> OmegaTable:
    """``Omega_p(K) = (as_p(K) / (n |K°|))^(n + p)`` and its extrapolation in 1/p."""
    p_list = tuple(float(p) for p in p_list)
    if any(p <= 0 for p in p_list) or list(p_list) != sorted(set(p_list)):
        raise ValueError("p_list must be strictly ascending and positive")
    n = K.dim
    Kp = polar_volume(K)
    om = tuple(float(math.exp((n + p) * math.log(affine_surface_area(K, p) / (n * Kp))))
               if affine_surface_area(K, p) > 0 else 0.0 for p in p_list)
    if len(p_list) >= 2:
        p1, p2 = p_list[-2], p_list[-1]
        est = (p2 * om[-1] - p1 * om[-2]) / (p2 - p1)
        err = abs(om[-1] - om[-2])
    else:
        est, err = om[-1], math.inf
    return OmegaTable(p_list, om, float(est), float(err))


def omega_monotonicity_check(K: ConvexBody, p_list=(1, 2, 4, 8, 16, 32, 64), tol: float = 1e-3) -> bool:
    """Whether the Omega_p table of K is non-increasing in p within relative ``tol``."""
    om = entropy_power(K, p_list).omega
    return all(b <= a * (1 + tol) + 1e-300 for a, b in zip(om, om[1:]))


def werner_ye_chain_check(K: ConvexBody, p: float, tol: float = 1e-3) -> tuple[float, float, bool]:
    """``(as_p^(n+p), n^(n+p) |K|^n |K°|^p, holds)``; ``<=`` for p > 0, ``>=`` for -n < p < 0."""
    n = K.dim
    _check_p(p, n)
    if p == 0 or p < -n:
        raise ValueError("the chain is stated for p > 0 and -n < p < 0")
    lhs = affine_surface_area(K, p) ** (n + p)
    rhs = n ** (n + p) * volume(K) ** n * polar_volume(K) ** p
    holds = lhs <= rhs * (1 + tol) if p > 0 else lhs >= rhs * (1 - tol)
    return float(lhs), float(rhs), bool(holds)


# --------------------------------------------------------------------------
# Banach-Mazur distance to the disk
# --------------------------------------------------------------------------

def khachiyan(P: np.ndarray, tol: float = 1e-7, max_iter: int = 10000):
    """Minimum-volume enclosing ellipsoid ``{x : (x - c)^T Q (x - c) <= 1}`` of the rows of P."""
    N, d = P.shape
    Qm = np.vstack([P.T, np.ones(N)])
    u = np.full(N, 1.0 / N)
    for _ in range(max_iter):
        X = Qm @ (u[:, None] * Qm.T)
        Mv = np.einsum("ij,jk,ki->i", Qm.T, np.linalg.inv(X), Qm)
        j = int(np.argmax(Mv))
        step = (Mv[j] - d - 1) / ((d + 1) * (Mv[j] - 1))
        nu = (1 - step) * u
        nu[j] += step
        if np.linalg.norm(nu - u) < tol:
            u = nu
            break
        u = nu
    c = P.T @ u
    S = (P.T * u) @ P - np.outer(c, c)
    return c, np.linalg.inv(S) / d


def _radii(TP: np.ndarray) -> tuple[float, float]:
    """Circumradius and inradius about the origin of the polygon with vertices TP."""
    R = float(np.max(np.linalg.norm(TP, axis=1)))
    E = np.roll(TP, -1, axis=0) - TP
    cross = np.abs(TP[:, 0] * E[:, 1] - TP[:, 1] * E[:, 0])
    r = float(np.min(cross / np.linalg.norm(E, axis=1)))
    return R, r


def _factor(theta):
    L = np.array([[math.exp(theta[0]), 0.0], [theta[1], math.exp(theta[2])]])
    return L @ L.T


def banach_mazur_fit(K: ConvexBody, restarts: int = 2) -> tuple[float, np.ndarray]:
    """``(d, S)``: the best ratio R(SK)/r(SK) about the origin and the map S achieving it.

    S ranges over positive-definite 2x2 matrices; the search starts from the
    minimal enclosing ellipse and fixes the translation at the origin, so the
    value is exact for centrally symmetric bodies.
    """
    if K.variant == "ellipsoid":
        w, Q = np.linalg.eigh(K.M)
        return 1.0, (Q * np.sqrt(w)) @ Q.T
    if K.dim != 2:
        raise ValueError("Banach-Mazur search is planar")
    P = K.boundary_points(None if K.variant == "polytope2d" else 4096)

    def obj(theta):
        R, r = _radii(P @ _factor(theta).T)
        return R / r if r > 0 else math.inf

    # the enclosing ellipse only seeds the search, so a subsample suffices
    _, Qe = khachiyan(P[::max(1, len(P) // 512)], tol=1e-6)
    w, V = np.linalg.eigh(Qe)
    T0 = (V * np.sqrt(w)) @ V.T
    L0 = np.linalg.cholesky(T0 / math.sqrt(np.linalg.det(T0)))
    theta0 = np.array([math.log(L0[0, 0]), L0[1, 0], math.log(L0[1, 1])])
    best = optimize.minimize(obj, theta0, method="Nelder-Mead",
                             options=dict(xatol=1e-10, fatol=1e-12, maxiter=6000))
    for k in range(restarts):
        start = best.x + np.array([0.05, -0.05, 0.03]) * (1 if k % 2 == 0 else -1)
        r = optimize.minimize(obj, start, method="Nelder-Mead",
                              options=dict(xatol=1e-10, fatol=1e-12, maxiter=6000))
        if r.fun < best.fun:
            best = r
    if not math.isfinite(best.fun):
        raise SearchError("no linear map keeps the origin interior")
    return float(best.fun), _factor(best.x)


def banach_mazur_to_ball(K: ConvexBody) -> float:
    return banach_mazur_fit(K)[0]


def remark_integral(K: ConvexBody, R: float = 2.0, fit=None) -> float:
    """``int_{R B} | ||x||_K - |T x| | dx`` with ``T = S / r(SK)`` from the Banach-Mazur fit.

    With this T the disk ``T^{-1} B`` is the largest one sitting inside K in
    the fitted frame, so ``|T x| >= ||x||_K`` with equality for ellipses.
    """
    from .functionals import ball_quadrature
    _, S = banach_mazur_fit(K) if fit is None else fit
    if K.variant == "ellipsoid":
        T = S
    else:
        P = K.boundary_points(None if K.variant == "polytope2d" else 4096)
        _, r = _radii(P @ S.T)
        T = S / r
    X, W = ball_quadrature(K.dim, R, nr=64, nt=256)
    return float(np.sum(W * np.abs(K.gauge(X) - np.linalg.norm(X @ T.T, axis=1))))


@dataclass(frozen=True)
class BodyProbeRow:
    t: float
    epsilon: float
    asp_gap: float
    d_bm: float
    remark_integral: float


def body_stability_probe(family, p: float = 1.0, R: float = 2.0) -> list[BodyProbeRow]:
    """Per member ``(t, K)``: Santalo gap, as_p hypothesis gap, d_BM and the remark integral."""
    rows = []
    for t, K in family:
        _, ratio, _ = santalo_product_body(K)
        fit = banach_mazur_fit(K)
        rows.append(BodyProbeRow(float(t), 1.0 - ratio, asp_hypothesis_gap(K, p),
                                 fit[0], remark_integral(K, R, fit)))
    return rows
