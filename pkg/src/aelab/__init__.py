"""Numerical laboratory for affine isoperimetric inequalities of log-concave functions and convex bodies.

Modules
-------
grid         grids, discrete Legendre transforms, finite differences, quadrature
functionals  log-concave densities and their entropy/affine functionals
transport    discrete quadratic-cost optimal transport and the linearity probe
bodies       planar convex bodies, polars, affine surface areas, Banach-Mazur
cli          the ``aelab`` batch driver
"""
from .errors import *  # noqa: F401,F403
from .grid import (Axis, FunctionSpec, GridFunction, check_convexity, legendre_transform,
                   legendre_transform_centered)
from .functionals import (DivergenceSpec, LogConcaveDensity, affine_surface_area_lambda,
                          divergence_sides, identity_intvc_residual, quadratic_fit_distance,
                          reverse_logsobolev_sides, santalo_product_functional)
from .transport import DiscreteMeasure, linearity_probe, solve_quadratic_ot
from .bodies import (ConvexBody, affine_surface_area, asp_boundary, asp_via_gauge,
                     banach_mazur_to_ball, entropy_power, polar, santalo_product_body, volume)

__version__ = "0.1.0"
