"""A short tour of the library API on the standard examples."""
import math

import numpy as np

from aelab.bodies import (ConvexBody, asp_boundary, asp_via_gauge, banach_mazur_to_ball,
                          santalo_product_body)
from aelab.functionals import (DivergenceSpec, LogConcaveDensity, divergence_sides,
                               santalo_product_functional)
from aelab.grid import FunctionSpec
from aelab.transport import linearity_probe

A = np.diag([2.0, 0.5])

# Functional Santalo product: (2 pi)^n for Gaussians, smaller otherwise
for spec in (FunctionSpec.quadratic(A), FunctionSpec.quartic(A, 0.2)):
    prod, ratio = santalo_product_functional(LogConcaveDensity.from_spec(spec))
    print(f"{spec.variant:18s} Santalo product {prod:.5f}  ratio {ratio:.5f}")

# Divergence inequality: equality for quadratics, strict for the quartic
for spec in (FunctionSpec.quadratic(A, 0.3), FunctionSpec.quartic(A, 0.2)):
    lhs, rhs = divergence_sides(DivergenceSpec("log"), LogConcaveDensity.from_spec(spec))
    print(f"{spec.variant:18s} log divergence lhs {lhs:.6f}  rhs {rhs:.6f}")

# Transport probe: the optimal map between the density pair is x -> A x
r = linearity_probe(FunctionSpec.quadratic(A))
print("fitted map", np.round(r.A_hat, 4).tolist(), f"residual {r.residual:.2e}")

# Bodies: affine surface area two ways, Santalo ratio and distance to the disk
E = ConvexBody.ellipse(2.0, 1.0)
print(f"as_1(ellipse) boundary {asp_boundary(E, 1):.5f}  gauge {asp_via_gauge(E, 1):.5f}  "
      f"closed form {2 * math.pi * 2 ** (1 / 3):.5f}")
sq = ConvexBody.square()
print(f"square Santalo ratio {santalo_product_body(sq)[1]:.5f}  d_BM {banach_mazur_to_ball(sq):.5f}")
