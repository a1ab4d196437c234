"""geoxray: geodesic X-ray transform tooling on 2D simple manifolds.

Forward/adjoint transforms, two independent constructions of the normal
operator, singular-kernel and symbol analysis, a leading-order parametrix,
and parametrix-preconditioned reconstruction, with a verification harness.
"""

__version__ = "0.1.0"
