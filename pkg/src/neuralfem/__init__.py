"""neuralfem: physics-informed graph-network surrogates for parabolic PDEs.

Trains MeshGraphNet-style message-passing models against a P1 finite
element residual (no simulation data needed) and validates them against
the built-in implicit-Euler reference solver.
"""

__version__ = "0.1.0"
