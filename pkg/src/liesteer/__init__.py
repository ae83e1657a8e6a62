"""liesteer: Hall bases, Magnus-type control coordinates, moment problems,
and quadratic steering for control-affine ODEs and a Galerkin bilinear
Schrodinger model on (0,1) with Dirichlet sine modes.

Subpackages are plain modules; import what you need:

    from liesteer import free_lie, signals, vector_fields, moments
    from liesteer import ode_control, galerkin, quad_schrodinger, mu_design
"""

__version__ = "0.1.0"

__all__ = [
    "free_lie",
    "vector_fields",
    "signals",
    "moments",
    "ode_control",
    "galerkin",
    "quad_schrodinger",
    "mu_design",
]
