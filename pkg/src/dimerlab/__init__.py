"""Exact and stochastic analysis of dimer models on decorated tori.

Core objects: weighted bipartite cells on a periodic square lattice with
optional in-cell bridge edges that cannot be drawn planarly.  The package
computes partition functions (Pfaffian-free determinant form and a signed
sector expansion for the bridges), exact enumerations for small tori,
spectral data and inverse-matrix asymptotics in the liquid phase, and
Monte Carlo height statistics.
"""

from . import errors
from .lattice import (
    BridgeSpec,
    CellSpec,
    TorusGraph,
    anisotropic_spec,
    build_graph,
    load_spec,
    row_bridge_spec,
    save_spec,
    square_torus_graph,
    uniform_spec,
    validate_spec,
)

__all__ = [
    "BridgeSpec",
    "CellSpec",
    "TorusGraph",
    "anisotropic_spec",
    "build_graph",
    "errors",
    "load_spec",
    "row_bridge_spec",
    "save_spec",
    "square_torus_graph",
    "uniform_spec",
    "validate_spec",
]

__version__ = "0.1.0"
