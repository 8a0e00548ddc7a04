"""Multilevel quasidiffusion solver for 2D thermal radiative transfer.

Long-characteristics transport on a fine ray grid closes multigroup and
effective grey low-order moment equations on a coarser material grid.
"""
import os

# numba prefers TBB, which falls back to OpenMP with a warning when too old
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

from .driver import (ConvergenceError, FieldState, IterationControls, IterationRecord, Problem,
                     Simulation, TimeControls, fleck_cummings)
from .mesh import CharacteristicGrid, MaterialGrid
from .physics import FrequencyGrid, MaterialEOS, OpacityModel, PhysicalConstants
from .quadrature import AngularQuadrature, build_product_quadrature
from .transport import BoundarySpec

__all__ = [
    "AngularQuadrature", "BoundarySpec", "CharacteristicGrid", "ConvergenceError", "FieldState",
    "FrequencyGrid", "IterationControls", "IterationRecord", "MaterialEOS", "MaterialGrid",
    "OpacityModel", "PhysicalConstants", "Problem", "Simulation", "TimeControls",
    "build_product_quadrature", "fleck_cummings",
]
__version__ = "0.1.0"
