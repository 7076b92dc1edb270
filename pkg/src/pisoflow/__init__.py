"""Differentiable incompressible flow solver on multi-block structured grids.

Pressure-implicit operator-split time stepping with analytic reverse-mode
gradients through every stage, online turbulence statistics, and a small
case/optimization layer driven by a text config format.
"""

from .kernels import LANE

__version__ = "0.1.0"

__all__ = ["LANE", "__version__"]
