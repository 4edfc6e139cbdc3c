"""Spectral stability of toroidal Vlasov-Maxwell equilibria.

Modules:

``geometry``      cross-section grid, finite-difference operators, velocity rules
``profiles``      equilibrium distribution families ``mu(e, p)``
``equilibrium``   Picard solver for the equilibrium potentials
``trajectories``  reflected characteristics and time averages along them
``projections``   kernel projections and phase-space sampling
``operators``     discrete stability operators and the reduced mode matrix
``stability``     smallest-eigenvalue verdict, witness terms, momentum scans
``modefinder``    growth-rate continuation and mode reconstruction
``plotting``      PNG figures
``cli``           command-line entry points
"""

from .equilibrium import Equilibrium, EquilibriumError, solve_picard
from .geometry import CrossSectionGrid, ToroidalFrame
from .profiles import MuProfile, make_profile
from .stability import StabilityReport, assess, scan_K

__version__ = "0.1.0"

__all__ = [
    "CrossSectionGrid",
    "ToroidalFrame",
    "MuProfile",
    "make_profile",
    "Equilibrium",
    "EquilibriumError",
    "solve_picard",
    "StabilityReport",
    "assess",
    "scan_K",
]
