"""Barrier-insertion protocols for a single particle in a box with a delta barrier."""
from .spectrum import E0, SpbGeometry, solve_spectrum
from .dynamics import Protocol, propagate, spline_build

__version__ = "0.1.0"
__all__ = ["E0", "SpbGeometry", "solve_spectrum", "Protocol", "propagate", "spline_build"]
