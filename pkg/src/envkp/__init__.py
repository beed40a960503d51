"""Envelope-function spectral toolkit for waves in periodic media.

Subpackages by concern: ``lattice`` (geometry), ``bloch`` (cell spectra,
fiber family, effective masses), ``envelope`` (two-scale transform),
``potential`` (external potential operators), ``dynamics`` (Strang
propagators), ``harness`` (experiments, rate fits, reports) and ``cli``.
"""

from . import bloch, dynamics, envelope, errors, harness, lattice, potential

__all__ = [
    "bloch",
    "dynamics",
    "envelope",
    "errors",
    "harness",
    "lattice",
    "potential",
]

__version__ = "0.1.0"
