"""Exception types shared across the package."""


class EnvkpError(Exception):
    """Base class for all package-specific errors."""


class SingularLattice(EnvkpError):
    """Direct lattice matrix is (numerically) singular."""


class DegenerateSpectrum(EnvkpError):
    """Retained cell eigenvalues violate the simplicity-gap requirement."""


class BasisTooSmall(EnvkpError):
    """More bands requested than planewaves in the basis."""


class GridMismatch(EnvkpError):
    """Field shapes, sample times or frequency grids do not line up."""


class AliasedCell(EnvkpError):
    """Cell harmonics cannot be represented without aliasing on this grid."""


class BoundViolated(EnvkpError):
    """A proved inequality failed numerically; indicates a solver bug.

    Carries the offending data as ``args`` so callers can report it.
    """


class StepTooLarge(EnvkpError):
    """Finite-difference stencil contains an eigenvalue crossing."""


class CrossingInsideZone(UserWarning):
    """Eigenvalue ordering changed along the sampled momentum grid."""


class InsufficientPoints(EnvkpError):
    """Too few usable points for a rate fit."""


class ConfigInvalid(EnvkpError):
    """Experiment configuration failed validation."""
