"""Exception hierarchy shared across the package.

The classes group into four families that the command line front end maps to
exit codes: configuration problems (exit 1), numerical/resolution problems
(exit 2), invalid patch geometry (exit 3), and physics signals such as a
trivial phase or a truncation overflow (exit 4).
"""

__all__ = [
    "TKRotorError",
    "ConfigError",
    "NumericalError",
    "BranchCutError",
    "ResolutionError",
    "RegridError",
    "ContinuityError",
    "GaugeError",
    "UnderResolvedLoopError",
    "DegenerateBandsError",
    "InternalConsistencyError",
    "InvalidPatchError",
    "PhysicsSignalError",
    "NotTopologicalError",
    "TruncationError",
]


class TKRotorError(Exception):
    """Base class for all package errors."""


class ConfigError(TKRotorError):
    """Invalid or inconsistent run configuration."""


class NumericalError(TKRotorError):
    """Numerical failure: lost unitarity, failed decomposition, and similar."""


class BranchCutError(NumericalError):
    """An eigenphase fell within tolerance of the quasienergy branch cut.

    The caller should recenter the branch (shift ``branch_center``) and retry.
    """


class ResolutionError(NumericalError):
    """The requested quantity is not resolved at the current grid resolution."""


class RegridError(ResolutionError):
    """A band degeneracy sits exactly on a grid edge; rerun with an offset grid."""


class ContinuityError(NumericalError):
    """Band continuation between neighboring grid points was ambiguous."""


class GaugeError(NumericalError):
    """Realification failed: residual imaginary part above tolerance.

    Signals broken PT symmetry upstream (wrong gauge or a non-symmetric
    operator), not a topology feature.
    """


class UnderResolvedLoopError(NumericalError):
    """A Wilson-loop overlap magnitude fell below the trust threshold."""


class DegenerateBandsError(NumericalError):
    """Bands are degenerate along lines or everywhere (e.g. the free rotor)."""


class InternalConsistencyError(NumericalError):
    """An invariant that should be structurally impossible to break broke."""


class InvalidPatchError(TKRotorError):
    """Patch rectangle violates node/string clearance requirements."""


class PhysicsSignalError(TKRotorError):
    """Not a failure of the numerics: the physics vetoed the request."""


class NotTopologicalError(PhysicsSignalError):
    """No in-gap edge state exists at the requested pulses (trivial phase)."""


class TruncationError(PhysicsSignalError):
    """State weight reached the angular momentum cutoff; enlarge l_max."""
