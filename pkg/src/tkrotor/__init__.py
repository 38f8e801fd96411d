"""Multi-gap band topology and stroboscopic dynamics of kicked quantum rotors.

The package models a linear rotor driven by three short kicks per period at
an N-th order quantum resonance of the free rotation.  The resulting Floquet
problem is an N-band lattice model on the angular momentum ladder; its bands
carry multi-gap invariants (quantized Zak phases, Dirac strings, patch Euler
class) that the submodules compute, together with the stroboscopic dynamics
that witnesses them.

Modules
-------
angular
    Kick potential matrix elements on the angular momentum lattice.
floquet
    One-period operators, realified band frames, band grids.
topology
    Node detection, Dirac strings, Zak phases, patch Euler class.
dynamics
    Protocol presets, initial states, stroboscopic evolution.
cli
    ``tkrotor`` command line front end.
"""

from .angular import (
    LatticeSpec,
    PotentialMatrix,
    PulseVector,
    bloch_potential,
    exact_cos2_element,
    exact_cos_element,
    real_space_potential,
)
from .cli import RunConfig
from .dynamics import (
    EvolutionTrace,
    Protocol,
    RotorState,
    edge_state,
    evolve,
    observables,
    protocol_preset,
    thermal_state,
)
from .errors import (
    ConfigError,
    InvalidPatchError,
    NumericalError,
    PhysicsSignalError,
    TKRotorError,
)
from .floquet import (
    BandFrame,
    BandGrid,
    BlochOperator,
    all_gaps,
    band_grid,
    bloch_reduce,
    build_u_tkr_bloch,
    build_u_tkr_real,
    effective_hamiltonian,
    free_phase,
    gap_function,
    parity_eigenbasis,
    parity_matrix,
    realification_transform,
    realify,
)
from .topology import (
    EulerReport,
    NodalLineMap,
    NodeRecord,
    PatchSpec,
    StringAssignment,
    StringRecord,
    ZakRecord,
    assign_dirac_strings,
    detect_nodes,
    enclosing_patch,
    euler_form,
    nodal_line_map,
    patch_euler_class,
    patch_euler_report,
    plaquette_fluxes,
    zak_phase,
    zak_phases,
    zak_records,
)

__version__ = "0.1.0"

__all__ = [
    "LatticeSpec",
    "PulseVector",
    "PotentialMatrix",
    "exact_cos_element",
    "exact_cos2_element",
    "real_space_potential",
    "bloch_potential",
    "free_phase",
    "BlochOperator",
    "BandFrame",
    "BandGrid",
    "build_u_tkr_bloch",
    "build_u_tkr_real",
    "effective_hamiltonian",
    "parity_matrix",
    "parity_eigenbasis",
    "realification_transform",
    "realify",
    "gap_function",
    "all_gaps",
    "band_grid",
    "bloch_reduce",
    "NodeRecord",
    "ZakRecord",
    "PatchSpec",
    "StringRecord",
    "StringAssignment",
    "EulerReport",
    "NodalLineMap",
    "plaquette_fluxes",
    "detect_nodes",
    "zak_phase",
    "zak_phases",
    "zak_records",
    "assign_dirac_strings",
    "euler_form",
    "patch_euler_class",
    "patch_euler_report",
    "enclosing_patch",
    "nodal_line_map",
    "Protocol",
    "RotorState",
    "EvolutionTrace",
    "protocol_preset",
    "thermal_state",
    "edge_state",
    "observables",
    "evolve",
    "RunConfig",
    "TKRotorError",
    "ConfigError",
    "NumericalError",
    "InvalidPatchError",
    "PhysicsSignalError",
    "__version__",
]
