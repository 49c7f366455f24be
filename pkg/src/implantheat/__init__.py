"""Heating of thin, loop-bearing wire implants in time-varying magnetic fields.

The pipeline has three stages, solved in cascade:

1. ``field_source`` + ``em_circuit``: phasor loop-current solve of the
   implant's electrical network, yielding time-averaged Joule losses per
   branch.
2. ``bioheat3d``: voxel finite-element solver for the bioheat equation in
   temperature-increase form, with the implant losses deposited directly
   into the voxels ("seed" model).
3. ``coupled3d1d``: the mixed-dimensional solver that additionally models
   heat conduction along the wires, coupling a 1D network problem to the
   3D grid through interface flux/trace controls.

``scenarios`` wires the stages together for complete phantom studies and
backs the command-line interface in ``cli``.
"""

from .errors import (
    ImplantHeatError, GeometryError, OutOfDomainError, FieldEvaluationError,
    AssemblyError, SolverError, ConvergenceError, FactorizationError, ConfigError,
)
from .geometry import (
    ImplantNetwork, VoxelGrid, Material, MaterialTable, ProbeBox, LoopBasis,
    build_network, fundamental_loops, clip_branch_to_voxels,
)
from .field_source import UniformHarmonicField, PolylineCoil, vector_potential, flux_density
from .em_circuit import (
    BranchImpedance, LoopSystem, BranchCurrents, BranchLosses,
    branch_resistance, assemble_inductances, assemble_loop_system,
    solve_loop_currents, branch_losses, solve_em,
)
from .sparsekit import SparseSpd, IncompleteCholesky, ic0_factorize, pcg
from .bioheat3d import (
    VolumetricPower, FemSystem3D, TemperatureField3D,
    deposit_power, assemble_3d, step_seed, run_seed,
)
from .coupled3d1d import (
    Mesh1D, ControlMesh, Temperature1D, ControlState, CouplingAssembly,
    CoupledSystem, build_mesh1d, build_control_mesh, assemble_1d,
    assemble_coupling, step_coupled, continuity_mismatch, evaluate_functional,
    run_coupled,
)
from .scenarios import (
    ScenarioConfig, ComparisonReport, tile_cranial_mesh, elementary_cell,
    virtual_probe, ab_limit_check, run_comparison,
)

__version__ = "0.1.0"
