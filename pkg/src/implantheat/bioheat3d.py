"""Voxel FEM solver for the bioheat equation in temperature-increase form.

Trilinear (8-node) hexahedral elements on the voxel grid, element-wise
constant material coefficients, Robin heat exchange on the bounding-box
faces, and backward-Euler stepping with a PCG + IC(0) linear solve.  The
implant enters as volumetric power deposited voxel-wise ("thermal seed"
forcing): each voxel receives the power dissipated by the wire portions
crossing it, divided by the voxel volume.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .em_circuit import BranchLosses
from .errors import AssemblyError, GeometryError
from .geometry import ImplantNetwork, MaterialTable, VoxelGrid, clip_branch_to_voxels
from .sparsekit import IncompleteCholesky, SparseSpd, ic0_factorize, pcg

__all__ = [
    "VolumetricPower",
    "FemSystem3D",
    "TemperatureField3D",
    "deposit_power",
    "assemble_3d",
    "step_seed",
    "run_seed",
    "sample_trilinear",
]

log = logging.getLogger(__name__)


def _element_matrices(spacing):
    """Reference trilinear mass/stiffness for an hx * hy * hz box.

    Exact integration of the polynomial integrands; corner ordering is
    (dx, dy, dz) with x fastest, matching VoxelGrid.voxel_corner_nodes.
    """
    hx, hy, hz = spacing
    m1 = [np.array([[2.0, 1.0], [1.0, 2.0]]) * (h / 6.0) for h in (hx, hy, hz)]
    k1 = [np.array([[1.0, -1.0], [-1.0, 1.0]]) / h for h in (hx, hy, hz)]
    mass = np.kron(m1[2], np.kron(m1[1], m1[0]))
    stiff = (np.kron(m1[2], np.kron(m1[1], k1[0]))
             + np.kron(m1[2], np.kron(k1[1], m1[0]))
             + np.kron(k1[2], np.kron(m1[1], m1[0])))
    return mass, stiff


@dataclass
class VolumetricPower:
    """Per-voxel dissipated power density (W/m^3), flat x-fastest order."""

    grid: VoxelGrid
    density: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.density, dtype=float)
        if d.shape != (self.grid.n_voxels,):
            raise AssemblyError(f"density must be flat ({self.grid.n_voxels},), got {d.shape}")
        if np.any(d < 0):
            raise AssemblyError("negative volumetric power")
        self.density = d

    @property
    def total_power(self) -> float:
        return float(self.density.sum() * self.grid.voxel_volume)


def deposit_power(network: ImplantNetwork, losses: BranchLosses,
                  grid: VoxelGrid) -> VolumetricPower:
    """Distribute per-branch linear losses into the voxels they cross.

    Every voxel receives sum(p_em_l * sub-length) over the wire portions
    inside it, divided by the voxel volume; total power is conserved
    exactly up to roundoff.
    """
    power = np.zeros(grid.n_voxels)
    segs = network.segments()
    for b in range(network.n_branches):
        p_lin = losses.linear_density[b]
        if p_lin == 0.0:
            continue
        voxels, lengths, _ = clip_branch_to_voxels(segs[b, 0], segs[b, 1], grid, branch_id=b)
        np.add.at(power, voxels, p_lin * lengths)
    return VolumetricPower(grid=grid, density=power / grid.voxel_volume)


class FemSystem3D:
    """Assembled FEM operators for one grid/material combination.

    Matrices: mass (rho c_p weighted), stiffness (lambda), perfusion
    (h_b), and the Robin boundary matrix (h_amb on bounding-box faces);
    all symmetric, and the backward-Euler system matrix is SPD for any
    positive time step.
    """

    def __init__(self, grid, mass, stiffness, perfusion, robin, load, h_amb):
        self.grid = grid
        self.mass = mass
        self.stiffness = stiffness
        self.perfusion = perfusion
        self.robin = robin
        self.load = load
        self.h_amb = h_amb
        self.lumped_mass = np.asarray(mass.sum(axis=1)).ravel()
        self._op_cache: dict[float, tuple] = {}

    @property
    def n_nodes(self) -> int:
        return self.grid.n_nodes

    def with_load(self, power: VolumetricPower | None) -> "FemSystem3D":
        """A sibling system sharing matrices (and the factor cache) with a
        different load vector; used to drive the seed and coupled models
        from one assembly."""
        load = _load_vector(self.grid, power.density) if power is not None \
            else np.zeros(self.n_nodes)
        twin = FemSystem3D.__new__(FemSystem3D)
        twin.__dict__.update(self.__dict__)
        twin.load = load
        return twin

    def set_load(self, power: VolumetricPower | None):
        """Replace the load vector with one assembled from voxel power."""
        if power is None:
            self.load = np.zeros(self.n_nodes)
            return
        if power.grid is not self.grid and power.grid.n_voxels != self.grid.n_voxels:
            raise AssemblyError("power grid does not match system grid")
        self.load = _load_vector(self.grid, power.density)

    def operator(self, dt: float):
        """(system matrix, IC(0) preconditioner) for time step dt, cached.

        The cache dict is shared with `with_load` twins, so the seed and
        coupled models factor each time-step matrix only once.
        """
        if not (dt > 0):
            raise AssemblyError(f"time step must be positive, got {dt}")
        if dt not in self._op_cache:
            if len(self._op_cache) > 2:
                self._op_cache.clear()  # bound memory across dt sweeps
            a = (self.mass * (1.0 / dt) + self.stiffness + self.perfusion
                 + self.robin).tocsr()
            a.sort_indices()
            spd = SparseSpd(a, validate=False)
            self._op_cache[dt] = (spd, ic0_factorize(spd))
        return self._op_cache[dt]

    def total_energy(self, values: np.ndarray) -> float:
        """integral rho c_p theta dV for a nodal field (J/degC increase)."""
        return float(self.lumped_mass @ values)


@dataclass
class TemperatureField3D:
    """Nodal temperature increase (degC) on the grid at time t (s)."""

    grid: VoxelGrid
    values: np.ndarray
    time: float = 0.0

    def copy(self) -> "TemperatureField3D":
        return TemperatureField3D(self.grid, self.values.copy(), self.time)

    def sample(self, pts) -> np.ndarray:
        return sample_trilinear(self.grid, self.values, pts)


def sample_trilinear(grid: VoxelGrid, nodal_values: np.ndarray, pts) -> np.ndarray:
    """Evaluate a nodal field at arbitrary points inside the grid."""
    ids, w = grid.trilinear_basis(pts)
    return np.einsum("pk,pk->p", nodal_values[ids], w)


def _load_vector(grid: VoxelGrid, density: np.ndarray) -> np.ndarray:
    corners = grid.voxel_corner_nodes()
    w = density * (grid.voxel_volume / 8.0)
    return np.bincount(corners.ravel(), weights=np.repeat(w, 8),
                       minlength=grid.n_nodes)


def _scatter_matrix(rows_ids, elem_vals, coeffs, n_nodes):
    """CSR from per-element dense blocks weighted by per-element coefficients.

    rows_ids : (ne, k) node ids per element; elem_vals : (k, k) reference
    block; coeffs : (ne,) element coefficients.
    """
    ne, k = rows_ids.shape
    nz = coeffs != 0.0
    if not np.any(nz):
        return sp.csr_matrix((n_nodes, n_nodes))
    ids = rows_ids[nz].astype(np.int32)
    c = coeffs[nz]
    rows = np.repeat(ids, k, axis=1).ravel()
    cols = np.tile(ids, (1, k)).ravel()
    vals = np.outer(c, elem_vals.ravel()).ravel()
    m = sp.coo_matrix((vals, (rows, cols)), shape=(n_nodes, n_nodes)).tocsr()
    m.sum_duplicates()
    m.sort_indices()
    return m


def assemble_3d(grid: VoxelGrid, materials: MaterialTable, h_amb: float = 0.0,
                power: VolumetricPower | None = None) -> FemSystem3D:
    """Assemble mass/stiffness/perfusion/Robin matrices and the load vector.

    Material coefficients are element-wise constant (per voxel); the Robin
    term with coefficient `h_amb` covers every exterior face of the grid
    bounding box (h_amb = 0 gives adiabatic walls).
    """
    if h_amb < 0:
        raise AssemblyError(f"h_amb must be >= 0, got {h_amb}")
    lam, rhoc, hb = materials.property_arrays(grid.material_flat())
    mass_ref, stiff_ref = _element_matrices(grid.spacing)
    corners = grid.voxel_corner_nodes()
    n = grid.n_nodes

    mass = _scatter_matrix(corners, mass_ref, rhoc, n)
    stiffness = _scatter_matrix(corners, stiff_ref, lam, n)
    perfusion = _scatter_matrix(corners, mass_ref, hb, n)
    robin = _robin_matrix(grid, h_amb)

    load = _load_vector(grid, power.density) if power is not None else np.zeros(n)
    return FemSystem3D(grid, mass, stiffness, perfusion, robin, load, h_amb)


def _robin_matrix(grid: VoxelGrid, h_amb: float) -> sp.csr_matrix:
    n = grid.n_nodes
    if h_amb == 0.0:
        return sp.csr_matrix((n, n))
    nx, ny, nz = grid.dims
    hx, hy, hz = grid.spacing
    # 2D face mass on [0,ha]x[0,hb] with corner order (da, db), a fastest
    m1 = lambda h: np.array([[2.0, 1.0], [1.0, 2.0]]) * (h / 6.0)
    blocks = []
    all_vox = np.arange(grid.n_voxels)
    ix = all_vox % nx
    iy = (all_vox // nx) % ny
    iz = all_vox // (nx * ny)
    corners = grid.voxel_corner_nodes()
    # (side selector, face corner ids within the 8, face reference matrix)
    faces = [
        (ix == 0, [0, 2, 4, 6], np.kron(m1(hz), m1(hy))),
        (ix == nx - 1, [1, 3, 5, 7], np.kron(m1(hz), m1(hy))),
        (iy == 0, [0, 1, 4, 5], np.kron(m1(hz), m1(hx))),
        (iy == ny - 1, [2, 3, 6, 7], np.kron(m1(hz), m1(hx))),
        (iz == 0, [0, 1, 2, 3], np.kron(m1(hy), m1(hx))),
        (iz == nz - 1, [4, 5, 6, 7], np.kron(m1(hy), m1(hx))),
    ]
    for mask, face_ids, ref in faces:
        vox = corners[mask][:, face_ids]
        blocks.append(_scatter_matrix(vox, ref, np.full(len(vox), h_amb), n))
    total = blocks[0]
    for b in blocks[1:]:
        total = total + b
    return total.tocsr()


def step_seed(system: FemSystem3D, state: TemperatureField3D, dt: float, *,
              rtol: float = 1e-7, maxit: int | None = None) -> tuple[TemperatureField3D, int]:
    """One backward-Euler step of the seed model.

    Solves (M/dt + K + P + B) theta_new = M theta_old / dt + f with PCG
    preconditioned by IC(0), warm-started from the previous field.
    Returns the new field and the PCG iteration count.
    """
    a, precond = system.operator(dt)
    rhs = system.mass @ (state.values / dt) + system.load
    x, iters, _ = pcg(a, rhs, precond, rtol=rtol, maxit=maxit, x0=state.values)
    return TemperatureField3D(system.grid, x, state.time + dt), iters


def run_seed(system: FemSystem3D, duration: float, dt: float, *, rtol: float = 1e-7,
             on_step=None) -> tuple[TemperatureField3D, list[int]]:
    """March the seed model from a zero field to `duration` in steps of `dt`.

    `on_step(state)` is invoked after every accepted step.  The final
    partial step, if `duration` is not a multiple of `dt`, is shortened.
    """
    if not (duration > 0 and dt > 0):
        raise GeometryError("duration and dt must be positive")
    state = TemperatureField3D(system.grid, np.zeros(system.n_nodes), 0.0)
    iteration_counts = []
    t = 0.0
    while t < duration - 1e-9 * duration:
        step = min(dt, duration - t)
        state, iters = step_seed(system, state, step, rtol=rtol)
        iteration_counts.append(iters)
        t = state.time
        if on_step is not None:
            on_step(state)
    return state, iteration_counts
