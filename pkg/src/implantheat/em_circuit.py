"""Electrical network extraction and phasor loop-current solve.

Each wire branch is a resistance in series with a partial self-inductance,
mutually coupled to every other branch.  The induced EMFs come from line
integrals of the source vector potential.  Solving the fundamental-loop
system yields branch current phasors and, via the Joule law, the
time-averaged linear power density that drives the thermal solvers.

Conventions: phasors are PEAK amplitudes with cos(omega*t) time
dependence, so the time-averaged branch power is R |I|^2 / 2.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from . import _kernels
from .errors import AssemblyError, GeometryError, SolverError
from .field_source import MU_0, FieldSource, vector_potential
from .geometry import ImplantNetwork, LoopBasis, fundamental_loops

__all__ = [
    "BranchImpedance",
    "LoopSystem",
    "BranchCurrents",
    "BranchLosses",
    "EmSolution",
    "branch_resistance",
    "assemble_inductances",
    "assemble_loop_system",
    "solve_loop_currents",
    "branch_losses",
    "solve_em",
]

log = logging.getLogger(__name__)

_EMF_GAUSS = np.polynomial.legendre.leggauss(8)


def branch_resistance(length: float, radius: float, conductivity: float) -> float:
    """DC resistance of a round wire: l / (sigma * pi * r^2).

    Skin effect is neglected; at the frequencies of interest the skin
    depth exceeds the wire radius.
    """
    if not (length > 0 and radius > 0 and conductivity > 0):
        raise GeometryError(
            f"need positive length, radius, conductivity; got {length}, {radius}, {conductivity}")
    return length / (conductivity * np.pi * radius**2)


@dataclass(frozen=True)
class BranchImpedance:
    """Per-branch resistances and the full branch inductance matrix.

    ``inductance[i, i]`` is the partial self-inductance of branch i and
    ``inductance[i, j]`` the Neumann mutual between branches i and j.
    """

    resistance: np.ndarray      # (b,) ohm
    inductance: np.ndarray      # (b, b) H, symmetric

    def __post_init__(self):
        R = np.asarray(self.resistance, dtype=float)
        L = np.asarray(self.inductance, dtype=float)
        if np.any(R <= 0):
            raise AssemblyError("non-positive branch resistance")
        if np.any(np.diag(L) <= 0):
            raise AssemblyError("non-positive self-inductance (segment shorter than ~e*r/2?)")
        object.__setattr__(self, "resistance", R)
        object.__setattr__(self, "inductance", L)

    @property
    def n_branches(self) -> int:
        return len(self.resistance)


def assemble_inductances(network: ImplantNetwork, quad_far: int = 3, quad_near: int = 16,
                         near_factor: float = 3.0, drop_below: float = 0.0) -> BranchImpedance:
    """Resistances plus self/mutual inductances for every branch pair.

    Mutual terms are Neumann double line integrals mu0/(4 pi) * dot(dl_i, dl_j)/|r|
    with two-tier Gauss quadrature (`quad_near` points per segment when the
    midpoint gap is below ``near_factor * max(l_i, l_j)``, else `quad_far`).
    Self terms use the straight round-segment closed form
    (mu0 l / 2 pi) (ln(2 l / r) - 1); the internal-flux term is omitted so
    that a polygonal loop sums to the classical external loop inductance.
    Mutual magnitudes below `drop_below` (H) are zeroed.
    """
    segs = network.segments()
    p0 = np.ascontiguousarray(segs[:, 0])
    d = np.ascontiguousarray(segs[:, 1] - segs[:, 0])
    lengths = network.lengths
    r = network.radius
    if np.any(2 * lengths / r <= np.e):
        raise AssemblyError("branch shorter than ~1.36 * radius: thin-wire self-inductance invalid")
    self_coef = (MU_0 / (2 * np.pi)) * lengths * (np.log(2 * lengths / r) - 1.0)

    def gauss01(n):
        x, w = np.polynomial.legendre.leggauss(n)
        return 0.5 * (x + 1.0), 0.5 * w

    gxf, gwf = gauss01(quad_far)
    gxn, gwn = gauss01(quad_near)
    L = np.empty((len(lengths), len(lengths)))
    bad_i, bad_j = _kernels.neumann_mutual_dense(
        p0, d, lengths, np.ascontiguousarray(network.branches),
        gxf, gwf, gxn, gwn, near_factor, self_coef, L)
    if bad_i >= 0:
        raise AssemblyError(
            f"branches {bad_i} and {bad_j} are overlapping collinear segments "
            "(singular Neumann integrand)")
    if drop_below > 0.0:
        off = ~np.eye(len(L), dtype=bool)
        small = (np.abs(L) < drop_below) & off
        L[small] = 0.0
    R = lengths / (network.conductivity * np.pi * r**2)
    return BranchImpedance(resistance=R, inductance=L)


@dataclass(frozen=True)
class LoopSystem:
    """Dense fundamental-loop impedance system Z I = E."""

    z: np.ndarray               # (nl, nl) complex, symmetric
    emf: np.ndarray             # (nl,) complex, V peak
    incidence: sp.csr_matrix    # (nl, b) signed loop-to-branch map
    basis: LoopBasis
    frequency: float

    @property
    def n_loops(self) -> int:
        return len(self.emf)

    @property
    def n_branches(self) -> int:
        return self.incidence.shape[1]


def assemble_loop_system(network: ImplantNetwork, impedances: BranchImpedance,
                         loops: LoopBasis, source: FieldSource) -> LoopSystem:
    """Loop impedance matrix and induced-EMF right-hand side.

    Z = S (R + j omega L) S^T with S the signed loop-branch incidence;
    the EMF of loop k is -j omega times the signed sum of branch line
    integrals of the source vector potential (8-point Gauss per branch).
    """
    b = network.n_branches
    S = _incidence_matrix(loops, b)
    omega = 2.0 * np.pi * source.frequency

    if loops.n_loops == 0:
        return LoopSystem(z=np.zeros((0, 0), dtype=complex), emf=np.zeros(0, dtype=complex),
                          incidence=S, basis=loops, frequency=source.frequency)

    SR = S.multiply(impedances.resistance[None, :])
    z_re = (SR @ S.T).toarray()
    SL = S @ impedances.inductance            # (nl, b) dense
    z_im = omega * (S @ SL.T)                 # (nl, nl)
    z = z_re + 1j * np.asarray(z_im)
    z = 0.5 * (z + z.T)  # symmetrize roundoff

    a = _branch_potential_integrals(network, source)
    emf = -1j * omega * (S @ a)
    return LoopSystem(z=z, emf=emf, incidence=S, basis=loops, frequency=source.frequency)


def _incidence_matrix(loops: LoopBasis, n_branches: int) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    for k, (br, sg) in enumerate(loops.cycles):
        rows.append(np.full(len(br), k))
        cols.append(br)
        vals.append(sg)
    if rows:
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
    return sp.csr_matrix((vals, (rows, cols)), shape=(loops.n_loops, n_branches))


def _branch_potential_integrals(network: ImplantNetwork, source: FieldSource) -> np.ndarray:
    """Line integral of A along each branch (tail -> head), Wb."""
    gx, gw = _EMF_GAUSS
    s = 0.5 * (gx + 1.0)
    w = 0.5 * gw
    segs = network.segments()
    d = segs[:, 1] - segs[:, 0]
    pts = segs[:, None, 0, :] + s[None, :, None] * d[:, None, :]   # (b, G, 3)
    A = vector_potential(source, pts.reshape(-1, 3)).reshape(len(segs), len(s), 3)
    return np.einsum("g,bgj,bj->b", w, A, d)


@dataclass(frozen=True)
class BranchCurrents:
    """Branch current phasors (A peak) plus the Kirchhoff residual."""

    phasors: np.ndarray
    loop_currents: np.ndarray
    kcl_residual: float


def solve_loop_currents(network: ImplantNetwork, system: LoopSystem) -> BranchCurrents:
    """Solve the loop system by complex-symmetric LDL^T and map to branches."""
    if system.n_loops == 0:
        return BranchCurrents(phasors=np.zeros(system.n_branches, dtype=complex),
                              loop_currents=np.zeros(0, dtype=complex), kcl_residual=0.0)
    i_loop = _ldl_solve(system.z, system.emf)
    i_branch = system.incidence.T @ i_loop

    node_sum = np.zeros(network.n_nodes, dtype=complex)
    np.add.at(node_sum, network.branches[:, 1], i_branch)
    np.subtract.at(node_sum, network.branches[:, 0], i_branch)
    scale = np.abs(i_branch).max()
    residual = float(np.abs(node_sum).max() / scale) if scale > 0 else 0.0
    log.debug("loop solve: %d loops, KCL residual %.3e", system.n_loops, residual)
    return BranchCurrents(phasors=i_branch, loop_currents=i_loop, kcl_residual=residual)


def _ldl_solve(z: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve the complex-symmetric system via scipy's LDL^T factorization."""
    lu, dmat, perm = scipy.linalg.ldl(z, hermitian=False)
    lower = lu[perm]
    y = scipy.linalg.solve_triangular(lower, rhs[perm], lower=True, unit_diagonal=True)
    y = _block_diag_solve(dmat, y)
    x_p = scipy.linalg.solve_triangular(lower.T, y, lower=False, unit_diagonal=True)
    x = np.empty_like(x_p)
    x[perm] = x_p
    return x


def _block_diag_solve(d: np.ndarray, y: np.ndarray) -> np.ndarray:
    n = len(y)
    x = np.empty_like(y)
    scale = np.abs(np.diag(d)).max()
    i = 0
    while i < n:
        if i + 1 < n and d[i + 1, i] != 0:
            det = d[i, i] * d[i + 1, i + 1] - d[i, i + 1] * d[i + 1, i]
            if abs(det) <= 1e-300:
                raise SolverError("singular loop impedance matrix (2x2 pivot)")
            x[i] = (d[i + 1, i + 1] * y[i] - d[i, i + 1] * y[i + 1]) / det
            x[i + 1] = (-d[i + 1, i] * y[i] + d[i, i] * y[i + 1]) / det
            i += 2
        else:
            if abs(d[i, i]) <= 1e-14 * max(scale, 1e-300):
                raise SolverError(
                    "singular loop impedance matrix (duplicate branch geometry?)")
            x[i] = y[i] / d[i, i]
            i += 1
    return x


@dataclass(frozen=True)
class BranchLosses:
    """Time-averaged Joule losses per branch."""

    linear_density: np.ndarray   # (b,) W/m
    branch_power: np.ndarray     # (b,) W

    def __post_init__(self):
        if np.any(self.linear_density < 0) or np.any(self.branch_power < 0):
            raise AssemblyError("negative branch loss")

    @property
    def total_power(self) -> float:
        return float(self.branch_power.sum())


def branch_losses(network: ImplantNetwork, impedances: BranchImpedance,
                  currents: BranchCurrents) -> BranchLosses:
    """Joule law per branch, time-averaged: p = R |I_peak|^2 / (2 l)."""
    if len(currents.phasors) != network.n_branches:
        raise AssemblyError("currents/network size mismatch")
    power = 0.5 * impedances.resistance * np.abs(currents.phasors) ** 2
    return BranchLosses(linear_density=power / network.lengths, branch_power=power)


@dataclass(frozen=True)
class EmSolution:
    """Bundle of everything the EM stage produces."""

    loops: LoopBasis
    impedances: BranchImpedance
    system: LoopSystem
    currents: BranchCurrents
    losses: BranchLosses

    @property
    def resistive_loop_power(self) -> float:
        """0.5 * Re(I_loop^H Z I_loop): independent power bookkeeping."""
        i = self.currents.loop_currents
        if len(i) == 0:
            return 0.0
        return float(0.5 * np.real(np.conj(i) @ (self.system.z @ i)))


def solve_em(network: ImplantNetwork, source: FieldSource, *, quad_far: int = 3,
             quad_near: int = 16, near_factor: float = 3.0,
             drop_below: float = 0.0) -> EmSolution:
    """Full EM stage: loop basis, impedances, EMFs, currents, losses."""
    loops = fundamental_loops(network)
    impedances = assemble_inductances(network, quad_far=quad_far, quad_near=quad_near,
                                      near_factor=near_factor, drop_below=drop_below)
    system = assemble_loop_system(network, impedances, loops, source)
    currents = solve_loop_currents(network, system)
    losses = branch_losses(network, impedances, currents)
    log.info("EM solve: %d branches, %d loops, total power %.6e W",
             network.n_branches, loops.n_loops, losses.total_power)
    return EmSolution(loops=loops, impedances=impedances, system=system,
                      currents=currents, losses=losses)
