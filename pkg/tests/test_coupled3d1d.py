import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla

import implantheat as ih
from implantheat.bioheat3d import assemble_3d
from implantheat.coupled3d1d import (CoupledSystem, assemble_1d, assemble_coupling,
                                     build_control_mesh, build_mesh1d,
                                     continuity_mismatch, evaluate_functional,
                                     run_coupled, step_coupled)
from implantheat.em_circuit import BranchLosses
from implantheat.errors import AssemblyError, OutOfDomainError

from conftest import square_loop_segments


def wire_setup(h=2e-3, n=20, p_lin=50.0, h_b=2e4, lam=0.6):
    """Single straight heated wire through a homogeneous perfused block."""
    med = ih.Material("med", lam, 1006.0, 4200.0, h_b)
    mats = ih.MaterialTable({1: med})
    side = n * h
    grid = ih.VoxelGrid(origin=(0, 0, 0), spacing=h, dims=(n, n, n),
                        material=np.ones((n, n, n), dtype=np.int32))
    mid = side / 2
    net = ih.build_network([[(mid, mid, 0.0), (mid, mid, side)]], 3e-4, 1.82e6)
    losses = BranchLosses(linear_density=np.array([p_lin]),
                          branch_power=np.array([p_lin * side]))
    fem = assemble_3d(grid, mats, h_amb=0.0)
    return med, grid, net, losses, fem


def axisymmetric_reference(p_lin, r_w, lam, hb, r_out=0.02, nr=6000):
    """Steady conforming finite-volume oracle in cylindrical coordinates."""
    dr = r_out / nr
    rc = (np.arange(nr) + 0.5) * dr
    rf = np.arange(nr + 1) * dr
    main = np.zeros(nr)
    lower = np.zeros(nr - 1)
    upper = np.zeros(nr - 1)
    rhs = np.zeros(nr)
    for i in range(nr):
        vol = rc[i] * dr
        aw = rf[i] * lam / dr if i > 0 else 0.0
        ae = rf[i + 1] * lam / dr if i < nr - 1 else 0.0
        main[i] = aw + ae + (hb if rc[i] > r_w else 0.0) * vol
        if i > 0:
            lower[i - 1] = -aw
        if i < nr - 1:
            upper[i] = -ae
        rhs[i] = (p_lin / (np.pi * r_w**2) if rc[i] < r_w else 0.0) * vol
    mat = sp.diags([lower, main, upper], [-1, 0, 1], format="csc")
    return rc, spla.spsolve(mat, rhs)


class TestMesh1d:
    def test_subdivision_counts(self):
        net = ih.build_network([[(0, 0, 0), (10e-3, 0, 0)]], 1e-4, 1e6)
        mesh = build_mesh1d(net, 2e-3)
        assert mesh.n_cells == 5
        assert mesh.n_nodes == 6
        np.testing.assert_allclose(mesh.cell_length, 2e-3)

    def test_closed_square_shares_junctions(self):
        net = ih.build_network(square_loop_segments(side=10e-3), 1e-4, 1e6)
        mesh = build_mesh1d(net, 10e-3)
        assert mesh.n_cells == 4
        assert mesh.n_nodes == 4

    def test_mesh_at_segment_length_reproduces_network(self):
        segs = square_loop_segments(side=10e-3) + [[(0, 0, 0), (-5e-3, 0, 0)]]
        net = ih.build_network(segs, 1e-4, 1e6)
        mesh = build_mesh1d(net, float(net.lengths.max()))
        assert mesh.n_nodes == net.n_nodes
        assert mesh.n_cells == net.n_branches

    def test_total_length_preserved(self):
        net = ih.build_network(square_loop_segments(side=7e-3), 1e-4, 1e6)
        mesh = build_mesh1d(net, 1.9e-3)
        assert mesh.total_length == pytest.approx(net.lengths.sum(), rel=1e-12)


class TestControlMesh:
    def test_identity_coarsening(self):
        net = ih.build_network([[(0, 0, 0), (10e-3, 0, 0)]], 1e-4, 1e6)
        mesh = build_mesh1d(net, 1e-3)
        ctrl = build_control_mesh(mesh, 1)
        assert ctrl.n_phi == mesh.n_cells
        np.testing.assert_allclose(ctrl.control_length, mesh.cell_length)

    def test_remainder_merges_into_last(self):
        net = ih.build_network([[(0, 0, 0), (10e-3, 0, 0)]], 1e-4, 1e6)
        mesh = build_mesh1d(net, 1e-3)  # 10 cells
        ctrl = build_control_mesh(mesh, 3)
        assert ctrl.n_phi == 3
        np.testing.assert_allclose(ctrl.control_length, [3e-3, 3e-3, 4e-3])

    def test_full_coverage_partition(self):
        segs = square_loop_segments(side=9e-3) + [[(0, 0, 0), (0, 0, 5e-3)]]
        net = ih.build_network(segs, 1e-4, 1e6)
        mesh = build_mesh1d(net, 1.4e-3)
        ctrl = build_control_mesh(mesh, 2)
        # every 1D cell belongs to exactly one control cell
        assert ctrl.control_of_cell.shape == (mesh.n_cells,)
        assert ctrl.control_of_cell.min() >= 0
        assert ctrl.control_of_cell.max() == ctrl.n_phi - 1
        for c in range(ctrl.n_phi):
            members = np.nonzero(ctrl.control_of_cell == c)[0]
            assert mesh.cell_length[members].sum() == pytest.approx(
                ctrl.control_length[c], rel=1e-12)


class TestAssemble1d:
    def test_zero_losses_zero_load(self, titanium):
        net = ih.build_network(square_loop_segments(side=8e-3), 3e-4, 1e6)
        mesh = build_mesh1d(net, 2e-3)
        losses = BranchLosses(linear_density=np.zeros(4), branch_power=np.zeros(4))
        sys1d = assemble_1d(mesh, net.radius, titanium, losses)
        assert np.all(sys1d.load == 0)

    def test_load_total_equals_power(self, titanium):
        segs = square_loop_segments(side=9e-3) + [[(0, 0, 0), (0, 0, 4e-3)]]
        net = ih.build_network(segs, 3e-4, 1e6)
        mesh = build_mesh1d(net, 1.1e-3)
        rng = np.random.default_rng(3)
        p = rng.uniform(0.1, 3.0, net.n_branches)
        losses = BranchLosses(linear_density=p, branch_power=p * net.lengths)
        sys1d = assemble_1d(mesh, net.radius, titanium, losses)
        assert sys1d.total_load == pytest.approx(losses.total_power, rel=1e-10)

    def test_matrices_symmetric(self, titanium):
        net = ih.build_network(square_loop_segments(side=8e-3), 3e-4, 1e6)
        mesh = build_mesh1d(net, 1e-3)
        losses = BranchLosses(linear_density=np.ones(4), branch_power=net.lengths)
        sys1d = assemble_1d(mesh, net.radius, titanium, losses)
        assert (sys1d.mass - sys1d.mass.T).nnz == 0
        assert (sys1d.stiffness - sys1d.stiffness.T).nnz == 0

    def test_missing_losses_rejected(self, titanium):
        net = ih.build_network(square_loop_segments(side=8e-3), 3e-4, 1e6)
        mesh = build_mesh1d(net, 1e-3)
        with pytest.raises(AssemblyError):
            assemble_1d(mesh, net.radius, titanium,
                        BranchLosses(linear_density=np.ones(2), branch_power=np.ones(2)))


class TestCoupling:
    def setup_method(self):
        self.grid = ih.VoxelGrid(origin=(0, 0, 0), spacing=2e-3, dims=(8, 8, 8))
        segs = [[(3.1e-3, 4.2e-3, 2.5e-3), (12.3e-3, 9.7e-3, 13.1e-3)],
                [(12.3e-3, 9.7e-3, 13.1e-3), (5e-3, 11e-3, 6e-3)]]
        self.net = ih.build_network(segs, 3e-4, 1e6)
        self.mesh = build_mesh1d(self.net, 1.5e-3)
        self.ctrl = build_control_mesh(self.mesh, 2)
        self.cpl = assemble_coupling(self.grid, self.mesh, self.ctrl, self.net.radius)

    def test_partition_of_unity_column_sums(self):
        colsums = np.asarray(self.cpl.d3.sum(axis=0)).ravel()
        expected = 2 * np.pi * self.net.radius * self.ctrl.control_length
        np.testing.assert_allclose(colsums, expected, rtol=1e-10)
        colsums1 = np.asarray(self.cpl.c1.sum(axis=0)).ravel()
        np.testing.assert_allclose(colsums1, expected, rtol=1e-10)

    def test_support_is_eight_corner_nodes(self):
        grid = ih.VoxelGrid(origin=(0, 0, 0), spacing=2e-3, dims=(4, 4, 4))
        net = ih.build_network([[(2.4e-3, 2.5e-3, 2.2e-3), (3.6e-3, 3.4e-3, 3.7e-3)]],
                               1e-4, 1e6)
        mesh = build_mesh1d(net, 5e-3)  # single cell inside one voxel
        ctrl = build_control_mesh(mesh, 1)
        cpl = assemble_coupling(grid, mesh, ctrl, net.radius)
        nodes = np.unique(cpl.t3.indices)
        assert len(nodes) == 8
        corners = grid.voxel_corner_nodes(np.array([grid.voxel_flat(np.array([1, 1, 1]))]))
        assert set(nodes) == set(corners.ravel())

    def test_line_integral_against_dense_sampling(self):
        # integrate the x coordinate along the network via the trace matrix
        nodal_x = self.grid.node_coords()[:, 0]
        via_trace = self.cpl.weights @ (self.cpl.t3 @ nodal_x)
        # dense-sampling oracle
        total = 0.0
        for seg, length in zip(self.net.segments(), self.net.lengths):
            t = (np.arange(20000) + 0.5) / 20000
            pts = seg[0] + t[:, None] * (seg[1] - seg[0])
            total += pts[:, 0].mean() * length
        assert via_trace == pytest.approx(total, rel=1e-8)

    def test_quadrature_point_outside_grid(self):
        net = ih.build_network([[(1e-3, 1e-3, 1e-3), (50e-3, 1e-3, 1e-3)]], 1e-4, 1e6)
        mesh = build_mesh1d(net, 5e-3)
        ctrl = build_control_mesh(mesh, 1)
        with pytest.raises(OutOfDomainError):
            assemble_coupling(self.grid, mesh, ctrl, net.radius)

    def test_mismatch_trivial_cases(self):
        n3 = self.grid.n_nodes
        theta3 = np.full(n3, 2.0)
        theta1_exact = self.cpl.t1.T @ np.zeros(0) if False else np.full(self.mesh.n_nodes, 2.0)
        assert continuity_mismatch(self.cpl, theta3, theta1_exact) == pytest.approx(0.0, abs=1e-14)
        assert continuity_mismatch(self.cpl, theta3, 1.01 * theta1_exact) == \
            pytest.approx(0.01, rel=1e-10)
        assert continuity_mismatch(self.cpl, np.zeros(n3), np.zeros(self.mesh.n_nodes)) == 0.0


class TestCoupledStep:
    def test_null_forcing_null_state(self, titanium):
        med, grid, net, losses, fem = wire_setup(n=8)
        zero = BranchLosses(linear_density=np.zeros(1), branch_power=np.zeros(1))
        cs = CoupledSystem.build(fem, net, zero, titanium, h1d=2e-3)
        state, diag = step_coupled(cs, cs.zero_state(), 10.0)
        assert np.all(state.theta3.values == 0)
        assert np.all(state.theta1.values == 0)
        assert np.all(state.control.phi == 0)
        assert np.all(state.control.psi == 0)
        assert diag.functional_final == 0.0

    def test_functional_quadratic_in_constant_psi_shift(self, titanium):
        med, grid, net, losses, fem = wire_setup(n=8)
        cs = CoupledSystem.build(fem, net, losses, titanium, h1d=2e-3)
        state, _ = step_coupled(cs, cs.zero_state(), 50.0)
        j0 = evaluate_functional(cs, cs.zero_state(), 50.0, state.control.phi,
                                 state.control.psi)
        shift = 1.0
        j1 = evaluate_functional(cs, cs.zero_state(), 50.0, state.control.phi,
                                 state.control.psi + shift)
        # J(psi + c) - J(psi) = |Gamma| c^2 + c * linear term; at the optimum
        # over psi the linear term is the trace-sum residual, near zero
        gamma_len = cs.mesh1d.total_length
        assert j1 - j0 == pytest.approx(gamma_len * shift**2, rel=1e-3)

    def test_functional_decreases_and_small(self, titanium):
        med, grid, net, losses, fem = wire_setup(n=10)
        cs = CoupledSystem.build(fem, net, losses, titanium, h1d=2e-3)
        state, diag = step_coupled(cs, cs.zero_state(), 100.0)
        hist = diag.functional_history
        assert np.all(np.diff(hist) <= 1e-10 * hist[0] + 1e-300)
        assert diag.functional_final <= 1e-6 * hist[0]

    def test_conservation_adiabatic(self, titanium):
        med, grid, net, losses, fem = wire_setup(n=10, h_b=0.0)
        cs = CoupledSystem.build(fem, net, losses, titanium, h1d=2e-3)
        state = cs.zero_state()
        for _ in range(3):
            state, diag = step_coupled(cs, state, 60.0)
            assert diag.conservation_residual < 1e-5

    def test_steady_wire_matches_axisymmetric_oracle(self, titanium):
        med, grid, net, losses, fem = wire_setup(h=2e-3, n=20)
        cs = CoupledSystem.build(fem, net, losses, titanium, h1d=2e-3)
        state, diags = run_coupled(cs, duration=1600.0, dt=200.0)
        rc, ref = axisymmetric_reference(50.0, net.radius, 0.6, 2e4)
        mid = 0.02
        angles = np.linspace(0, 2 * np.pi, 33)[:-1]
        # 2 mm voxels resolve r >= 2 mm; the 1 mm radius needs the finer
        # acceptance-level grid
        for rr in (2e-3, 4e-3):
            pts = np.stack([mid + rr * np.cos(angles), mid + rr * np.sin(angles),
                            np.full_like(angles, mid)], axis=1)
            num = state.theta3.sample(pts).mean()
            assert num == pytest.approx(np.interp(rr, rc, ref), rel=0.10)

    def test_mismatch_decreases_under_joint_refinement(self, titanium):
        # control-mesh error must dominate, so refine toward (not past)
        # the 3D resolution: 1 mm grid, control sizes 16 -> 8 -> 4 mm
        med, grid, net, losses, fem = wire_setup(h=1e-3, n=40)
        mismatches = []
        for h1 in (16e-3, 8e-3, 4e-3):
            cs = CoupledSystem.build(fem, net, losses, titanium, h1d=h1, coarsening=2)
            state, diags = run_coupled(cs, duration=200.0, dt=200.0)
            mismatches.append(diags[-1].mismatch)
        assert mismatches[0] > mismatches[1] > mismatches[2]

    def test_gradient_check_at_converged_minimizer(self, titanium):
        med, grid, net, losses, fem = wire_setup(n=10)
        cs = CoupledSystem.build(fem, net, losses, titanium, h1d=2e-3)
        dt = 100.0
        prev = cs.zero_state()
        state, diag = step_coupled(cs, prev, dt, tol_outer=1e-8)
        phi, psi = state.control.phi, state.control.psi
        n_phi = len(phi)
        z = np.concatenate([phi, psi])
        rng = np.random.default_rng(0)
        j_at = lambda zz: evaluate_functional(cs, prev, dt, zz[:n_phi], zz[n_phi:],
                                              tol_inner=1e-11)
        # reference scale: gradient norm at the start of the solve
        g0 = diag.functional_initial
        eps = 1e-4 * np.linalg.norm(z)
        for _ in range(5):
            d = rng.normal(size=len(z))
            d /= np.linalg.norm(d)
            deriv = (j_at(z + eps * d) - j_at(z - eps * d)) / (2 * eps)
            # |dJ/dd| at the optimum is tiny relative to the initial J scale
            assert abs(deriv) * np.linalg.norm(z) <= 1e-4 * g0

    def test_mass_preconditioner_variant_converges_on_small_problem(self, titanium):
        med, grid, net, losses, fem = wire_setup(n=8)
        cs = CoupledSystem.build(fem, net, losses, titanium, h1d=4e-3)
        state, diag = step_coupled(cs, cs.zero_state(), 50.0, precond="mass",
                                   maxit_outer=2000)
        assert diag.outer_residual <= 1e-6
