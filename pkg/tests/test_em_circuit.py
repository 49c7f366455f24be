import numpy as np
import pytest

import implantheat as ih
from implantheat.em_circuit import (assemble_inductances, assemble_loop_system,
                                    branch_losses, branch_resistance,
                                    solve_loop_currents, solve_em)
from implantheat.errors import AssemblyError, GeometryError
from implantheat.field_source import MU_0

from conftest import closed_polygon_network, square_loop_segments


def uniform_z(b=3.5e-3, f=2000.0):
    return ih.UniformHarmonicField(b_peak=np.array([0, 0, b]), frequency=f)


class TestBranchResistance:
    def test_closed_form(self):
        # 1 mm of 0.3 mm wire at titanium-like conductivity
        r = branch_resistance(1e-3, 0.3e-3, 1.82e6)
        assert r == pytest.approx(1e-3 / (1.82e6 * np.pi * (0.3e-3) ** 2), rel=1e-14)
        assert r == pytest.approx(1.943e-3, rel=1e-3)

    def test_length_linearity(self):
        assert branch_resistance(2e-3, 1e-4, 1e6) == pytest.approx(
            2 * branch_resistance(1e-3, 1e-4, 1e6), rel=1e-14)

    def test_unit_case(self):
        r_unit = np.sqrt(1.0 / np.pi)
        assert branch_resistance(1.0, r_unit, 1.0) == pytest.approx(1.0, rel=1e-14)

    def test_nonpositive_rejected(self):
        with pytest.raises(GeometryError):
            branch_resistance(0.0, 1e-4, 1e6)


class TestInductances:
    def test_polygon_loop_matches_analytic(self):
        a, r = 0.02, 0.3e-3
        net = closed_polygon_network(64, a, r)
        imp = assemble_inductances(net)
        loop_l = imp.inductance.sum()  # all branches oriented the same way
        analytic = MU_0 * a * (np.log(8 * a / r) - 2)
        assert loop_l == pytest.approx(analytic, rel=0.02)

    def test_parallel_filaments_neumann_closed_form(self):
        l, d = 0.01, 0.001
        segs = [[(0, 0, 0), (l, 0, 0)], [(0, d, 0), (l, d, 0)],
                [(0, 0.05, 0), (0, 0.052, 0)]]
        net = ih.build_network(segs, 1e-4, 1e6, merge_tol=0.0)
        imp = assemble_inductances(net)
        analytic = (MU_0 * l / (2 * np.pi)) * (
            np.log(l / d + np.sqrt(1 + (l / d) ** 2)) - np.sqrt(1 + (d / l) ** 2) + d / l)
        assert imp.inductance[0, 1] == pytest.approx(analytic, rel=0.01)

    def test_perpendicular_mutual_is_zero(self):
        segs = [[(0, 0, 0), (0.01, 0, 0)], [(0.02, 0.01, 0), (0.02, 0.02, 0)]]
        net = ih.build_network(segs, 1e-4, 1e6)
        imp = assemble_inductances(net)
        assert abs(imp.inductance[0, 1]) < 1e-15

    def test_reciprocity_exact(self):
        net = closed_polygon_network(12, 0.01, 1e-4)
        imp = assemble_inductances(net)
        assert np.array_equal(imp.inductance, imp.inductance.T)

    def test_mutual_bounded_by_selfs(self):
        net = closed_polygon_network(24, 0.015, 2e-4)
        imp = assemble_inductances(net)
        l_diag = np.diag(imp.inductance)
        bound = np.sqrt(np.outer(l_diag, l_diag))
        off = ~np.eye(len(l_diag), dtype=bool)
        assert np.all(np.abs(imp.inductance[off]) <= bound[off])

    def test_overlapping_collinear_pair_rejected(self):
        segs = [[(0, 0, 0), (0.01, 0, 0)], [(0.005, 0, 0), (0.015, 0, 0)]]
        net = ih.build_network(segs, 1e-4, 1e6)
        with pytest.raises(AssemblyError, match="collinear"):
            assemble_inductances(net)

    def test_drop_floor_zeroes_small_terms(self):
        segs = [[(0, 0, 0), (0.01, 0, 0)], [(0, 1.0, 0), (0.01, 1.0, 1e-4)]]
        net = ih.build_network(segs, 1e-4, 1e6)
        imp = assemble_inductances(net, drop_below=1e-10)
        assert imp.inductance[0, 1] == 0.0


class TestLoopSystem:
    def test_tree_network_empty_system(self):
        segs = [[(0, 0, 0), (1e-2, 0, 0)], [(1e-2, 0, 0), (2e-2, 0, 0)]]
        net = ih.build_network(segs, 1e-4, 1e6)
        em = solve_em(net, uniform_z())
        assert em.system.n_loops == 0
        assert np.all(em.currents.phasors == 0)
        assert em.losses.total_power == 0.0

    def test_square_loop_faraday_emf(self):
        net = ih.build_network(square_loop_segments(side=0.02), 3e-4, 1.82e6)
        loops = ih.fundamental_loops(net)
        imp = assemble_inductances(net)
        system = assemble_loop_system(net, imp, loops, uniform_z())
        expected = 2 * np.pi * 2000 * 3.5e-3 * 0.02**2  # omega B A
        assert abs(system.emf[0]) == pytest.approx(expected, rel=1e-12)

    def test_gauge_origin_shift_invariance(self):
        net = ih.build_network(square_loop_segments(side=0.02), 3e-4, 1.82e6)
        loops = ih.fundamental_loops(net)
        imp = assemble_inductances(net)
        e0 = assemble_loop_system(net, imp, loops, uniform_z()).emf
        shifted = ih.UniformHarmonicField(b_peak=np.array([0, 0, 3.5e-3]),
                                          frequency=2000.0,
                                          gauge_origin=np.array([1.7, -0.4, 2.2]))
        e1 = assemble_loop_system(net, imp, loops, shifted).emf
        np.testing.assert_allclose(e1, e0, rtol=1e-12)

    def test_single_loop_phasor_divider(self):
        net = closed_polygon_network(64, 0.02, 0.3e-3)
        em = solve_em(net, uniform_z())
        z_loop = complex(em.system.z[0, 0])
        i_expected = em.system.emf[0] / z_loop
        np.testing.assert_allclose(em.currents.loop_currents[0], i_expected, rtol=1e-12)

    def test_zero_source_zero_currents(self):
        net = closed_polygon_network(16, 0.01, 1e-4)
        src = ih.UniformHarmonicField(b_peak=np.array([0, 0, 0.0]), frequency=100.0)
        em = solve_em(net, src)
        assert np.all(em.currents.phasors == 0)

    def test_distant_loops_decouple(self):
        # two identical squares 1 m apart: solution matches independent
        # single-loop solves to well under 0.1%
        s1 = square_loop_segments(side=0.02)
        s2 = [[(p[0] + 1.0, p[1], p[2]) for p in seg] for seg in s1]
        both = ih.build_network(s1 + s2, 3e-4, 1.82e6)
        single = ih.build_network(s1, 3e-4, 1.82e6)
        em_b = solve_em(both, uniform_z())
        em_s = solve_em(single, uniform_z())
        i_single = np.abs(em_s.currents.phasors[0])
        np.testing.assert_allclose(np.abs(em_b.currents.phasors), i_single, rtol=1e-3)


class TestCurrentsAndLosses:
    def test_kcl_residual_tiny(self):
        net = closed_polygon_network(32, 0.015, 2e-4)
        em = solve_em(net, uniform_z())
        assert em.currents.kcl_residual < 1e-9

    def test_rms_identity(self):
        # I_peak = sqrt(2) A through R = 1 ohm over 1 m -> 1 W/m
        net = ih.build_network([[(0, 0, 0), (1.0, 0, 0)]], np.sqrt(1 / np.pi), 1.0)
        imp = assemble_inductances(net)
        from implantheat.em_circuit import BranchCurrents
        cur = BranchCurrents(phasors=np.array([np.sqrt(2) + 0j]),
                             loop_currents=np.zeros(0, dtype=complex), kcl_residual=0.0)
        losses = branch_losses(net, imp, cur)
        assert losses.linear_density[0] == pytest.approx(1.0, rel=1e-12)

    def test_power_balance(self):
        net = closed_polygon_network(64, 0.02, 0.3e-3)
        em = solve_em(net, uniform_z())
        assert em.losses.total_power == pytest.approx(em.resistive_loop_power, rel=1e-9)

    def test_frequency_squared_scaling(self):
        net = closed_polygon_network(32, 0.02, 0.3e-3)
        powers = []
        for f in (20.0, 200.0):
            src = ih.UniformHarmonicField(b_peak=np.array([0, 0, 3.5e-3]), frequency=f)
            powers.append(solve_em(net, src).losses.total_power)
        slope = np.log(powers[1] / powers[0]) / np.log(10.0)
        assert slope == pytest.approx(2.0, abs=0.05)

    def test_basis_invariance(self):
        # rotating the branch ordering changes the spanning tree; branch
        # currents must not change
        net = ih.build_network(square_loop_segments(0.02)
                               + [[(0.02, 0, 0), (0.04, 0, 0)],
                                  [(0.04, 0, 0), (0.04, 0.02, 0)],
                                  [(0.04, 0.02, 0), (0.02, 0.02, 0)]], 3e-4, 1.82e6)
        segs = net.segments()
        perm = np.roll(np.arange(net.n_branches), 3)
        net2 = ih.build_network(segs[perm], 3e-4, 1.82e6)
        em1 = solve_em(net, uniform_z())
        em2 = solve_em(net2, uniform_z())
        # match branches geometrically
        mid1 = segs.mean(axis=1)
        mid2 = net2.segments().mean(axis=1)
        order = [int(np.argmin(np.linalg.norm(mid2 - m, axis=1))) for m in mid1]
        scale = np.abs(em1.currents.phasors).max()
        np.testing.assert_allclose(np.abs(em2.currents.phasors[order]),
                                   np.abs(em1.currents.phasors), rtol=1e-9,
                                   atol=1e-9 * scale)

    def test_acceptance_polygon_current(self):
        # 64-gon vs analytic RL divider (the EM acceptance oracle)
        a, r, sigma = 0.02, 0.3e-3, 1.82e6
        net = closed_polygon_network(64, a, r, sigma)
        em = solve_em(net, uniform_z())
        perim = net.lengths.sum()
        r_an = perim / (sigma * np.pi * r**2)
        l_an = MU_0 * a * (np.log(8 * a / r) - 2)
        area = 0.5 * 64 * a**2 * np.sin(2 * np.pi / 64)
        omega = 2 * np.pi * 2000
        i_an = omega * 3.5e-3 * area / abs(r_an + 1j * omega * l_an)
        assert np.abs(em.currents.phasors).mean() == pytest.approx(i_an, rel=0.02)
