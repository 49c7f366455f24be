import numpy as np
import pytest
from scipy.special import ellipe, ellipk

import implantheat as ih
from implantheat.errors import FieldEvaluationError, GeometryError
from implantheat.field_source import MU_0


def circle_polyline(radius, n=256, z=0.0):
    th = 2 * np.pi * np.arange(n + 1) / n
    pts = np.stack([radius * np.cos(th), radius * np.sin(th), np.full(n + 1, z)], axis=1)
    pts[-1] = pts[0]
    return pts


def loop_a_phi(a, current, rho, z):
    """Analytic vector potential of a circular loop (azimuthal component)."""
    k2 = 4 * a * rho / ((a + rho) ** 2 + z**2)
    k = np.sqrt(k2)
    return (MU_0 * current / (np.pi * k)) * np.sqrt(a / rho) * (
        (1 - 0.5 * k2) * ellipk(k2) - ellipe(k2))


def loop_bz_axis(a, current, z):
    return MU_0 * current * a**2 / (2 * (a**2 + z**2) ** 1.5)


class TestUniformField:
    def setup_method(self):
        self.src = ih.UniformHarmonicField(b_peak=np.array([0, 0, 2.5e-3]),
                                           frequency=2000.0)

    def test_closed_form_gauge(self):
        p = np.array([0.03, -0.01, 0.07])
        a = ih.vector_potential(self.src, p)
        expected = 0.5 * np.cross([0, 0, 2.5e-3], p)
        np.testing.assert_allclose(a.real, expected, rtol=1e-14)
        np.testing.assert_allclose(a.imag, 0.0, atol=1e-18)

    def test_potential_vanishes_at_gauge_origin(self):
        origin = np.array([0.01, 0.02, 0.03])
        src = ih.UniformHarmonicField(b_peak=np.array([1e-3, 2e-3, 3e-3]),
                                      frequency=50.0, gauge_origin=origin)
        np.testing.assert_allclose(np.abs(ih.vector_potential(src, origin)), 0.0)

    def test_flux_density_is_stored_field(self):
        pts = np.random.default_rng(0).normal(size=(5, 3))
        b = ih.flux_density(self.src, pts)
        np.testing.assert_allclose(b, np.tile([0, 0, 2.5e-3], (5, 1)))

    def test_validation(self):
        with pytest.raises(GeometryError):
            ih.UniformHarmonicField(b_peak=np.array([0, 0, 1e-3]), frequency=0.0)


class TestPolylineCoil:
    def setup_method(self):
        self.a = 0.1
        self.coil = ih.PolylineCoil([circle_polyline(self.a)], [1.0], frequency=1e5)

    def test_center_flux_density(self):
        b = ih.flux_density(self.coil, np.zeros(3))
        expected = MU_0 * 1.0 / (2 * self.a)
        assert abs(b[2]) == pytest.approx(expected, rel=1e-3)
        assert abs(b[0]) < 1e-12 and abs(b[1]) < 1e-12

    def test_on_axis_profile(self):
        for z in (0.02, 0.05, 0.13):
            b = ih.flux_density(self.coil, np.array([0, 0, z]))
            assert b[2].real == pytest.approx(loop_bz_axis(self.a, 1.0, z), rel=1e-3)

    def test_vector_potential_off_axis_elliptic_oracle(self):
        for rho, z in ((0.05, 0.0), (0.05, 0.05), (0.15, 0.02)):
            p = np.array([rho, 0.0, z])
            a = ih.vector_potential(self.coil, p)
            # azimuthal direction at (rho, 0, z) is +y
            assert a[1].real == pytest.approx(loop_a_phi(self.a, 1.0, rho, z), rel=1e-3)
            assert abs(a[0]) < 1e-12 * abs(a[1])

    def test_on_axis_potential_is_zero(self):
        a = ih.vector_potential(self.coil, np.array([0.0, 0.0, 0.05]))
        assert np.max(np.abs(a)) < 1e-15

    def test_counter_wound_pair_cancels_on_midplane(self):
        c1 = circle_polyline(self.a, z=0.05)
        c2 = circle_polyline(self.a, z=-0.05)[::-1]  # reversed winding
        coil = ih.PolylineCoil([c1, c2], [1.0, 1.0], frequency=1e3)
        b = ih.flux_density(coil, np.zeros(3))
        assert np.max(np.abs(b)) < 1e-11

    def test_linearity(self):
        p = np.array([0.03, 0.01, 0.02])
        a1 = ih.vector_potential(self.coil, p)
        b1 = ih.flux_density(self.coil, p)
        doubled = self.coil.scaled(2.0)
        np.testing.assert_allclose(ih.vector_potential(doubled, p), 2 * a1, rtol=1e-14)
        np.testing.assert_allclose(ih.flux_density(doubled, p), 2 * b1, rtol=1e-14)

    def test_singularity_guard(self):
        with pytest.raises(FieldEvaluationError):
            ih.flux_density(self.coil, np.array([self.a, 0.0, 0.0]))

    def test_open_polyline_rejected(self):
        pts = circle_polyline(self.a)[:-1]
        with pytest.raises(GeometryError, match="closed"):
            ih.PolylineCoil([pts], [1.0], frequency=1e3)

    def test_stokes_consistency(self):
        # circulation of A around a small square probe loop == flux of B
        side = 4e-3
        center = np.array([0.04, 0.01, 0.03])
        gx, gw = np.polynomial.legendre.leggauss(8)
        s = 0.5 * (gx + 1)
        w = 0.5 * gw
        corners = center + np.array(
            [[-side / 2, -side / 2, 0], [side / 2, -side / 2, 0],
             [side / 2, side / 2, 0], [-side / 2, side / 2, 0],
             [-side / 2, -side / 2, 0]])
        circ = 0j
        for k in range(4):
            d = corners[k + 1] - corners[k]
            pts = corners[k] + s[:, None] * d
            a = ih.vector_potential(self.coil, pts)
            circ += (w[None, :] @ (a @ d))[0]
        # flux by 2D Gauss on the square
        X, Y = np.meshgrid(center[0] - side / 2 + s * side,
                           center[1] - side / 2 + s * side, indexing="ij")
        pts = np.stack([X.ravel(), Y.ravel(), np.full(X.size, center[2])], axis=1)
        bz = ih.flux_density(self.coil, pts)[:, 2].reshape(len(s), len(s))
        flux = side**2 * np.einsum("i,j,ij->", w, w, bz)
        assert circ.real == pytest.approx(flux.real, rel=1e-6)

    def test_gauge_shift_does_not_change_circulation(self):
        # uniform-field version of the same consistency statement
        src0 = ih.UniformHarmonicField(b_peak=np.array([0, 0, 1e-3]), frequency=50.0)
        src1 = ih.UniformHarmonicField(b_peak=np.array([0, 0, 1e-3]), frequency=50.0,
                                       gauge_origin=np.array([0.4, -0.2, 0.9]))
        corners = np.array([[0, 0, 0], [0.02, 0, 0], [0.02, 0.02, 0], [0, 0.02, 0],
                            [0, 0, 0]], dtype=float)
        circs = []
        for src in (src0, src1):
            total = 0j
            for k in range(4):
                mid = 0.5 * (corners[k] + corners[k + 1])
                d = corners[k + 1] - corners[k]
                total += ih.vector_potential(src, mid) @ d
            circs.append(total)
        assert circs[0].real == pytest.approx(circs[1].real, rel=1e-12)
        assert circs[0].real == pytest.approx(1e-3 * 0.02**2, rel=1e-12)
