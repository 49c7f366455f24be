"""Source magnetic field models: uniform harmonic fields and polyline coils.

All amplitudes are PEAK phasors with the cos(omega*t) time convention.
``vector_potential`` returns A in Wb/m and ``flux_density`` B in T, both
as complex 3-vectors (or (n, 3) batches).  Sources are immutable and
point evaluations are pure, so they can be evaluated in bulk.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import FieldEvaluationError, GeometryError
from .geometry import as_point

__all__ = [
    "MU_0",
    "UniformHarmonicField",
    "PolylineCoil",
    "vector_potential",
    "flux_density",
]

MU_0 = 4e-7 * np.pi  # vacuum permeability, H/m

_GAUSS_ORDER = 8
_GX, _GW = np.polynomial.legendre.leggauss(_GAUSS_ORDER)

# Evaluation closer than this to a filament is treated as singular.
FILAMENT_EXCLUSION = 1e-9  # m


@dataclass(frozen=True)
class UniformHarmonicField:
    """Spatially uniform harmonic flux density with a symmetric gauge.

    The vector potential is A(p) = 0.5 * B x (p - gauge_origin), which
    reproduces curl A = B; the gauge origin only shifts A by a curl-free
    field and never changes closed-loop line integrals.
    """

    b_peak: np.ndarray          # complex (3,), T peak
    frequency: float            # Hz
    gauge_origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        b = np.asarray(self.b_peak, dtype=complex)
        if b.shape != (3,) or not np.all(np.isfinite(b)):
            raise GeometryError(f"B amplitude must be a finite 3-vector, got {self.b_peak}")
        if not (self.frequency > 0):
            raise GeometryError(f"frequency must be > 0, got {self.frequency}")
        object.__setattr__(self, "b_peak", b)
        object.__setattr__(self, "gauge_origin", as_point(self.gauge_origin))

    @property
    def omega(self) -> float:
        return 2.0 * np.pi * self.frequency


class PolylineCoil:
    """One or more closed filamentary loops carrying phasor currents.

    Fields are Biot-Savart line integrals evaluated with fixed-order
    Gauss-Legendre quadrature on every polyline edge.
    """

    def __init__(self, loops, currents, frequency: float):
        loops = [np.asarray(lp, dtype=float) for lp in loops]
        currents = np.asarray(currents, dtype=complex)
        if len(loops) == 0 or len(loops) != len(currents):
            raise GeometryError("need one current per loop and at least one loop")
        if not (frequency > 0):
            raise GeometryError(f"frequency must be > 0, got {frequency}")
        starts, ends, edge_cur = [], [], []
        for lp, cur in zip(loops, currents):
            if lp.ndim != 2 or lp.shape[1] != 3 or len(lp) < 3:
                raise GeometryError("each loop must be an (k, 3) polyline with k >= 3")
            if not np.all(np.isfinite(lp)):
                raise GeometryError("non-finite loop vertex")
            if np.linalg.norm(lp[0] - lp[-1]) > FILAMENT_EXCLUSION:
                raise GeometryError("loop polyline is not closed (first point != last point)")
            starts.append(lp[:-1])
            ends.append(lp[1:])
            edge_cur.append(np.full(len(lp) - 1, cur, dtype=complex))
        self.loops = loops
        self.currents = currents
        self.frequency = float(frequency)
        self._a = np.concatenate(starts)            # (E, 3) edge starts
        self._b = np.concatenate(ends)              # (E, 3) edge ends
        self._i = np.concatenate(edge_cur)          # (E,) edge currents
        self._d = self._b - self._a                 # (E, 3)
        self._len = np.linalg.norm(self._d, axis=1)
        keep = self._len > 0
        self._a, self._b, self._d = self._a[keep], self._b[keep], self._d[keep]
        self._i, self._len = self._i[keep], self._len[keep]

    @property
    def omega(self) -> float:
        return 2.0 * np.pi * self.frequency

    def scaled(self, factor: complex) -> "PolylineCoil":
        """Same geometry with all loop currents multiplied by `factor`."""
        return PolylineCoil(self.loops, self.currents * factor, self.frequency)

    def _chunks(self, n_pts: int):
        # keep point-x-edge temporaries around ~10^7 doubles
        size = max(1, int(1e7) // max(1, len(self._a)))
        for lo in range(0, n_pts, size):
            yield lo, min(lo + size, n_pts)

    def _check_clearance(self, pts: np.ndarray):
        # exact point-to-edge distances, vectorized over points x edges
        ap = pts[:, None, :] - self._a[None, :, :]
        t = np.einsum("pej,ej->pe", ap, self._d) / (self._len**2)[None, :]
        t = np.clip(t, 0.0, 1.0)
        close = ap - t[:, :, None] * self._d[None, :, :]
        dist = np.linalg.norm(close, axis=2)
        dmin = dist.min(axis=1)
        if np.any(dmin <= FILAMENT_EXCLUSION):
            k = int(np.argmin(dmin))
            raise FieldEvaluationError(
                f"field point {pts[k]} lies on a coil filament (distance {dmin[k]:.3e} m)")

    def _quad_points(self):
        # (E, G, 3) quadrature nodes and (G,) weights on [0, 1]
        s = 0.5 * (_GX + 1.0)
        w = 0.5 * _GW
        x = self._a[:, None, :] + s[None, :, None] * self._d[:, None, :]
        return x, w

    def vector_potential(self, pts: np.ndarray) -> np.ndarray:
        x, w = self._quad_points()
        out = np.zeros((len(pts), 3), dtype=complex)
        coef = (MU_0 / (4.0 * np.pi)) * self._i      # (E,)
        for lo, hi in self._chunks(len(pts)):
            chunk = pts[lo:hi]
            self._check_clearance(chunk)
            for g in range(len(w)):
                r = chunk[:, None, :] - x[None, :, g, :]
                inv = 1.0 / np.linalg.norm(r, axis=2)            # (P, E)
                out[lo:hi] += w[g] * np.einsum("pe,ej->pj", inv * coef[None, :], self._d)
        return out

    def flux_density(self, pts: np.ndarray) -> np.ndarray:
        x, w = self._quad_points()
        out = np.zeros((len(pts), 3), dtype=complex)
        coef = (MU_0 / (4.0 * np.pi)) * self._i
        for lo, hi in self._chunks(len(pts)):
            chunk = pts[lo:hi]
            self._check_clearance(chunk)
            for g in range(len(w)):
                r = chunk[:, None, :] - x[None, :, g, :]
                inv3 = np.linalg.norm(r, axis=2) ** -3           # (P, E)
                cross = np.cross(self._d[None, :, :], r)         # (P, E, 3)
                out[lo:hi] += w[g] * np.einsum("pe,pej->pj", inv3 * coef[None, :], cross)
        return out


FieldSource = UniformHarmonicField | PolylineCoil


def _eval(source, p, uniform_fn, coil_batch):
    pts = np.asarray(p, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[1] != 3 or not np.all(np.isfinite(pts)):
        raise GeometryError(f"evaluation points must be finite 3-vectors, got shape {pts.shape}")
    if isinstance(source, UniformHarmonicField):
        out = uniform_fn(source, pts)
    elif isinstance(source, PolylineCoil):
        out = coil_batch(pts)
    else:
        raise TypeError(f"unknown field source type {type(source).__name__}")
    return out[0] if single else out


def vector_potential(source: FieldSource, p) -> np.ndarray:
    """Vector potential A (Wb/m, complex peak) of the source at point(s) p."""
    def uniform(src, pts):
        rel = pts - src.gauge_origin
        return 0.5 * np.cross(np.broadcast_to(src.b_peak, pts.shape), rel.astype(complex))

    coil = source.vector_potential if isinstance(source, PolylineCoil) else None
    return _eval(source, p, uniform, coil)


def flux_density(source: FieldSource, p) -> np.ndarray:
    """Flux density B (T, complex peak) of the source at point(s) p."""
    def uniform(src, pts):
        return np.broadcast_to(src.b_peak, pts.shape).copy()

    coil = source.flux_density if isinstance(source, PolylineCoil) else None
    return _eval(source, p, uniform, coil)
