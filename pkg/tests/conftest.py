import numpy as np
import pytest

import implantheat as ih


def closed_polygon_network(n_sides=64, radius_loop=0.02, wire_radius=0.3e-3,
                           conductivity=1.82e6):
    """Regular n-gon in the z=0 plane, exactly closed."""
    th = 2 * np.pi * np.arange(n_sides + 1) / n_sides
    pts = np.stack([radius_loop * np.cos(th), radius_loop * np.sin(th),
                    np.zeros(n_sides + 1)], axis=1)
    pts[-1] = pts[0]
    segs = np.stack([pts[:-1], pts[1:]], axis=1)
    return ih.build_network(segs, radius=wire_radius, conductivity=conductivity,
                            merge_tol=0.0)


def square_loop_segments(side=1.0, z=0.0):
    c = [(0, 0, z), (side, 0, z), (side, side, z), (0, side, z)]
    return [[c[0], c[1]], [c[1], c[2]], [c[2], c[3]], [c[3], c[0]]]


@pytest.fixture(scope="session")
def gel():
    return ih.Material("gel", 0.624, 1006.0, 4200.0, 0.0)


@pytest.fixture(scope="session")
def polystyrene():
    return ih.Material("polystyrene", 0.035, 20.0, 1200.0, 0.0)


@pytest.fixture(scope="session")
def titanium():
    return ih.Material("titanium", 17.0, 4510.0, 523.0, 0.0)
