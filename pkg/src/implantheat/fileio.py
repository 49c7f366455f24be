"""File formats: segment lists, coil definitions, VTK snapshots, CSV outputs.

All text outputs use '.' decimals, a fixed exponent format and sorted
iteration order, so identical inputs reproduce bit-identical files on
one platform.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import ConfigError, GeometryError
from .field_source import PolylineCoil
from .geometry import VoxelGrid

__all__ = [
    "read_segments", "write_segments", "read_coil", "write_coil",
    "write_vtk_structured_points", "write_csv", "write_summary", "read_summary",
]

_FLOAT = "%.12e"


def read_segments(path) -> np.ndarray:
    """Read an ASCII segment file: one branch per line, x1 y1 z1 x2 y2 z2 (m).

    Blank lines and '#' comments are ignored.
    """
    segments = []
    with open(path) as fh:
        for ln, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 6:
                raise GeometryError(f"{path}:{ln}: expected 6 coordinates, got {len(parts)}")
            try:
                vals = [float(p) for p in parts]
            except ValueError as exc:
                raise GeometryError(f"{path}:{ln}: {exc}") from None
            segments.append(vals)
    if not segments:
        raise GeometryError(f"{path}: no segments found")
    return np.asarray(segments).reshape(-1, 2, 3)


def write_segments(path, segments) -> None:
    segs = np.asarray(segments, dtype=float).reshape(-1, 6)
    with open(path, "w") as fh:
        fh.write("# x1 y1 z1 x2 y2 z2 (m)\n")
        for row in segs:
            fh.write(" ".join(_FLOAT % v for v in row) + "\n")


def read_coil(path, frequency: float) -> PolylineCoil:
    """Read a coil file: blocks of 'loop <re> <im>' followed by vertex lines."""
    loops, currents, current_pts = [], [], []
    with open(path) as fh:
        for ln, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if parts[0] == "loop":
                if current_pts:
                    loops.append(np.asarray(current_pts))
                    current_pts = []
                if len(parts) != 3:
                    raise ConfigError(f"{path}:{ln}: 'loop' needs real and imag current")
                currents.append(float(parts[1]) + 1j * float(parts[2]))
            else:
                if not currents:
                    raise ConfigError(f"{path}:{ln}: vertex before any 'loop' header")
                if len(parts) != 3:
                    raise ConfigError(f"{path}:{ln}: expected 'x y z'")
                current_pts.append([float(p) for p in parts])
    if current_pts:
        loops.append(np.asarray(current_pts))
    if len(loops) != len(currents):
        raise ConfigError(f"{path}: a 'loop' header has no vertices")
    return PolylineCoil(loops, currents, frequency)


def write_coil(path, coil: PolylineCoil) -> None:
    with open(path, "w") as fh:
        fh.write("# loop <current_re> <current_im> followed by x y z vertices\n")
        for lp, cur in zip(coil.loops, coil.currents):
            fh.write(f"loop {_FLOAT % cur.real} {_FLOAT % cur.imag}\n")
            for p in lp:
                fh.write(" ".join(_FLOAT % v for v in p) + "\n")


def write_vtk_structured_points(path, grid: VoxelGrid, nodal_values,
                                name: str = "temperature_increase",
                                title: str = "implantheat snapshot") -> None:
    """Legacy ASCII VTK structured-points file with one nodal scalar field."""
    vals = np.asarray(nodal_values, dtype=float)
    if vals.shape != (grid.n_nodes,):
        raise GeometryError(f"expected ({grid.n_nodes},) nodal values, got {vals.shape}")
    nx, ny, nz = grid.node_dims
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(title[:255] + "\n")
        fh.write("ASCII\n")
        fh.write("DATASET STRUCTURED_POINTS\n")
        fh.write(f"DIMENSIONS {nx} {ny} {nz}\n")
        fh.write("ORIGIN " + " ".join(_FLOAT % v for v in grid.origin) + "\n")
        fh.write("SPACING " + " ".join(_FLOAT % v for v in grid.spacing) + "\n")
        fh.write(f"POINT_DATA {grid.n_nodes}\n")
        fh.write(f"SCALARS {name} float 1\n")
        fh.write("LOOKUP_TABLE default\n")
        for v in vals:
            fh.write(_FLOAT % v + "\n")


def write_csv(path, header: list[str], columns: list[np.ndarray]) -> None:
    """UTF-8 CSV with a header row and fixed-format numeric columns."""
    if len(header) != len(columns):
        raise ConfigError("header/column count mismatch")
    cols = [np.asarray(c) for c in columns]
    n = len(cols[0]) if cols else 0
    if any(len(c) != n for c in cols):
        raise ConfigError("CSV columns have unequal lengths")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(n):
            cells = []
            for c in cols:
                v = c[i]
                if isinstance(v, (np.integer, int)):
                    cells.append(str(int(v)))
                else:
                    cells.append(_FLOAT % float(v))
            fh.write(",".join(cells) + "\n")


def read_csv(path):
    """Read back a write_csv file: (header, dict of float columns)."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    cols = {h: np.array([float(r[i]) for r in rows]) for i, h in enumerate(header)}
    return header, cols


def read_branch_losses(path, network):
    """Reload a branch_losses.csv for the same network geometry."""
    from .em_circuit import BranchLosses

    _, cols = read_csv(path)
    if len(cols["branch"]) != network.n_branches:
        raise ConfigError(
            f"{path}: {len(cols['branch'])} rows but network has "
            f"{network.n_branches} branches")
    if not np.allclose(cols["length_m"], network.lengths, rtol=1e-9, atol=0):
        raise ConfigError(f"{path}: branch lengths do not match the network")
    return BranchLosses(linear_density=cols["p_lin_w_per_m"], branch_power=cols["power_w"])


def write_summary(path, entries: dict) -> None:
    """Flat key=value summary file, keys in insertion order."""
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in entries.items():
            if isinstance(v, float):
                fh.write(f"{k}={_FLOAT % v}\n")
            else:
                fh.write(f"{k}={v}\n")


def read_summary(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            k, _, v = line.partition("=")
            out[k] = v
    return out


def ensure_dir(path) -> None:
    if path:
        os.makedirs(path, exist_ok=True)
