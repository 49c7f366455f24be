"""Wire-network and voxel-grid geometry.

The implant is a graph of straight tubular wire branches with a common
radius; the surrounding medium is a uniform voxel grid with per-voxel
material labels.  This module owns both representations plus the
predicates that connect them (segment/voxel clipping, probe boxes) and
the fundamental-loop basis used by the circuit solver.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import GeometryError, OutOfDomainError

__all__ = [
    "as_point",
    "ImplantNetwork",
    "VoxelGrid",
    "Material",
    "MaterialTable",
    "ProbeBox",
    "LoopBasis",
    "build_network",
    "fundamental_loops",
    "clip_branch_to_voxels",
]


def as_point(p) -> np.ndarray:
    """Coerce to a finite float (3,) array (SI meters)."""
    a = np.asarray(p, dtype=float)
    if a.shape != (3,):
        raise GeometryError(f"expected a 3-vector, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise GeometryError(f"non-finite coordinate: {a}")
    return a


@dataclass(frozen=True)
class ImplantNetwork:
    """Graph of thin metallic wire branches with uniform radius.

    Attributes
    ----------
    nodes : (n, 3) float array of node positions (m)
    branches : (b, 2) int array of (tail, head) node indices
    radius : wire radius (m), uniform over the network
    conductivity : electrical conductivity (S/m)
    """

    nodes: np.ndarray
    branches: np.ndarray
    radius: float
    conductivity: float
    lengths: np.ndarray = field(init=False)

    def __post_init__(self):
        nodes = np.ascontiguousarray(np.asarray(self.nodes, dtype=float))
        branches = np.ascontiguousarray(np.asarray(self.branches, dtype=np.int64))
        if nodes.ndim != 2 or nodes.shape[1] != 3:
            raise GeometryError("nodes must be an (n, 3) array")
        if not np.all(np.isfinite(nodes)):
            raise GeometryError("non-finite node coordinate")
        if branches.ndim != 2 or branches.shape[1] != 2:
            raise GeometryError("branches must be a (b, 2) array")
        if branches.size and (branches.min() < 0 or branches.max() >= len(nodes)):
            raise GeometryError("branch node index out of range")
        if np.any(branches[:, 0] == branches[:, 1]):
            k = int(np.nonzero(branches[:, 0] == branches[:, 1])[0][0])
            raise GeometryError(f"zero-length branch {k}: both ends at node {branches[k, 0]}")
        key = np.sort(branches, axis=1)
        uniq = {(int(i), int(j)) for i, j in key}
        if len(uniq) != len(branches):
            raise GeometryError("duplicate branch in network")
        if not (self.radius > 0):
            raise GeometryError(f"radius must be > 0, got {self.radius}")
        if not (self.conductivity > 0):
            raise GeometryError(f"conductivity must be > 0, got {self.conductivity}")
        lengths = np.linalg.norm(nodes[branches[:, 1]] - nodes[branches[:, 0]], axis=1)
        if branches.size and lengths.min() <= 0.0:
            raise GeometryError("zero-length branch (coincident endpoints)")
        for a in (nodes, branches, lengths):
            a.flags.writeable = False
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "branches", branches)
        object.__setattr__(self, "lengths", lengths)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_branches(self) -> int:
        return len(self.branches)

    def segments(self) -> np.ndarray:
        """Branch endpoints as a (b, 2, 3) array."""
        return self.nodes[self.branches]

    def tangents(self) -> np.ndarray:
        """Unit tangent per branch, oriented tail -> head."""
        d = self.nodes[self.branches[:, 1]] - self.nodes[self.branches[:, 0]]
        return d / self.lengths[:, None]

    def node_degrees(self) -> np.ndarray:
        return np.bincount(self.branches.ravel(), minlength=self.n_nodes)


def build_network(segments, radius: float, conductivity: float,
                  merge_tol: float = 1e-6) -> ImplantNetwork:
    """Build a wire network from raw segments, merging nearby endpoints.

    Parameters
    ----------
    segments : (m, 2, 3) array-like of segment endpoints (m)
    radius, conductivity : wire radius (m) and conductivity (S/m)
    merge_tol : endpoints closer than this distance collapse to one node;
        0 merges only exactly coincident points.

    Duplicate branches (same unordered node pair) are collapsed to one.
    A segment whose endpoints merge into the same node is an error.
    """
    segs = np.asarray(segments, dtype=float)
    if segs.ndim == 3 and segs.shape[1:] == (2, 3):
        pass
    elif segs.ndim == 2 and segs.shape[1] == 6:
        segs = segs.reshape(-1, 2, 3)
    else:
        raise GeometryError(f"segments must be (m, 2, 3) or (m, 6), got {segs.shape}")
    if len(segs) == 0:
        raise GeometryError("empty segment list")
    if not np.all(np.isfinite(segs)):
        raise GeometryError("non-finite coordinate in segment list")
    if merge_tol < 0:
        raise GeometryError("merge_tol must be >= 0")

    pts = segs.reshape(-1, 3)
    labels = _merge_points(pts, merge_tol)

    # Representative coordinate: first occurrence in input order.
    order = np.arange(len(pts))
    first = np.full(labels.max() + 1, len(pts), dtype=np.int64)
    np.minimum.at(first, labels, order)
    # Renumber clusters by first appearance so node order is deterministic.
    cluster_ids = np.unique(labels)
    rank = np.argsort(first[cluster_ids], kind="stable")
    remap = np.empty(labels.max() + 1, dtype=np.int64)
    remap[cluster_ids[rank]] = np.arange(len(cluster_ids))
    node_of_pt = remap[labels]
    nodes = np.empty((len(cluster_ids), 3))
    nodes[node_of_pt[::-1]] = pts[::-1]  # reversed scatter: first occurrence wins

    tails = node_of_pt[0::2]
    heads = node_of_pt[1::2]
    branches = []
    seen = set()
    for k, (i, j) in enumerate(zip(tails, heads)):
        if i == j:
            raise GeometryError(f"zero-length branch after merging (segment {k})")
        key = (min(i, j), max(i, j))
        if key in seen:
            continue
        seen.add(key)
        branches.append((i, j))
    return ImplantNetwork(nodes=nodes, branches=np.asarray(branches, dtype=np.int64),
                          radius=float(radius), conductivity=float(conductivity))


def _merge_points(pts: np.ndarray, tol: float) -> np.ndarray:
    """Union-find cluster labels for points within `tol` of each other."""
    n = len(pts)
    parent = np.arange(n)

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    if tol == 0.0:
        seen: dict[bytes, int] = {}
        for i, p in enumerate(pts):
            key = p.tobytes()
            if key in seen:
                parent[i] = seen[key]
            else:
                seen[key] = i
        return np.array([find(i) for i in range(n)])

    tree = cKDTree(pts)
    for i, j in tree.query_pairs(tol, output_type="ndarray"):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    return np.array([find(i) for i in range(n)])


@dataclass(frozen=True)
class LoopBasis:
    """Fundamental cycles of a wire network induced by a spanning forest.

    cycles[k] is an (ordered branches, signs) pair tracing chord k's loop:
    the chord traversed tail -> head, closed through the tree.  Sign +1
    means the branch is traversed along its stored orientation.
    """

    tree_branches: np.ndarray
    chords: np.ndarray
    cycles: list[tuple[np.ndarray, np.ndarray]]
    n_components: int

    @property
    def n_loops(self) -> int:
        return len(self.chords)

    def incidence(self, n_branches: int) -> np.ndarray:
        """Signed loop-to-branch incidence S, shape (n_loops, n_branches)."""
        S = np.zeros((self.n_loops, n_branches))
        for k, (br, sg) in enumerate(self.cycles):
            S[k, br] = sg
        return S


def fundamental_loops(network: ImplantNetwork) -> LoopBasis:
    """Fundamental cycle basis from a breadth-first spanning forest.

    The forest is rooted at the lowest-index node of each connected
    component, with neighbors visited in (node, branch) index order, so
    the basis is deterministic for a fixed input ordering.  A tree
    network yields an empty basis.
    """
    n, b = network.n_nodes, network.n_branches
    adj: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    for e, (i, j) in enumerate(network.branches):
        adj[i].append((j, e))
        adj[j].append((i, e))
    for lst in adj:
        lst.sort()

    parent = np.full(n, -1, dtype=np.int64)
    parent_edge = np.full(n, -1, dtype=np.int64)
    depth = np.zeros(n, dtype=np.int64)
    visited = np.zeros(n, dtype=bool)
    in_tree = np.zeros(b, dtype=bool)
    n_components = 0

    for root in range(n):
        if visited[root]:
            continue
        n_components += 1
        visited[root] = True
        queue = deque([root])
        while queue:
            u = queue.popleft()
            for v, e in adj[u]:
                if not visited[v]:
                    visited[v] = True
                    parent[v] = u
                    parent_edge[v] = e
                    depth[v] = depth[u] + 1
                    in_tree[e] = True
                    queue.append(v)

    chords = np.nonzero(~in_tree)[0]
    branches = network.branches

    def climb(x):
        """Edges (branch, sign) from node x one step up the tree; sign is
        +1 when the traversal x -> parent(x) follows the stored orientation."""
        e = parent_edge[x]
        sign = 1.0 if branches[e, 0] == x else -1.0
        return parent[x], e, sign

    cycles = []
    for c in chords:
        u, v = branches[c]
        path = [(int(c), 1.0)]  # chord traversed u -> v
        up_v, up_u = [], []
        x, y = v, u
        while depth[x] > depth[y]:
            x, e, s = climb(x)
            up_v.append((e, s))
        while depth[y] > depth[x]:
            y, e, s = climb(y)
            up_u.append((e, s))
        while x != y:
            x, e, s = climb(x)
            up_v.append((e, s))
            y, e, s = climb(y)
            up_u.append((e, s))
        path.extend(up_v)
        path.extend((e, -s) for e, s in reversed(up_u))
        br = np.array([e for e, _ in path], dtype=np.int64)
        sg = np.array([s for _, s in path])
        cycles.append((br, sg))

    return LoopBasis(tree_branches=np.nonzero(in_tree)[0], chords=chords,
                     cycles=cycles, n_components=n_components)


@dataclass(frozen=True)
class Material:
    """Thermal properties of one material label."""

    name: str
    conductivity: float      # lambda, W/m/degC
    density: float           # rho, kg/m^3
    heat_capacity: float     # c_p, J/kg/degC
    perfusion: float = 0.0   # h_b, W/m^3/degC

    def __post_init__(self):
        if not (self.conductivity > 0 and self.density > 0 and self.heat_capacity > 0):
            raise GeometryError(f"material {self.name!r}: lambda, rho, c_p must be > 0")
        if self.perfusion < 0:
            raise GeometryError(f"material {self.name!r}: h_b must be >= 0")

    @property
    def volumetric_heat_capacity(self) -> float:
        """rho * c_p (J/m^3/degC)."""
        return self.density * self.heat_capacity


class MaterialTable:
    """Mapping from voxel material label to thermal properties."""

    def __init__(self, materials: dict[int, Material]):
        self._table = dict(materials)

    def __getitem__(self, mat_id: int) -> Material:
        try:
            return self._table[int(mat_id)]
        except KeyError:
            raise GeometryError(f"unknown material id {mat_id}") from None

    def __contains__(self, mat_id) -> bool:
        return int(mat_id) in self._table

    def ids(self):
        return sorted(self._table)

    def property_arrays(self, mat_ids: np.ndarray):
        """Per-voxel (lambda, rho*c_p, h_b) arrays for a flat id array."""
        ids = np.asarray(mat_ids).ravel()
        missing = set(np.unique(ids)) - set(self._table)
        if missing:
            raise GeometryError(f"material id(s) {sorted(missing)} not in table")
        max_id = max(self._table)
        lam = np.zeros(max_id + 1)
        rc = np.zeros(max_id + 1)
        hb = np.zeros(max_id + 1)
        for k, m in self._table.items():
            lam[k] = m.conductivity
            rc[k] = m.volumetric_heat_capacity
            hb[k] = m.perfusion
        return lam[ids], rc[ids], hb[ids]


class VoxelGrid:
    """Axis-aligned uniform voxel grid with per-voxel material labels.

    Voxels are indexed (ix, iy, iz); the flat voxel index is
    ix + nx*(iy + ny*iz) and the flat node index of grid node (ix, iy, iz)
    is ix + (nx+1)*(iy + (ny+1)*iz), i.e. x varies fastest.
    """

    def __init__(self, origin, spacing, dims, material=None):
        self.origin = as_point(origin)
        spacing = np.asarray(spacing, dtype=float)
        if spacing.ndim == 0:
            spacing = np.full(3, float(spacing))
        if spacing.shape != (3,) or not np.all(spacing > 0):
            raise GeometryError(f"spacing must be 3 positive lengths, got {spacing}")
        self.spacing = spacing
        dims = np.asarray(dims, dtype=np.int64)
        if dims.shape != (3,) or not np.all(dims >= 1):
            raise GeometryError(f"dims must be 3 counts >= 1, got {dims}")
        self.dims = dims
        if material is None:
            material = np.zeros(dims, dtype=np.int32)
        material = np.asarray(material, dtype=np.int32)
        if material.shape != tuple(dims):
            raise GeometryError(f"material array shape {material.shape} != dims {tuple(dims)}")
        self.material = material

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    @property
    def node_dims(self) -> np.ndarray:
        return self.dims + 1

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.dims + 1))

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def upper(self) -> np.ndarray:
        return self.origin + self.spacing * self.dims

    def material_flat(self) -> np.ndarray:
        """Per-voxel labels in flat (x-fastest) order."""
        return self.material.ravel(order="F")

    def voxel_flat(self, ijk) -> np.ndarray:
        ijk = np.asarray(ijk, dtype=np.int64)
        nx, ny, _ = self.dims
        return ijk[..., 0] + nx * (ijk[..., 1] + ny * ijk[..., 2])

    def node_flat(self, ijk) -> np.ndarray:
        ijk = np.asarray(ijk, dtype=np.int64)
        nx, ny, _ = self.node_dims
        return ijk[..., 0] + nx * (ijk[..., 1] + ny * ijk[..., 2])

    def node_coords(self) -> np.ndarray:
        """All grid node positions, flat order, shape (n_nodes, 3)."""
        nx, ny, nz = self.node_dims
        x = self.origin[0] + self.spacing[0] * np.arange(nx)
        y = self.origin[1] + self.spacing[1] * np.arange(ny)
        z = self.origin[2] + self.spacing[2] * np.arange(nz)
        X, Y, Z = np.meshgrid(x, y, z, indexing="ij")
        out = np.empty((self.n_nodes, 3))
        out[:, 0] = X.ravel(order="F")
        out[:, 1] = Y.ravel(order="F")
        out[:, 2] = Z.ravel(order="F")
        return out

    def contains(self, p, tol_factor: float = 1e-9) -> bool:
        p = np.asarray(p, dtype=float)
        tol = tol_factor * self.spacing
        return bool(np.all(p >= self.origin - tol) and np.all(p <= self.upper + tol))

    def locate(self, pts):
        """Voxel indices and local coordinates in [0, 1]^3 of points.

        Points on the upper boundary are assigned to the last voxel.
        """
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        rel = (pts - self.origin) / self.spacing
        ijk = np.floor(rel).astype(np.int64)
        ijk = np.clip(ijk, 0, self.dims - 1)
        local = rel - ijk
        return ijk, local

    def trilinear_basis(self, pts):
        """Trilinear shape-function support at points inside the grid.

        Returns (corner node ids (n, 8), basis values (n, 8)); the values
        of the 8 shape functions sum to 1 at every point.
        """
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        tol = 1e-9 * self.spacing
        ok = (np.all(pts >= self.origin - tol, axis=1)
              & np.all(pts <= self.upper + tol, axis=1))
        if not np.all(ok):
            bad = pts[~ok][0]
            raise OutOfDomainError(f"point {bad} outside the voxel grid")
        ijk, loc = self.locate(pts)
        loc = np.clip(loc, 0.0, 1.0)
        nx, ny, _ = self.node_dims
        base = ijk[:, 0] + nx * (ijk[:, 1] + ny * ijk[:, 2])
        sx, sy, sz = 1, nx, nx * ny
        offsets = np.array([dx * sx + dy * sy + dz * sz
                            for dz in (0, 1) for dy in (0, 1) for dx in (0, 1)])
        ids = base[:, None] + offsets[None, :]
        x, y, z = loc[:, 0], loc[:, 1], loc[:, 2]
        wx = np.stack([1 - x, x], axis=1)
        wy = np.stack([1 - y, y], axis=1)
        wz = np.stack([1 - z, z], axis=1)
        w = np.empty((len(pts), 8))
        c = 0
        for dz in (0, 1):
            for dy in (0, 1):
                for dx in (0, 1):
                    w[:, c] = wx[:, dx] * wy[:, dy] * wz[:, dz]
                    c += 1
        return ids, w

    def voxel_corner_nodes(self, flat_voxels=None) -> np.ndarray:
        """Flat node indices of the 8 corners of each voxel, shape (nv, 8).

        Corner order follows the (dx, dy, dz) bit pattern with x fastest:
        (0,0,0), (1,0,0), (0,1,0), (1,1,0), (0,0,1), ...
        """
        nx, ny, nz = self.dims
        if flat_voxels is None:
            flat_voxels = np.arange(self.n_voxels)
        ix = flat_voxels % nx
        iy = (flat_voxels // nx) % ny
        iz = flat_voxels // (nx * ny)
        base = ix + (nx + 1) * (iy + (ny + 1) * iz)
        sx, sy, sz = 1, nx + 1, (nx + 1) * (ny + 1)
        offsets = np.array([dx * sx + dy * sy + dz * sz
                            for dz in (0, 1) for dy in (0, 1) for dx in (0, 1)])
        return base[:, None] + offsets[None, :]


@dataclass(frozen=True)
class ProbeBox:
    """Axis-aligned averaging box standing in for a temperature probe."""

    center: np.ndarray
    half_extents: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", as_point(self.center))
        he = np.asarray(self.half_extents, dtype=float)
        if he.shape != (3,) or not np.all(he > 0):
            raise GeometryError(f"half-extents must be 3 positive lengths, got {he}")
        object.__setattr__(self, "half_extents", he)

    @property
    def lo(self) -> np.ndarray:
        return self.center - self.half_extents

    @property
    def hi(self) -> np.ndarray:
        return self.center + self.half_extents


def clip_branch_to_voxels(p0, p1, grid: VoxelGrid, branch_id=None):
    """Split segment p0 -> p1 into per-voxel sub-segments.

    Returns
    -------
    voxels : (k,) flat voxel indices
    lengths : (k,) sub-segment lengths (m); sums to |p1 - p0| exactly
        up to roundoff
    midpoints : (k, 3) sub-segment midpoints, each inside its voxel

    Raises
    ------
    OutOfDomainError if either endpoint leaves the grid bounding box.
    """
    p0 = as_point(p0)
    p1 = as_point(p1)
    name = f"branch {branch_id}" if branch_id is not None else "segment"
    if not (grid.contains(p0) and grid.contains(p1)):
        raise OutOfDomainError(f"{name} exits the voxel grid: {p0} -> {p1}")
    d = p1 - p0
    length = float(np.linalg.norm(d))
    if length == 0.0:
        raise GeometryError(f"{name} has zero length")

    ts = [np.array([0.0, 1.0])]
    for ax in range(3):
        if d[ax] == 0.0:
            continue
        r0 = (p0[ax] - grid.origin[ax]) / grid.spacing[ax]
        r1 = (p1[ax] - grid.origin[ax]) / grid.spacing[ax]
        lo, hi = (r0, r1) if r0 < r1 else (r1, r0)
        planes = np.arange(np.ceil(lo), np.floor(hi) + 1.0)
        t = (planes - r0) / (r1 - r0)
        ts.append(t[(t > 0.0) & (t < 1.0)])
    t = np.unique(np.concatenate(ts))
    mids = p0 + np.outer(0.5 * (t[:-1] + t[1:]), d)
    seg_len = np.diff(t) * length
    keep = seg_len > 1e-15 * length
    mids, seg_len = mids[keep], seg_len[keep]
    ijk, _ = grid.locate(mids)
    voxels = grid.voxel_flat(ijk)
    return voxels, seg_len, mids
