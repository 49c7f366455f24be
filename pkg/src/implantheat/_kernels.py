"""Compiled inner loops (numba) for inductance assembly and sparse solves.

Everything here is deterministic: loops are serial and no fastmath
reassociation is enabled, so repeated runs give bit-identical results.
"""

import numpy as np
from numba import njit

__all__ = [
    "neumann_mutual_dense",
    "ic0_factor_inplace",
    "lower_solve",
    "lower_transpose_solve",
]


@njit(cache=True)
def _seg_overlap_collinear(a0, d0, l0, a1, d1, l1):
    """True if two segments are collinear with overlapping interiors."""
    cx = d0[1] * d1[2] - d0[2] * d1[1]
    cy = d0[2] * d1[0] - d0[0] * d1[2]
    cz = d0[0] * d1[1] - d0[1] * d1[0]
    if cx * cx + cy * cy + cz * cz > (1e-12 * l0 * l1) ** 2:
        return False
    # perpendicular distance of a1 from the line through a0
    wx, wy, wz = a1[0] - a0[0], a1[1] - a0[1], a1[2] - a0[2]
    t = (wx * d0[0] + wy * d0[1] + wz * d0[2]) / (l0 * l0)
    px = wx - t * d0[0]
    py = wy - t * d0[1]
    pz = wz - t * d0[2]
    if px * px + py * py + pz * pz > (1e-9) ** 2:
        return False
    # 1D overlap along the common line
    s0, s1 = 0.0, l0
    u0 = (wx * d0[0] + wy * d0[1] + wz * d0[2]) / l0
    du = (d1[0] * d0[0] + d1[1] * d0[1] + d1[2] * d0[2]) / l0
    u1 = u0 + du
    if u0 > u1:
        u0, u1 = u1, u0
    lo = max(s0, u0)
    hi = min(s1, u1)
    return hi - lo > 1e-12 * min(l0, l1)


@njit(cache=True)
def neumann_mutual_dense(p0, d, lengths, nodes_of, gx_far, gw_far, gx_near, gw_near,
                         near_factor, self_coef, out):
    """Fill the dense branch inductance matrix in place.

    p0, d : (b, 3) segment starts and direction vectors (end - start)
    lengths : (b,) segment lengths
    nodes_of : (b, 2) node ids, used to allow pairs sharing an endpoint
    gx_*, gw_* : Gauss nodes/weights on [0, 1] (far and near tiers)
    near_factor : pairs with midpoint distance below near_factor * max(l)
        use the near quadrature tier
    self_coef : (b,) precomputed self-inductance diagonal
    out : (b, b) output, overwritten

    Returns (i, j) of an overlapping collinear pair, or (-1, -1).
    """
    b = p0.shape[0]
    mu_over_4pi = 1e-7
    for i in range(b):
        out[i, i] = self_coef[i]
        mi0 = p0[i, 0] + 0.5 * d[i, 0]
        mi1 = p0[i, 1] + 0.5 * d[i, 1]
        mi2 = p0[i, 2] + 0.5 * d[i, 2]
        for j in range(i + 1, b):
            dot = d[i, 0] * d[j, 0] + d[i, 1] * d[j, 1] + d[i, 2] * d[j, 2]
            mj0 = p0[j, 0] + 0.5 * d[j, 0]
            mj1 = p0[j, 1] + 0.5 * d[j, 1]
            mj2 = p0[j, 2] + 0.5 * d[j, 2]
            dm0, dm1, dm2 = mi0 - mj0, mi1 - mj1, mi2 - mj2
            dmid2 = dm0 * dm0 + dm1 * dm1 + dm2 * dm2
            lmax = max(lengths[i], lengths[j])
            near = dmid2 < (near_factor * lmax) ** 2
            if near:
                shared = (nodes_of[i, 0] == nodes_of[j, 0] or nodes_of[i, 0] == nodes_of[j, 1]
                          or nodes_of[i, 1] == nodes_of[j, 0] or nodes_of[i, 1] == nodes_of[j, 1])
                if not shared and _seg_overlap_collinear(p0[i], d[i], lengths[i],
                                                         p0[j], d[j], lengths[j]):
                    return i, j
                gx, gw = gx_near, gw_near
            else:
                gx, gw = gx_far, gw_far
            if dot == 0.0:
                out[i, j] = 0.0
                out[j, i] = 0.0
                continue
            acc = 0.0
            ng = gx.shape[0]
            for a in range(ng):
                xa0 = p0[i, 0] + gx[a] * d[i, 0]
                xa1 = p0[i, 1] + gx[a] * d[i, 1]
                xa2 = p0[i, 2] + gx[a] * d[i, 2]
                wa = gw[a]
                for c in range(ng):
                    r0 = xa0 - (p0[j, 0] + gx[c] * d[j, 0])
                    r1 = xa1 - (p0[j, 1] + gx[c] * d[j, 1])
                    r2 = xa2 - (p0[j, 2] + gx[c] * d[j, 2])
                    acc += wa * gw[c] / np.sqrt(r0 * r0 + r1 * r1 + r2 * r2)
            m = mu_over_4pi * dot * acc
            out[i, j] = m
            out[j, i] = m
    return -1, -1


@njit(cache=True)
def ic0_factor_inplace(n, indptr, indices, data):
    """Zero-fill incomplete Cholesky on a lower-triangular CSR (diag last per row).

    `data` holds the lower triangle of A on entry and the factor L on
    exit.  Returns the row index of a non-positive pivot, or -1 on
    success.
    """
    for i in range(n):
        row_start = indptr[i]
        diag_pos = indptr[i + 1] - 1
        for idx in range(row_start, diag_pos):
            j = indices[idx]
            # dot of rows i and j over shared columns < j
            s = 0.0
            pi = row_start
            pj = indptr[j]
            j_end = indptr[j + 1] - 1  # exclude diag of row j
            while pi < idx and pj < j_end:
                ci = indices[pi]
                cj = indices[pj]
                if ci == cj:
                    s += data[pi] * data[pj]
                    pi += 1
                    pj += 1
                elif ci < cj:
                    pi += 1
                else:
                    pj += 1
            djj = data[indptr[j + 1] - 1]
            data[idx] = (data[idx] - s) / djj
        s = 0.0
        for idx in range(row_start, diag_pos):
            s += data[idx] * data[idx]
        pivot = data[diag_pos] - s
        if pivot <= 0.0:
            return i
        data[diag_pos] = np.sqrt(pivot)
    return -1


@njit(cache=True)
def lower_solve(n, indptr, indices, data, b, x):
    """Solve L x = b with L lower-triangular CSR (diag last per row)."""
    for i in range(n):
        s = b[i]
        diag_pos = indptr[i + 1] - 1
        for idx in range(indptr[i], diag_pos):
            s -= data[idx] * x[indices[idx]]
        x[i] = s / data[diag_pos]


@njit(cache=True)
def lower_transpose_solve(n, indptr, indices, data, b, x):
    """Solve L^T x = b with L lower-triangular CSR (diag last per row)."""
    for i in range(n):
        x[i] = b[i]
    for i in range(n - 1, -1, -1):
        diag_pos = indptr[i + 1] - 1
        xi = x[i] / data[diag_pos]
        x[i] = xi
        for idx in range(indptr[i], diag_pos):
            x[indices[idx]] -= data[idx] * xi
