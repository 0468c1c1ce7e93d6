"""Hot numeric kernels, each with a numba path and a pure numpy path.

The public names at the bottom of the module are bound to one or the other
according to :data:`navfuse._accel.USE_NUMBA`.  Both variants are always
importable as ``<name>_nb`` / ``<name>_np`` so they can be compared directly.
"""

from __future__ import annotations

import heapq
import math

import numpy as np

from ._accel import USE_NUMBA, njit

SQRT2 = math.sqrt(2.0)
CELL = 0.25
INV_CELL = 4.0

# (drow, dcol, n_orth, n_diag); diagonal entries last
_NEIGHBORS = np.array(
    [
        [0, 1, 1, 0],
        [1, 0, 1, 0],
        [0, -1, 1, 0],
        [-1, 0, 1, 0],
        [1, 1, 0, 1],
        [1, -1, 0, 1],
        [-1, -1, 0, 1],
        [-1, 1, 0, 1],
    ],
    dtype=np.int64,
)


# ---------------------------------------------------------------------------
# multi-source Dijkstra on the 8-connected free-cell graph
# ---------------------------------------------------------------------------
#
# Path costs are a*0.25 + b*0.25*sqrt(2) for integer step counts (a, b).  The
# counts are tracked instead of a running float sum, so the final distance does
# not depend on the order in which edges were summed.


def _dijkstra_counts(occ, src_rows, src_cols, nbrs):
    h, w = occ.shape
    key = np.full((h, w), np.inf)
    n_orth = np.full((h, w), -1, dtype=np.int64)
    n_diag = np.full((h, w), -1, dtype=np.int64)
    done = np.zeros((h, w), dtype=np.bool_)
    heap = [(0.0, np.int64(0))]
    heap.pop()
    for i in range(src_rows.shape[0]):
        r = src_rows[i]
        c = src_cols[i]
        if occ[r, c]:
            continue
        if key[r, c] > 0.0:
            key[r, c] = 0.0
            n_orth[r, c] = 0
            n_diag[r, c] = 0
            heapq.heappush(heap, (0.0, np.int64(r * w + c)))
    while len(heap) > 0:
        k, flat = heapq.heappop(heap)
        r = flat // w
        c = flat % w
        if done[r, c]:
            continue
        done[r, c] = True
        for j in range(nbrs.shape[0]):
            dr = nbrs[j, 0]
            dc = nbrs[j, 1]
            rr = r + dr
            cc = c + dc
            if rr < 0 or rr >= h or cc < 0 or cc >= w:
                continue
            if occ[rr, cc] or done[rr, cc]:
                continue
            if nbrs[j, 3] == 1 and (occ[r, cc] or occ[rr, c]):
                continue
            a = n_orth[r, c] + nbrs[j, 2]
            b = n_diag[r, c] + nbrs[j, 3]
            nk = float(a) + float(b) * 1.4142135623730951
            if nk < key[rr, cc]:
                key[rr, cc] = nk
                n_orth[rr, cc] = a
                n_diag[rr, cc] = b
                heapq.heappush(heap, (nk, np.int64(rr * w + cc)))
    return n_orth, n_diag


_dijkstra_counts_nb = njit(_dijkstra_counts)


def counts_to_meters(n_orth: np.ndarray, n_diag: np.ndarray) -> np.ndarray:
    out = CELL * (n_orth + n_diag * SQRT2)
    return np.where(n_orth < 0, np.inf, out)


def distance_field_nb(occ, src_rows, src_cols):
    a, b = _dijkstra_counts_nb(occ, src_rows, src_cols, _NEIGHBORS)
    return counts_to_meters(a, b)


def distance_field_np(occ, src_rows, src_cols):
    a, b = _dijkstra_counts_py(occ, src_rows, src_cols)
    return counts_to_meters(a, b)


def _dijkstra_counts_py(occ, src_rows, src_cols):
    """Plain-Python twin of the compiled kernel (lists and heapq)."""
    h, w = occ.shape
    blocked = occ.tolist()
    key = [[math.inf] * w for _ in range(h)]
    counts = [[None] * w for _ in range(h)]
    done = [[False] * w for _ in range(h)]
    heap = []
    for r, c in zip(src_rows.tolist(), src_cols.tolist()):
        if blocked[r][c] or key[r][c] == 0.0:
            continue
        key[r][c] = 0.0
        counts[r][c] = (0, 0)
        heap.append((0.0, r * w + c))
    heapq.heapify(heap)
    nbrs = _NEIGHBORS.tolist()
    while heap:
        _, flat = heapq.heappop(heap)
        r, c = divmod(flat, w)
        if done[r][c]:
            continue
        done[r][c] = True
        ca, cb = counts[r][c]
        for dr, dc, da, db in nbrs:
            rr, cc = r + dr, c + dc
            if not (0 <= rr < h and 0 <= cc < w) or blocked[rr][cc] or done[rr][cc]:
                continue
            if db and (blocked[r][cc] or blocked[rr][c]):
                continue
            a, b = ca + da, cb + db
            nk = float(a) + float(b) * SQRT2
            if nk < key[rr][cc]:
                key[rr][cc] = nk
                counts[rr][cc] = (a, b)
                heapq.heappush(heap, (nk, rr * w + cc))
    n_orth = np.full((h, w), -1, dtype=np.int64)
    n_diag = np.full((h, w), -1, dtype=np.int64)
    for r in range(h):
        for c in range(w):
            if counts[r][c] is not None:
                n_orth[r, c], n_diag[r, c] = counts[r][c]
    return n_orth, n_diag


# ---------------------------------------------------------------------------
# forward move with exact cell traversal
# ---------------------------------------------------------------------------


def _move_blocked(occ, x, y, ux, uy):
    """Return (blocked, x1, y1) for a 0.25 m step along unit vector (ux, uy).

    Every cell whose interior the segment passes through must be free, as must
    the cell holding the end point.  A segment passing exactly through a grid
    corner also requires both side cells of that corner to be free.
    """
    h, w = occ.shape
    x1 = x + CELL * ux
    y1 = y + CELL * uy
    gx0 = x * INV_CELL
    gy0 = y * INV_CELL
    gx1 = x1 * INV_CELL
    gy1 = y1 * INV_CELL
    ts = np.empty(4)
    ts[0] = 0.0
    n = 1
    tx = -1.0
    ty = -1.0
    k = math.floor(min(gx0, gx1)) + 1.0
    if k < max(gx0, gx1):
        tx = (k - gx0) / (gx1 - gx0)
        ts[n] = tx
        n += 1
    k = math.floor(min(gy0, gy1)) + 1.0
    if k < max(gy0, gy1):
        ty = (k - gy0) / (gy1 - gy0)
        ts[n] = ty
        n += 1
    ts[n] = 1.0
    n += 1
    t = np.sort(ts[:n])
    # cells to test, as (row, col) pairs
    cells = np.empty((6, 2), dtype=np.int64)
    m = 0
    for i in range(n - 1):
        if t[i + 1] - t[i] > 1e-12:
            tm = 0.5 * (t[i] + t[i + 1])
            cells[m, 0] = int(math.floor(gy0 + tm * (gy1 - gy0)))
            cells[m, 1] = int(math.floor(gx0 + tm * (gx1 - gx0)))
            m += 1
    if tx > 0.0 and ty > 0.0 and abs(tx - ty) <= 1e-12:
        # corner crossing: both side cells of the corner must be free
        col_before = int(math.floor(gx0 + 0.5 * tx * (gx1 - gx0)))
        row_before = int(math.floor(gy0 + 0.5 * ty * (gy1 - gy0)))
        col_after = int(math.floor(gx0 + 0.5 * (1.0 + tx) * (gx1 - gx0)))
        row_after = int(math.floor(gy0 + 0.5 * (1.0 + ty) * (gy1 - gy0)))
        cells[m, 0] = row_before
        cells[m, 1] = col_after
        m += 1
        cells[m, 0] = row_after
        cells[m, 1] = col_before
        m += 1
    cells[m, 0] = int(math.floor(gy1))
    cells[m, 1] = int(math.floor(gx1))
    m += 1
    for i in range(m):
        r = cells[i, 0]
        c = cells[i, 1]
        if r < 0 or r >= h or c < 0 or c >= w or occ[r, c]:
            return True, x, y
    return False, x1, y1


move_blocked_nb = njit(_move_blocked)
move_blocked_np = _move_blocked


# ---------------------------------------------------------------------------
# ray depth and line of sight (sampled marching)
# ---------------------------------------------------------------------------


def _ray_depth(occ, x, y, ux, uy, max_depth, ds):
    h, w = occ.shape
    d = ds
    while d <= max_depth:
        c = int(math.floor((x + d * ux) * INV_CELL))
        r = int(math.floor((y + d * uy) * INV_CELL))
        if r < 0 or r >= h or c < 0 or c >= w or occ[r, c]:
            return d - ds
        d += ds
    return max_depth


def _line_of_sight(occ, x0, y0, x1, y1, ds):
    h, w = occ.shape
    length = math.hypot(x1 - x0, y1 - y0)
    if length == 0.0:
        return True
    n = int(math.ceil(length / ds))
    for i in range(1, n + 1):
        t = i / n
        c = int(math.floor((x0 + t * (x1 - x0)) * INV_CELL))
        r = int(math.floor((y0 + t * (y1 - y0)) * INV_CELL))
        if r < 0 or r >= h or c < 0 or c >= w or occ[r, c]:
            return False
    return True


ray_depth_nb = njit(_ray_depth)
ray_depth_np = _ray_depth
line_of_sight_nb = njit(_line_of_sight)
line_of_sight_np = _line_of_sight


# ---------------------------------------------------------------------------
# GRU recurrence over packed episodes
# ---------------------------------------------------------------------------
#
# ax: (T_total, 3, H) input projections W.x + b for gates (z, r, candidate).
# u: (3, H, H) recurrent matrices.  offsets: episode boundaries into T_total;
# every episode starts from a zero hidden state.


def _gru_forward_loops(ax, u, offsets):
    n_t = ax.shape[0]
    hd = ax.shape[2]
    hs = np.zeros((n_t, hd))
    hprev = np.zeros((n_t, hd))
    zs = np.zeros((n_t, hd))
    rs = np.zeros((n_t, hd))
    cs = np.zeros((n_t, hd))
    h = np.zeros(hd)
    rh = np.zeros(hd)
    for e in range(offsets.shape[0] - 1):
        for i in range(hd):
            h[i] = 0.0
        for t in range(offsets[e], offsets[e + 1]):
            for i in range(hd):
                hprev[t, i] = h[i]
            for i in range(hd):
                sz = ax[t, 0, i]
                sr = ax[t, 1, i]
                for j in range(hd):
                    sz += u[0, i, j] * h[j]
                    sr += u[1, i, j] * h[j]
                zs[t, i] = 1.0 / (1.0 + math.exp(-sz))
                rs[t, i] = 1.0 / (1.0 + math.exp(-sr))
            for j in range(hd):
                rh[j] = rs[t, j] * h[j]
            for i in range(hd):
                sc = ax[t, 2, i]
                for j in range(hd):
                    sc += u[2, i, j] * rh[j]
                cs[t, i] = math.tanh(sc)
            for i in range(hd):
                h[i] = (1.0 - zs[t, i]) * h[i] + zs[t, i] * cs[t, i]
                hs[t, i] = h[i]
    return hs, hprev, zs, rs, cs


def _gru_backward_loops(dhs, hprev, zs, rs, cs, u, offsets):
    n_t, hd = dhs.shape
    dax = np.zeros((n_t, 3, hd))
    du = np.zeros((3, hd, hd))
    dh = np.zeros(hd)
    dnext = np.zeros(hd)
    drh = np.zeros(hd)
    for e in range(offsets.shape[0] - 1):
        for i in range(hd):
            dnext[i] = 0.0
        for t in range(offsets[e + 1] - 1, offsets[e] - 1, -1):
            for i in range(hd):
                dh[i] = dhs[t, i] + dnext[i]
            for i in range(hd):
                z = zs[t, i]
                c = cs[t, i]
                dz = dh[i] * (c - hprev[t, i])
                dc = dh[i] * z
                dax[t, 0, i] = dz * z * (1.0 - z)
                dax[t, 2, i] = dc * (1.0 - c * c)
                dnext[i] = dh[i] * (1.0 - z)
            for j in range(hd):
                s = 0.0
                for i in range(hd):
                    s += u[2, i, j] * dax[t, 2, i]
                drh[j] = s
            for j in range(hd):
                r = rs[t, j]
                dr = drh[j] * hprev[t, j]
                dax[t, 1, j] = dr * r * (1.0 - r)
                dnext[j] += drh[j] * r
            for i in range(hd):
                gz = dax[t, 0, i]
                gr = dax[t, 1, i]
                gc = dax[t, 2, i]
                for j in range(hd):
                    hj = hprev[t, j]
                    du[0, i, j] += gz * hj
                    du[1, i, j] += gr * hj
                    du[2, i, j] += gc * rs[t, j] * hj
            for j in range(hd):
                s = 0.0
                for i in range(hd):
                    s += u[0, i, j] * dax[t, 0, i] + u[1, i, j] * dax[t, 1, i]
                dnext[j] += s
    return dax, du


gru_forward_nb = njit(_gru_forward_loops)
gru_backward_nb = njit(_gru_backward_loops)


def gru_forward_np(ax, u, offsets):
    n_t, _, hd = ax.shape
    hs = np.zeros((n_t, hd))
    hprev = np.zeros((n_t, hd))
    zs = np.zeros((n_t, hd))
    rs = np.zeros((n_t, hd))
    cs = np.zeros((n_t, hd))
    for e in range(len(offsets) - 1):
        h = np.zeros(hd)
        for t in range(offsets[e], offsets[e + 1]):
            hprev[t] = h
            z = 1.0 / (1.0 + np.exp(-(ax[t, 0] + u[0] @ h)))
            r = 1.0 / (1.0 + np.exp(-(ax[t, 1] + u[1] @ h)))
            c = np.tanh(ax[t, 2] + u[2] @ (r * h))
            h = (1.0 - z) * h + z * c
            zs[t], rs[t], cs[t], hs[t] = z, r, c, h
    return hs, hprev, zs, rs, cs


def gru_backward_np(dhs, hprev, zs, rs, cs, u, offsets):
    n_t, hd = dhs.shape
    dax = np.zeros((n_t, 3, hd))
    du = np.zeros((3, hd, hd))
    for e in range(len(offsets) - 1):
        dnext = np.zeros(hd)
        for t in range(offsets[e + 1] - 1, offsets[e] - 1, -1):
            dh = dhs[t] + dnext
            z, r, c, hp = zs[t], rs[t], cs[t], hprev[t]
            daz = dh * (c - hp) * z * (1.0 - z)
            dac = dh * z * (1.0 - c * c)
            drh = u[2].T @ dac
            dar = drh * hp * r * (1.0 - r)
            dax[t, 0], dax[t, 1], dax[t, 2] = daz, dar, dac
            du[0] += np.outer(daz, hp)
            du[1] += np.outer(dar, hp)
            du[2] += np.outer(dac, r * hp)
            dnext = dh * (1.0 - z) + drh * r + u[0].T @ daz + u[1].T @ dar
    return dax, du


if USE_NUMBA:
    distance_field = distance_field_nb
    move_blocked = move_blocked_nb
    ray_depth = ray_depth_nb
    line_of_sight = line_of_sight_nb
    gru_forward = gru_forward_nb
    gru_backward = gru_backward_nb
else:
    distance_field = distance_field_np
    move_blocked = move_blocked_np
    ray_depth = ray_depth_np
    line_of_sight = line_of_sight_np
    gru_forward = gru_forward_np
    gru_backward = gru_backward_np
