"""Hot inner loops: pairwise IoU, greedy NMS, Kuhn-Munkres and greedy matching.

Every kernel is written once as plain loops over float64 arrays. With numba
available (and not disabled through ``WSSOD_DISABLE_NUMBA``) the loops are
compiled; otherwise a vectorised numpy version is used where one exists and
the loop runs in the interpreter where it does not.

The ``*_loop`` and ``*_numpy`` names stay importable so the benchmark and the
tests can drive both paths regardless of the flag.
"""

import numpy as np

from ._accel import select


# ---------------------------------------------------------------- IoU ----

def iou_matrix_loop(a, b):
    n = a.shape[0]
    m = b.shape[0]
    out = np.zeros((n, m))
    for i in range(n):
        area_a = (a[i, 2] - a[i, 0]) * (a[i, 3] - a[i, 1])
        for j in range(m):
            iw = min(a[i, 2], b[j, 2]) - max(a[i, 0], b[j, 0])
            if iw <= 0.0:
                continue
            ih = min(a[i, 3], b[j, 3]) - max(a[i, 1], b[j, 1])
            if ih <= 0.0:
                continue
            inter = iw * ih
            union = area_a + (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1]) - inter
            if union > 0.0:
                out[i, j] = inter / union
    return out


def iou_matrix_numpy(a, b):
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=(union > 0.0) & (inter > 0.0))
    return out


# ---------------------------------------------------------------- NMS ----

def nms_keep_loop(boxes, labels, order, threshold):
    """Greedy class-wise suppression over ``order`` (already score-sorted)."""
    n = order.shape[0]
    kept = np.empty(n, dtype=np.int64)
    n_kept = 0
    for oi in range(n):
        i = order[oi]
        area_i = (boxes[i, 2] - boxes[i, 0]) * (boxes[i, 3] - boxes[i, 1])
        keep = True
        for ki in range(n_kept):
            k = kept[ki]
            if labels[k] != labels[i]:
                continue
            iw = min(boxes[i, 2], boxes[k, 2]) - max(boxes[i, 0], boxes[k, 0])
            ih = min(boxes[i, 3], boxes[k, 3]) - max(boxes[i, 1], boxes[k, 1])
            if iw <= 0.0 or ih <= 0.0:
                continue
            inter = iw * ih
            union = area_i + (boxes[k, 2] - boxes[k, 0]) * (boxes[k, 3] - boxes[k, 1]) - inter
            if union > 0.0 and inter / union > threshold:
                keep = False
                break
        if keep:
            kept[n_kept] = i
            n_kept += 1
    return kept[:n_kept]


def nms_keep_numpy(boxes, labels, order, threshold):
    ious = iou_matrix_numpy(boxes, boxes)
    same = labels[:, None] == labels[None, :]
    suppressed = np.zeros(len(order), dtype=bool)
    kept = []
    for i in order:
        if suppressed[i]:
            continue
        kept.append(i)
        suppressed |= same[i] & (ious[i] > threshold)
    return np.asarray(kept, dtype=np.int64)


# ------------------------------------------------------- Kuhn-Munkres ----

def solve_square_loop(cost):
    """Shortest-augmenting-path Hungarian method on a square matrix.

    Returns ``(row_to_col, u, v)`` where ``u``/``v`` are optimal dual
    potentials: ``cost[i, j] - u[i] - v[j] >= 0`` everywhere and ``== 0`` on
    the returned assignment.
    """
    n = cost.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j]: 1-based row owning column j
    way = np.zeros(n + 1, dtype=np.int64)
    minv = np.empty(n + 1)
    used = np.zeros(n + 1, dtype=np.bool_)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv[:] = inf
        used[:] = False
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    row_to_col = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        row_to_col[p[j] - 1] = j - 1
    return row_to_col, u[1:].copy(), v[1:].copy()


def lexicographic_refine_loop(cost, u, v, row_to_col, n_rows, tol):
    """Move an optimal assignment to the lexicographically smallest optimum.

    Any optimal assignment is a perfect matching of the equality subgraph
    (zero reduced cost under the optimal duals), so rows ``0..n_rows-1`` are
    fixed greedily to their smallest feasible column, re-routing the rest of
    the matching along an alternating path when needed.
    """
    n = cost.shape[0]
    eq = np.zeros((n, n), dtype=np.bool_)
    for i in range(n):
        for j in range(n):
            eq[i, j] = cost[i, j] - u[i] - v[j] <= tol
    r2c = row_to_col.copy()
    c2r = np.empty(n, dtype=np.int64)
    for i in range(n):
        c2r[r2c[i]] = i
    col_locked = np.zeros(n, dtype=np.bool_)
    via_col = np.empty(n, dtype=np.int64)  # column a BFS row currently owns
    parent = np.empty(n, dtype=np.int64)  # BFS row that reached it
    seen_row = np.zeros(n, dtype=np.bool_)
    queue = np.empty(n, dtype=np.int64)
    for i in range(n_rows):
        for j in range(n):
            if not eq[i, j] or col_locked[j]:
                continue
            if r2c[i] == j:
                break
            # Row i takes column j; the displaced row must reach i's old column.
            target = r2c[i]
            start = c2r[j]
            seen_row[:] = False
            seen_row[i] = True
            seen_row[start] = True
            parent[start] = -1
            head = 0
            tail = 0
            queue[tail] = start
            tail += 1
            found = -1
            while head < tail and found < 0:
                r = queue[head]
                head += 1
                for c in range(n):
                    if col_locked[c] or c == j or not eq[r, c]:
                        continue
                    if c == target:
                        found = r
                        break
                    nr = c2r[c]
                    if not seen_row[nr]:
                        seen_row[nr] = True
                        parent[nr] = r
                        via_col[nr] = c
                        queue[tail] = nr
                        tail += 1
            if found < 0:
                continue
            r = found
            c = target
            while r >= 0:
                owned = via_col[r] if parent[r] >= 0 else j
                r2c[r] = c
                c2r[c] = r
                c = owned
                r = parent[r]
            r2c[i] = j
            c2r[j] = i
            break
        col_locked[r2c[i]] = True
    return r2c


# ------------------------------------------------------ greedy match ----

def greedy_match_loop(ious, threshold):
    """COCO-style matching; rows are detections in descending score order.

    Each detection takes the still-free ground truth of highest IoU that
    reaches ``threshold`` (lowest index on ties). Returns gt index or -1.
    """
    n_det = ious.shape[0]
    n_gt = ious.shape[1]
    taken = np.zeros(n_gt, dtype=np.bool_)
    out = np.full(n_det, -1, dtype=np.int64)
    for d in range(n_det):
        best = -1
        best_iou = threshold
        for g in range(n_gt):
            if taken[g]:
                continue
            if ious[d, g] >= best_iou and (best < 0 or ious[d, g] > best_iou):
                best = g
                best_iou = ious[d, g]
        if best >= 0:
            taken[best] = True
            out[d] = best
    return out


iou_matrix = select(iou_matrix_loop, iou_matrix_numpy)
nms_keep = select(nms_keep_loop, nms_keep_numpy)
solve_square = select(solve_square_loop)
lexicographic_refine = select(lexicographic_refine_loop)
greedy_match = select(greedy_match_loop)
