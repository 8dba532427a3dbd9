"""Bounding volume hierarchy and ray-triangle queries.

BVH traversal and the brute-force scan share one intersection routine, so
their nearest hits agree bit-for-bit. Ties in distance go to the lower
triangle id.
"""
from dataclasses import dataclass

import numba
import numpy as np

T_MIN = 1e-9


@numba.njit(cache=True, inline="always")
def _hit_triangle(ox, oy, oz, dx, dy, dz, tri, V, T):
    """Moller-Trumbore, two-sided. Returns (t, u, v); t = inf on miss."""
    a = T[tri, 0]
    b = T[tri, 1]
    c = T[tri, 2]
    ax, ay, az = V[a, 0], V[a, 1], V[a, 2]
    e1x, e1y, e1z = V[b, 0] - ax, V[b, 1] - ay, V[b, 2] - az
    e2x, e2y, e2z = V[c, 0] - ax, V[c, 1] - ay, V[c, 2] - az
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if det == 0.0:
        return np.inf, 0.0, 0.0
    inv = 1.0 / det
    sx, sy, sz = ox - ax, oy - ay, oz - az
    u = (sx * px + sy * py + sz * pz) * inv
    if u < 0.0 or u > 1.0:
        return np.inf, 0.0, 0.0
    qx = sy * e1z - sz * e1y
    qy = sz * e1x - sx * e1z
    qz = sx * e1y - sy * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return np.inf, 0.0, 0.0
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    if t <= T_MIN:
        return np.inf, 0.0, 0.0
    return t, u, v


@numba.njit(cache=True, nogil=True)
def _brute(orig, dirs, V, T, out_id, out_t, out_u, out_v):
    for r in range(orig.shape[0]):
        best_t = np.inf
        best_id = -1
        bu = 0.0
        bv = 0.0
        ox, oy, oz = orig[r, 0], orig[r, 1], orig[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        for tri in range(T.shape[0]):
            t, u, v = _hit_triangle(ox, oy, oz, dx, dy, dz, tri, V, T)
            if t < best_t:
                best_t, best_id, bu, bv = t, tri, u, v
        out_id[r] = best_id
        out_t[r] = best_t
        out_u[r] = bu
        out_v[r] = bv


@numba.njit(cache=True, inline="always")
def _box_entry(ox, oy, oz, dx, dy, dz, lo, hi, node):
    """Entry distance of the ray into node's box, or inf when it misses."""
    tmin = -np.inf
    tmax = np.inf
    for k in range(3):
        o = ox if k == 0 else (oy if k == 1 else oz)
        d = dx if k == 0 else (dy if k == 1 else dz)
        if d == 0.0:
            if o < lo[node, k] or o > hi[node, k]:
                return np.inf
        else:
            t1 = (lo[node, k] - o) / d
            t2 = (hi[node, k] - o) / d
            if t1 > t2:
                t1, t2 = t2, t1
            if t1 > tmin:
                tmin = t1
            if t2 < tmax:
                tmax = t2
    if tmax < tmin or tmax < 0.0:
        return np.inf
    return tmin


@numba.njit(cache=True, nogil=True)
def _traverse(orig, dirs, V, T, lo, hi, left, right, start, count, order,
              out_id, out_t, out_u, out_v):
    stack = np.empty(128, dtype=np.int64)
    for r in range(orig.shape[0]):
        best_t = np.inf
        best_id = -1
        bu = 0.0
        bv = 0.0
        ox, oy, oz = orig[r, 0], orig[r, 1], orig[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            entry = _box_entry(ox, oy, oz, dx, dy, dz, lo, hi, node)
            # inclusive: a farther box may still hold an equal-t lower-id hit
            if entry == np.inf or entry > best_t:
                continue
            if count[node] > 0:
                for k in range(start[node], start[node] + count[node]):
                    tri = order[k]
                    t, u, v = _hit_triangle(ox, oy, oz, dx, dy, dz, tri, V, T)
                    if t < best_t or (t == best_t and t < np.inf and tri < best_id):
                        best_t, best_id, bu, bv = t, tri, u, v
            else:
                # push the child whose box starts farther first
                el = _box_entry(ox, oy, oz, dx, dy, dz, lo, hi, left[node])
                er = _box_entry(ox, oy, oz, dx, dy, dz, lo, hi, right[node])
                if el <= er:
                    stack[sp] = right[node]
                    stack[sp + 1] = left[node]
                else:
                    stack[sp] = left[node]
                    stack[sp + 1] = right[node]
                sp += 2
        out_id[r] = best_id
        out_t[r] = best_t
        out_u[r] = bu
        out_v[r] = bv


@dataclass(frozen=True, eq=False)
class Bvh:
    vertices: np.ndarray
    triangles: np.ndarray
    lo: np.ndarray  # (nodes, 3) box minima
    hi: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray  # leaf: first slot in ``order``
    count: np.ndarray  # leaf: triangle count; 0 for inner nodes
    order: np.ndarray  # triangle ids grouped by leaf
    leaf_size: int

    @property
    def n_nodes(self):
        return len(self.count)

    def leaves(self):
        return np.flatnonzero(self.count > 0)


def build_bvh(mesh, leaf_size=4):
    """Median-split BVH over triangle centroids along the widest axis."""
    if mesh.n_triangles == 0:
        raise ValueError("cannot build a BVH over an empty mesh")
    a, b, c = mesh.corners()
    tlo = np.minimum(np.minimum(a, b), c)
    thi = np.maximum(np.maximum(a, b), c)
    cent = (a + b + c) / 3.0
    lo, hi, left, right, start, count = [], [], [], [], [], []
    order = []
    # boxes are padded so rounding in the slab test never drops a hit
    pad = 1e-9

    def new_node(ids):
        lo.append(tlo[ids].min(axis=0) - pad)
        hi.append(thi[ids].max(axis=0) + pad)
        left.append(-1)
        right.append(-1)
        start.append(0)
        count.append(0)
        return len(lo) - 1

    root = new_node(np.arange(mesh.n_triangles))
    work = [(root, np.arange(mesh.n_triangles))]
    while work:
        node, ids = work.pop()
        if len(ids) <= leaf_size:
            start[node] = len(order)
            count[node] = len(ids)
            order.extend(ids.tolist())
            continue
        ext = cent[ids].max(axis=0) - cent[ids].min(axis=0)
        axis = int(np.argmax(ext))
        srt = ids[np.lexsort((ids, cent[ids, axis]))]
        half = len(srt) // 2
        l_ids, r_ids = srt[:half], srt[half:]
        ln = new_node(l_ids)
        rn = new_node(r_ids)
        left[node] = ln
        right[node] = rn
        work.append((rn, r_ids))
        work.append((ln, l_ids))
    return Bvh(
        vertices=mesh.vertices,
        triangles=mesh.triangles,
        lo=np.array(lo), hi=np.array(hi),
        left=np.array(left, dtype=np.int64), right=np.array(right, dtype=np.int64),
        start=np.array(start, dtype=np.int64), count=np.array(count, dtype=np.int64),
        order=np.array(order, dtype=np.int64), leaf_size=leaf_size,
    )


def _prep(origins, dirs):
    o = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    if len(o) == 1 and len(d) > 1:
        o = np.ascontiguousarray(np.broadcast_to(o, d.shape))
    n = len(d)
    return o, d, np.empty(n, np.int64), np.empty(n), np.empty(n), np.empty(n)


def intersect(bvh, origins, dirs):
    """Nearest hit per ray: (tri_id [-1 on miss], t [inf on miss], u, v)."""
    o, d, tid, t, u, v = _prep(origins, dirs)
    _traverse(o, d, bvh.vertices, bvh.triangles, bvh.lo, bvh.hi, bvh.left, bvh.right,
              bvh.start, bvh.count, bvh.order, tid, t, u, v)
    return tid, t, u, v


def intersect_brute(mesh, origins, dirs):
    """Reference scan over every triangle; same contract as :func:`intersect`."""
    o, d, tid, t, u, v = _prep(origins, dirs)
    _brute(o, d, mesh.vertices, mesh.triangles, tid, t, u, v)
    return tid, t, u, v
