"""BVH-accelerated ray-triangle intersection.

The BVH is built once per mesh (median split on the largest centroid axis,
leaves of up to 4 triangles) and traversed per ray in numba-compiled kernels.
Each ray writes only its own output slot, so parallel traversal is bitwise
deterministic regardless of thread count. A vectorized numpy brute-force
intersector is kept as the independent oracle.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

from .geometry import MeshDerived, SurfaceHit

_LEAF_SIZE = 4
_STACK_DEPTH = 96


class Bvh:
    """Flat BVH: per-node AABB bounds and child/leaf indexing plus the
    triangle permutation."""

    def __init__(self, bounds_min, bounds_max, left_first, count, tri_order):
        self.bounds_min = bounds_min      # (n, 3) float64
        self.bounds_max = bounds_max
        self.left_first = left_first      # (n,) int64: child index or first tri
        self.count = count                # (n,) int64: 0 for inner nodes
        self.tri_order = tri_order        # (M,) int64 permutation


def build_bvh(derived: MeshDerived) -> Bvh:
    p0, e1, e2 = derived.p0, derived.e1, derived.e2
    lo = np.minimum(np.minimum(p0, p0 + e1), p0 + e2)
    hi = np.maximum(np.maximum(p0, p0 + e1), p0 + e2)
    centroid = (lo + hi) * 0.5
    n = len(p0)
    order = np.arange(n, dtype=np.int64)

    bounds_min, bounds_max, left_first, count = [], [], [], []

    def new_node():
        bounds_min.append(np.zeros(3))
        bounds_max.append(np.zeros(3))
        left_first.append(0)
        count.append(0)
        return len(count) - 1

    # iterative build; each stack entry owns a slice of `order`
    root = new_node()
    stack = [(root, 0, n)]
    while stack:
        node, start, end = stack.pop()
        idx = order[start:end]
        bounds_min[node] = lo[idx].min(axis=0)
        bounds_max[node] = hi[idx].max(axis=0)
        if end - start <= _LEAF_SIZE:
            left_first[node] = start
            count[node] = end - start
            continue
        c = centroid[idx]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        mid = (end - start) // 2
        part = np.argpartition(c[:, axis], mid)
        order[start:end] = idx[part]
        left = new_node()
        right = new_node()
        left_first[node] = left
        count[node] = 0
        assert right == left + 1
        stack.append((left, start, start + mid))
        stack.append((right, start + mid, end))

    return Bvh(np.asarray(bounds_min), np.asarray(bounds_max),
               np.asarray(left_first, dtype=np.int64),
               np.asarray(count, dtype=np.int64), order)


@njit(cache=True, inline="always", error_model="numpy")
def _hit_aabb(bmin, bmax, ox, oy, oz, ix, iy, iz, t_best):
    tx1 = (bmin[0] - ox) * ix
    tx2 = (bmax[0] - ox) * ix
    tn = min(tx1, tx2)
    tf = max(tx1, tx2)
    ty1 = (bmin[1] - oy) * iy
    ty2 = (bmax[1] - oy) * iy
    tn = max(tn, min(ty1, ty2))
    tf = min(tf, max(ty1, ty2))
    tz1 = (bmin[2] - oz) * iz
    tz2 = (bmax[2] - oz) * iz
    tn = max(tn, min(tz1, tz2))
    tf = min(tf, max(tz1, tz2))
    return tf >= tn and tn < t_best and tf > 0.0


@njit(cache=True, parallel=True, error_model="numpy")
def _intersect_kernel(bmin, bmax, left_first, count, tri_order, p0, e1, e2,
                      origins, dirs, t_min, t_max,
                      out_t, out_tri, out_u, out_v):
    n_rays = origins.shape[0]
    for r in prange(n_rays):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        ix = 1.0 / dx
        iy = 1.0 / dy
        iz = 1.0 / dz
        best_t = t_max[r]
        best_tri = -1
        best_u = 0.0
        best_v = 0.0
        stack = np.empty(_STACK_DEPTH, dtype=np.int64)
        sp = 0
        stack[0] = 0
        sp = 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if not _hit_aabb(bmin[node], bmax[node], ox, oy, oz, ix, iy, iz, best_t):
                continue
            c = count[node]
            if c == 0:
                stack[sp] = left_first[node]
                stack[sp + 1] = left_first[node] + 1
                sp += 2
            else:
                first = left_first[node]
                for k in range(first, first + c):
                    tri = tri_order[k]
                    # Moller-Trumbore with consistent inclusive edge handling
                    e1x, e1y, e1z = e1[tri, 0], e1[tri, 1], e1[tri, 2]
                    e2x, e2y, e2z = e2[tri, 0], e2[tri, 1], e2[tri, 2]
                    hx = dy * e2z - dz * e2y
                    hy = dz * e2x - dx * e2z
                    hz = dx * e2y - dy * e2x
                    a = e1x * hx + e1y * hy + e1z * hz
                    if a == 0.0:
                        continue
                    f = 1.0 / a
                    sx = ox - p0[tri, 0]
                    sy = oy - p0[tri, 1]
                    sz = oz - p0[tri, 2]
                    u = f * (sx * hx + sy * hy + sz * hz)
                    if u < 0.0 or u > 1.0:
                        continue
                    qx = sy * e1z - sz * e1y
                    qy = sz * e1x - sx * e1z
                    qz = sx * e1y - sy * e1x
                    v = f * (dx * qx + dy * qy + dz * qz)
                    if v < 0.0 or u + v > 1.0:
                        continue
                    t = f * (e2x * qx + e2y * qy + e2z * qz)
                    if t > t_min[r] and t < best_t:
                        best_t = t
                        best_tri = tri
                        best_u = u
                        best_v = v
        out_t[r] = best_t
        out_tri[r] = best_tri
        out_u[r] = best_u
        out_v[r] = best_v


@njit(cache=True, parallel=True, error_model="numpy")
def _occluded_kernel(bmin, bmax, left_first, count, tri_order, p0, e1, e2,
                     origins, dirs, t_min, t_max, out_hit):
    n_rays = origins.shape[0]
    for r in prange(n_rays):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        ix = 1.0 / dx
        iy = 1.0 / dy
        iz = 1.0 / dz
        limit = t_max[r]
        hit = False
        stack = np.empty(_STACK_DEPTH, dtype=np.int64)
        stack[0] = 0
        sp = 1
        while sp > 0 and not hit:
            sp -= 1
            node = stack[sp]
            if not _hit_aabb(bmin[node], bmax[node], ox, oy, oz, ix, iy, iz, limit):
                continue
            c = count[node]
            if c == 0:
                stack[sp] = left_first[node]
                stack[sp + 1] = left_first[node] + 1
                sp += 2
            else:
                first = left_first[node]
                for k in range(first, first + c):
                    tri = tri_order[k]
                    e1x, e1y, e1z = e1[tri, 0], e1[tri, 1], e1[tri, 2]
                    e2x, e2y, e2z = e2[tri, 0], e2[tri, 1], e2[tri, 2]
                    hx = dy * e2z - dz * e2y
                    hy = dz * e2x - dx * e2z
                    hz = dx * e2y - dy * e2x
                    a = e1x * hx + e1y * hy + e1z * hz
                    if a == 0.0:
                        continue
                    f = 1.0 / a
                    sx = ox - p0[tri, 0]
                    sy = oy - p0[tri, 1]
                    sz = oz - p0[tri, 2]
                    u = f * (sx * hx + sy * hy + sz * hz)
                    if u < 0.0 or u > 1.0:
                        continue
                    qx = sy * e1z - sz * e1y
                    qy = sz * e1x - sx * e1z
                    qz = sx * e1y - sy * e1x
                    v = f * (dx * qx + dy * qy + dz * qz)
                    if v < 0.0 or u + v > 1.0:
                        continue
                    t = f * (e2x * qx + e2y * qy + e2z * qz)
                    if t > t_min[r] and t < limit:
                        hit = True
                        break
        out_hit[r] = hit


def intersect_batch(bvh: Bvh, derived: MeshDerived, origins, dirs,
                    t_min=None, t_max=None):
    """Nearest-hit query for a batch of rays.

    Returns (t, tri, u, v); ``tri`` is -1 on miss. Barycentrics (u, v) weight
    vertices 1 and 2.
    """
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    n = len(origins)
    t_min = np.zeros(n) if t_min is None else np.ascontiguousarray(t_min, dtype=np.float64)
    t_max = np.full(n, np.inf) if t_max is None else np.ascontiguousarray(t_max, dtype=np.float64)
    out_t = np.empty(n)
    out_tri = np.empty(n, dtype=np.int64)
    out_u = np.empty(n)
    out_v = np.empty(n)
    _intersect_kernel(bvh.bounds_min, bvh.bounds_max, bvh.left_first, bvh.count,
                      bvh.tri_order, derived.p0, derived.e1, derived.e2,
                      origins, dirs, t_min, t_max, out_t, out_tri, out_u, out_v)
    return out_t, out_tri, out_u, out_v


def occluded_batch(bvh: Bvh, derived: MeshDerived, origins, dirs, t_max):
    """Any-hit query; True where the segment (0, t_max) is blocked."""
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    n = len(origins)
    t_min = np.zeros(n)
    t_max = np.ascontiguousarray(t_max, dtype=np.float64)
    out = np.empty(n, dtype=np.bool_)
    _occluded_kernel(bvh.bounds_min, bvh.bounds_max, bvh.left_first, bvh.count,
                     bvh.tri_order, derived.p0, derived.e1, derived.e2,
                     origins, dirs, t_min, t_max, out)
    return out


def intersect(bvh: Bvh, mesh, ray, derived: MeshDerived | None = None):
    """Single-ray nearest hit; returns a :class:`SurfaceHit` or None."""
    derived = derived or MeshDerived(mesh)
    t, tri, u, v = intersect_batch(bvh, derived, ray.origin[None],
                                   ray.direction[None],
                                   np.array([ray.t_min]), np.array([ray.t_max]))
    if tri[0] < 0:
        return None
    ti = int(tri[0])
    w = 1.0 - u[0] - v[0]
    face = mesh.faces[ti]
    normal = (w * mesh.normals[face[0]] + u[0] * mesh.normals[face[1]]
              + v[0] * mesh.normals[face[2]])
    normal /= np.linalg.norm(normal)
    uv = (w * mesh.uvs[face[0]] + u[0] * mesh.uvs[face[1]]
          + v[0] * mesh.uvs[face[2]])
    point = ray.origin + t[0] * ray.direction
    return SurfaceHit(point=point, geometric_normal=derived.face_normal[ti],
                      shading_normal=normal, uv=uv, triangle=ti, t=float(t[0]))


def brute_force_intersect(derived: MeshDerived, origins, dirs,
                          t_min=None, t_max=None):
    """All-triangle nearest-hit test in numpy; the oracle for BVH equivalence."""
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n = len(origins)
    t_min = np.zeros(n) if t_min is None else np.asarray(t_min, dtype=np.float64)
    t_max = np.full(n, np.inf) if t_max is None else np.asarray(t_max, dtype=np.float64)

    p0, e1, e2 = derived.p0, derived.e1, derived.e2
    best_t = t_max.copy()
    best_tri = np.full(n, -1, dtype=np.int64)
    best_u = np.zeros(n)
    best_v = np.zeros(n)
    for tri in range(len(p0)):
        h = np.cross(dirs, e2[tri])
        a = h @ e1[tri]
        with np.errstate(divide="ignore", invalid="ignore"):
            f = 1.0 / a
            s = origins - p0[tri]
            u = f * (s * h).sum(axis=1)
            q = np.cross(s, e1[tri])
            v = f * (dirs * q).sum(axis=1)
            t = f * (q @ e2[tri])
        ok = ((a != 0.0) & (u >= 0.0) & (u <= 1.0) & (v >= 0.0) & (u + v <= 1.0)
              & (t > t_min) & (t < best_t))
        best_t = np.where(ok, t, best_t)
        best_tri = np.where(ok, tri, best_tri)
        best_u = np.where(ok, u, best_u)
        best_v = np.where(ok, v, best_v)
    return best_t, best_tri, best_u, best_v
