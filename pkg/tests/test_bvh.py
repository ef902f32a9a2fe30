import numpy as np

from procamsim.bvh import (brute_force_intersect, build_bvh, intersect_batch,
                           occluded_batch)
from procamsim.geometry import MeshDerived
from procamsim.scene import TriangleMesh


def _random_mesh(n_tris, seed=0):
    rng = np.random.default_rng(seed)
    verts = rng.uniform(-1, 1, (n_tris * 3, 3))
    faces = np.arange(n_tris * 3).reshape(n_tris, 3)
    normals = np.tile([0.0, 0.0, 1.0], (n_tris * 3, 1))
    uvs = rng.random((n_tris * 3, 2))
    return TriangleMesh(vertices=verts, faces=faces, normals=normals, uvs=uvs)


def _single_triangle():
    mesh = TriangleMesh(
        vertices=np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]),
        faces=np.array([[0, 1, 2]]),
        normals=np.tile([0.0, 0, 1], (3, 1)),
        uvs=np.array([[0.0, 0], [1, 0], [0, 1]]))
    return mesh


def test_centroid_hit_barycentrics():
    derived = MeshDerived(_single_triangle())
    bvh = build_bvh(derived)
    centroid = derived.p0[0] + (derived.e1[0] + derived.e2[0]) / 3.0
    o = centroid + np.array([0.0, 0.0, 2.0])
    d = np.array([[0.0, 0.0, -1.0]])
    t, tri, u, v = intersect_batch(bvh, derived, o[None], d)
    assert tri[0] == 0
    assert abs(t[0] - 2.0) < 1e-9
    assert abs(u[0] - 1.0 / 3.0) < 1e-9 and abs(v[0] - 1.0 / 3.0) < 1e-9


def test_parallel_ray_misses():
    derived = MeshDerived(_single_triangle())
    bvh = build_bvh(derived)
    o = np.array([[0.25, 0.25, 1.0]])
    d = np.array([[1.0, 0.0, 0.0]])     # parallel to the z=0 plane
    t, tri, u, v = intersect_batch(bvh, derived, o, d)
    assert tri[0] == -1


def test_bvh_matches_brute_force_on_10k_rays():
    mesh = _random_mesh(500, seed=1)
    derived = MeshDerived(mesh)
    bvh = build_bvh(derived)
    rng = np.random.default_rng(2)
    o = rng.uniform(-2, 2, (10000, 3))
    d = rng.standard_normal((10000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)

    t_b, tri_b, u_b, v_b = intersect_batch(bvh, derived, o, d)
    t_r, tri_r, u_r, v_r = brute_force_intersect(derived, o, d)
    assert np.array_equal(tri_b, tri_r)
    hit = tri_b >= 0
    assert hit.sum() > 100          # the ray set actually exercises hits
    assert np.abs(t_b[hit] - t_r[hit]).max() < 1e-6


def test_occlusion_consistent_with_intersection():
    mesh = _random_mesh(200, seed=3)
    derived = MeshDerived(mesh)
    bvh = build_bvh(derived)
    rng = np.random.default_rng(4)
    o = rng.uniform(-2, 2, (2000, 3))
    d = rng.standard_normal((2000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    t, tri, _, _ = intersect_batch(bvh, derived, o, d)
    t_max = np.full(len(o), 3.0)
    occ = occluded_batch(bvh, derived, o, d, t_max)
    expected = (tri >= 0) & (t < 3.0)
    assert np.array_equal(occ, expected)


def test_bvh_structure_references_every_triangle_once():
    mesh = _random_mesh(137, seed=5)
    bvh = build_bvh(MeshDerived(mesh))
    assert np.array_equal(np.sort(bvh.tri_order), np.arange(137))


def test_nearest_hit_among_stacked_triangles():
    # two parallel triangles; the nearer one must win
    verts = np.array([[0.0, 0, 1], [1, 0, 1], [0, 1, 1],
                      [0.0, 0, 2], [1, 0, 2], [0, 1, 2]])
    mesh = TriangleMesh(vertices=verts,
                        faces=np.array([[3, 4, 5], [0, 1, 2]]),
                        normals=np.tile([0.0, 0, -1], (6, 1)),
                        uvs=np.tile([[0.0, 0], [1, 0], [0, 1]], (2, 1)))
    derived = MeshDerived(mesh)
    bvh = build_bvh(derived)
    t, tri, _, _ = intersect_batch(bvh, derived,
                                   np.array([[0.2, 0.2, 0.0]]),
                                   np.array([[0.0, 0.0, 1.0]]))
    assert tri[0] == 1 and abs(t[0] - 1.0) < 1e-9
