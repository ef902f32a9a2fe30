import numpy as np
import pytest
import torch

from procamsim.errors import BehindDeviceError, SingularMatrixError
from procamsim.geometry import (MeshDerived, decode_normal_texel, project,
                                rodrigues, shading_normal, unproject,
                                unproject_grid)
from procamsim.scene import TriangleMesh

K = np.array([[500.0, 0.0, 320.0], [0.0, 500.0, 180.0], [0.0, 0.0, 1.0]])


def test_project_optical_axis():
    assert np.allclose(project([0.0, 0.0, 1.0], K), [320.0, 180.0])


def test_project_offset_point():
    # hand matrix-multiply: (500*1 + 320*1) / 1 = 820
    assert np.allclose(project([1.0, 0.0, 1.0], K), [820.0, 180.0])


def test_project_behind_device():
    with pytest.raises(BehindDeviceError):
        project([0.0, 0.0, -1.0], K)


def test_unproject_principal_point():
    assert np.allclose(unproject([320.0, 180.0], K), [0.0, 0.0, 1.0])


def test_unproject_singular_K():
    bad = K.copy()
    bad[0, 0] = 0.0
    with pytest.raises(SingularMatrixError):
        unproject([1.0, 1.0], bad)
    with pytest.raises(SingularMatrixError):
        unproject_grid(np.zeros((2, 2)), bad)


def test_project_unproject_roundtrip_100_random_pixels():
    rng = np.random.default_rng(0)
    pix = rng.uniform([0, 0], [640, 360], (100, 2))
    err = 0.0
    for p in pix:
        d = unproject(p, K)
        back = project(d * rng.uniform(0.5, 10.0), K)
        err = max(err, np.abs(back - p).max())
    assert err < 1e-6


def test_rodrigues_identity_and_orthonormality():
    R0 = rodrigues(torch.zeros(3, dtype=torch.float64))
    assert torch.allclose(R0, torch.eye(3, dtype=torch.float64), atol=1e-10)
    rng = np.random.default_rng(1)
    for _ in range(5):
        aa = torch.as_tensor(rng.standard_normal(3))
        R = rodrigues(aa)
        assert torch.abs(R @ R.T - torch.eye(3, dtype=R.dtype)).max() < 1e-12
        assert abs(float(torch.linalg.det(R)) - 1.0) < 1e-12


def test_rodrigues_known_rotation():
    # 90 degrees about +z maps +x to +y
    R = rodrigues(torch.tensor([0.0, 0.0, np.pi / 2], dtype=torch.float64))
    assert torch.allclose(R @ torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64),
                          torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64),
                          atol=1e-12)


def test_rodrigues_gradient_finite_at_identity():
    aa = torch.zeros(3, dtype=torch.float64, requires_grad=True)
    rodrigues(aa).sum().backward()
    assert torch.isfinite(aa.grad).all()


def test_decode_normal_neutral_texel():
    t = torch.tensor([[0.5, 0.5, 1.0]])
    assert torch.allclose(decode_normal_texel(t), torch.tensor([[0.0, 0.0, 1.0]]))


def _frame():
    n = torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64)
    t = torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64)
    b = torch.tensor([[0.0, 1.0, 0.0]], dtype=torch.float64)
    return n, t, b


def test_shading_normal_neutral_is_identity():
    n, t, b = _frame()
    texel = torch.tensor([[0.5, 0.5, 1.0]], dtype=torch.float64)
    out = shading_normal(n, t, b, texel, n)
    assert torch.allclose(out, n, atol=1e-12)


def test_shading_normal_tilts_toward_tangent():
    # decoded (1, 0, 0) on a flat +z plane with tangent +x
    n, t, b = _frame()
    texel = torch.tensor([[1.0, 0.5, 1.0]], dtype=torch.float64)
    out = shading_normal(n, t, b, texel, n)
    expected = torch.tensor([[1.0, 0.0, 1.0]], dtype=torch.float64)
    expected = expected / torch.linalg.norm(expected)
    assert torch.allclose(out, expected, atol=1e-12)


def test_shading_normal_hemisphere_guard():
    n, t, b = _frame()
    # decoded (0, 0, -1): points into the surface, must be flipped back
    texel = torch.tensor([[0.5, 0.5, 0.0]], dtype=torch.float64)
    out = shading_normal(n, t, b, texel, n)
    assert float((out * n).sum()) > 0


def test_tangent_frames_follow_uv_derivatives():
    mesh = TriangleMesh(
        vertices=np.array([[0.0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]]),
        faces=np.array([[0, 1, 2], [0, 2, 3]]),
        normals=np.tile([0.0, 0, 1], (4, 1)),
        uvs=np.array([[0.0, 0], [1, 0], [1, 1], [0, 1]]))
    d = MeshDerived(mesh)
    # u increases along +x, so the tangent is +x on both triangles
    assert np.abs(d.tangent - np.array([1.0, 0, 0])).max() < 1e-9
    assert np.abs(np.linalg.norm(d.bitangent, axis=1) - 1.0).max() < 1e-9


def test_tangent_frames_degenerate_uv_fallback():
    mesh = TriangleMesh(
        vertices=np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]),
        faces=np.array([[0, 1, 2]]),
        normals=np.tile([0.0, 0, 1], (3, 1)),
        uvs=np.zeros((3, 2)))      # degenerate UVs
    d = MeshDerived(mesh)
    t = d.tangent[0]
    assert abs(np.linalg.norm(t) - 1.0) < 1e-9
    assert abs(t @ d.face_normal[0]) < 1e-9
