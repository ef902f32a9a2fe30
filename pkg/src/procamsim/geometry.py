"""Projective geometry, rays, tangent frames and normal mapping.

Conventions: the world origin is at the camera optical center with identity
base pose; a device maps a world point x to pixel coordinates by perspective
division of K (r x + t). Continuous pixel coordinates place the center of
pixel (i, j) at (i + 0.5, j + 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import BehindDeviceError, SingularMatrixError


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray      # unit
    t_min: float = 0.0
    t_max: float = np.inf


@dataclass
class SurfaceHit:
    point: np.ndarray
    geometric_normal: np.ndarray
    shading_normal: np.ndarray
    uv: np.ndarray
    triangle: int
    t: float


def project_points(x: np.ndarray, K: np.ndarray, R=None, t=None):
    """Project world points (N, 3) to pixel coordinates (N, 2).

    Returns (pixels, depth); callers decide how to treat non-positive depth.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if R is not None:
        x = x @ np.asarray(R).T
    if t is not None:
        x = x + np.asarray(t)
    depth = x[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        pix = (x @ np.asarray(K).T)
        pix = pix[:, :2] / depth[:, None]
    return pix, depth


def project(x, K, R=None, t=None) -> np.ndarray:
    """Single-point projection; raises if the point is behind the device."""
    pix, depth = project_points(np.asarray(x, dtype=np.float64)[None], K, R, t)
    if depth[0] <= 0:
        raise BehindDeviceError(f"point {x} has depth {depth[0]:.6g} <= 0")
    return pix[0]


def unproject(pixel, K) -> np.ndarray:
    """Unit ray direction (device frame) through a pixel coordinate."""
    K = np.asarray(K, dtype=np.float64)
    if abs(np.linalg.det(K)) < 1e-12:
        raise SingularMatrixError("intrinsic matrix is singular")
    d = np.linalg.solve(K, np.array([pixel[0], pixel[1], 1.0]))
    return d / np.linalg.norm(d)


def unproject_grid(pixels: np.ndarray, K: np.ndarray) -> np.ndarray:
    """Vectorized unproject: (N, 2) pixels -> (N, 3) unit directions."""
    K = np.asarray(K, dtype=np.float64)
    if abs(np.linalg.det(K)) < 1e-12:
        raise SingularMatrixError("intrinsic matrix is singular")
    ones = np.ones((len(pixels), 1))
    h = np.concatenate([pixels, ones], axis=1)
    d = np.linalg.solve(K, h.T).T
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def rodrigues(axis_angle: torch.Tensor) -> torch.Tensor:
    """Axis-angle 3-vector -> rotation matrix, differentiable (torch).

    Uses the sinc formulation R = I + (sin t / t) K + ((1 - cos t) / t^2) K^2
    with K built from the unnormalized vector, so gradients stay finite at
    the identity (t = 0).
    """
    theta2 = (axis_angle * axis_angle).sum()
    theta = torch.sqrt(theta2 + 1e-24)
    kx, ky, kz = axis_angle[0], axis_angle[1], axis_angle[2]
    zero = torch.zeros((), dtype=axis_angle.dtype)
    K = torch.stack([torch.stack([zero, -kz, ky]),
                     torch.stack([kz, zero, -kx]),
                     torch.stack([-ky, kx, zero])])
    a = torch.sin(theta) / theta
    b = (1.0 - torch.cos(theta)) / (theta2 + 1e-24)
    return torch.eye(3, dtype=axis_angle.dtype) + a * K + b * (K @ K)


# ---------------------------------------------------------------------------
# Per-mesh derived data

class MeshDerived:
    """Precomputed per-triangle data shared by the renderer (immutable)."""

    def __init__(self, mesh):
        self.mesh = mesh
        v = mesh.vertices[mesh.faces]                      # (M, 3, 3)
        self.p0 = np.ascontiguousarray(v[:, 0])
        self.e1 = np.ascontiguousarray(v[:, 1] - v[:, 0])
        self.e2 = np.ascontiguousarray(v[:, 2] - v[:, 0])
        gn = np.cross(self.e1, self.e2)
        self.face_normal = gn / np.maximum(np.linalg.norm(gn, axis=1, keepdims=True), 1e-30)
        self.tangent, self.bitangent = _tangent_frames(mesh, self.face_normal)
        self.scale = mesh.scale


def _tangent_frames(mesh, face_normal):
    """Per-triangle tangent/bitangent from UV derivatives.

    Degenerate UV parameterizations fall back to an arbitrary orthonormal
    frame around the face normal.
    """
    v = mesh.vertices[mesh.faces]
    uv = mesh.uvs[mesh.faces]
    e1 = v[:, 1] - v[:, 0]
    e2 = v[:, 2] - v[:, 0]
    du1 = uv[:, 1, 0] - uv[:, 0, 0]
    dv1 = uv[:, 1, 1] - uv[:, 0, 1]
    du2 = uv[:, 2, 0] - uv[:, 0, 0]
    dv2 = uv[:, 2, 1] - uv[:, 0, 1]
    det = du1 * dv2 - du2 * dv1
    ok = np.abs(det) > 1e-12
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tangent = (dv2[:, None] * e1 - dv1[:, None] * e2) * inv[:, None]

    # fallback frame where UVs are degenerate
    fallback = _any_orthogonal(face_normal)
    tn = np.linalg.norm(tangent, axis=1, keepdims=True)
    use_fb = (~ok) | (tn[:, 0] < 1e-12)
    tangent = np.where(use_fb[:, None], fallback, tangent / np.maximum(tn, 1e-30))
    # orthogonalize against the face normal
    tangent = tangent - face_normal * np.sum(tangent * face_normal, axis=1, keepdims=True)
    tangent /= np.maximum(np.linalg.norm(tangent, axis=1, keepdims=True), 1e-30)
    bitangent = np.cross(face_normal, tangent)
    return tangent, bitangent


def _any_orthogonal(n):
    a = np.where(np.abs(n[:, 0:1]) < 0.9,
                 np.tile(np.array([1.0, 0.0, 0.0]), (len(n), 1)),
                 np.tile(np.array([0.0, 1.0, 0.0]), (len(n), 1)))
    t = np.cross(a, n)
    return t / np.maximum(np.linalg.norm(t, axis=1, keepdims=True), 1e-30)


def decode_normal_texel(texel: torch.Tensor) -> torch.Tensor:
    """Decode an encoded normal-map texel (..., 3) in [0,1] to tangent space.

    Texel (0.5, 0.5, 1) decodes to (0, 0, 1): no perturbation.
    """
    return texel * 2.0 - 1.0


def shading_normal(interp_normal: torch.Tensor, tangent: torch.Tensor,
                   bitangent: torch.Tensor, texel: torch.Tensor,
                   geometric_normal: torch.Tensor) -> torch.Tensor:
    """Perturb the interpolated normal by a decoded tangent-space vector.

    The result is renormalized and flipped into the hemisphere of the
    geometric normal; a decoded (0, 0, 1) leaves the interpolated normal
    unchanged. All inputs (N, 3), torch, differentiable w.r.t. ``texel``.
    """
    d = decode_normal_texel(texel)
    n = d[:, 0:1] * tangent + d[:, 1:2] * bitangent + d[:, 2:3] * interp_normal
    norm = torch.linalg.norm(n, dim=1, keepdim=True)
    degenerate = norm < 1e-6
    n = torch.where(degenerate, interp_normal, n / norm.clamp_min(1e-12))
    flip = (n * geometric_normal).sum(dim=1, keepdim=True) < 0
    return torch.where(flip, -n, n)
