"""Shared test fixtures: small hand-built scenes and analytic oracles."""

from __future__ import annotations

import numpy as np
import pytest
import torch

from procamsim.fixtures import (FixtureSpec, _fit_intrinsics,
                                _look_at_rotation, make_scene)
from procamsim.scene import (CameraModel, MaterialMaps, ProjectorModel, Scene,
                             SceneParams, TriangleMesh)

torch.set_num_threads(2)


def quad_mesh(corners, normal, uvs=None) -> TriangleMesh:
    """Two-triangle quad wound so the geometric normal matches ``normal``."""
    c = np.asarray(corners, dtype=np.float64)
    faces = np.array([[0, 2, 1], [0, 3, 2]])
    gn = np.cross(c[2] - c[0], c[1] - c[0])
    if np.dot(gn, normal) < 0:
        faces = faces[:, ::-1]
    if uvs is None:
        uvs = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    return TriangleMesh(vertices=c, faces=faces,
                        normals=np.tile(np.asarray(normal, float), (4, 1)),
                        uvs=np.asarray(uvs, dtype=np.float64))


def unit_plane_scene(cam_res=(64, 48), proj_res=(32, 24), tex_res=8,
                     albedo=1.0, gamma_p=2.0, gamma_c=1.0, w=(1.0, 1.0, 1.0),
                     k=1.0, lambertian=True, roughness=0.8, metallic=0.0,
                     proj_center=(0.15, 0.0, 0.0), extra_bounds=None,
                     cam_f_scale=1.1) -> Scene:
    """Fronto-parallel plane at z=1, camera at the origin, projector offset.

    The analytic direct-lighting formula (see :func:`direct_oracle`) holds
    exactly for this scene when ``lambertian`` is set.
    """
    corners = np.array([[-0.5, -0.5, 1.0], [0.5, -0.5, 1.0],
                        [0.5, 0.5, 1.0], [-0.5, 0.5, 1.0]])
    mesh = quad_mesh(corners, [0.0, 0.0, -1.0])

    wc, hc = cam_res
    f = cam_f_scale * wc
    K_c = np.array([[f, 0.0, wc / 2.0], [0.0, f, hc / 2.0], [0.0, 0.0, 1.0]])
    camera = CameraModel(K=K_c, resolution=cam_res, exposure=1.0,
                         gamma=np.full(3, gamma_c),
                         white_balance=np.asarray(w, dtype=np.float64))

    center = np.asarray(proj_center, dtype=np.float64)
    R_p = _look_at_rotation(center, np.array([0.0, 0.0, 1.0]))
    K_p = _fit_intrinsics(corners, R_p, center, proj_res, margin=0.9)
    projector = ProjectorModel(K=K_p, R=R_p, t=-R_p @ center,
                               resolution=proj_res,
                               gamma=np.full(3, gamma_p), intensity_scale=k)

    r = tex_res
    mats = MaterialMaps(
        base_color=np.full((r, r, 3), albedo, np.float32),
        roughness=np.full((r, r), roughness, np.float32),
        metallic=np.full((r, r), metallic, np.float32),
        normal_map=np.tile(np.array([0.5, 0.5, 1.0], np.float32), (r, r, 1)),
        lambertian=lambertian)
    bounds = {"gamma_c": (0.2, 1.2)}
    bounds.update(extra_bounds or {})
    params = SceneParams(mats, gamma_p=projector.gamma, gamma_c=camera.gamma,
                         white_balance=camera.white_balance, bounds=bounds)
    scene = Scene(projector=projector, camera=camera, mesh=mesh, params=params)
    scene.validate()
    return scene


def direct_oracle(scene: Scene, I_p: np.ndarray,
                  ss: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form direct lighting for a Lambertian plane at z=1.

    Evaluates albedo/pi * cos_s * cos_p * k * I_p(x_p)^gamma_p / d^2 at
    ``ss`` x ``ss`` subsamples per camera pixel, averages the irradiance over
    the pixel area (as the camera does) and applies the camera response.
    Returns (image, hit mask at pixel centers). Independent of the renderer
    internals.
    """
    wc, hc = scene.camera.resolution
    K_c = scene.camera.K
    vals = scene.params.values()
    ys, xs = np.mgrid[0:hc, 0:wc]

    def irradiance(off_x, off_y):
        pix = np.stack([xs.reshape(-1) + off_x, ys.reshape(-1) + off_y], axis=1)
        d = np.linalg.solve(K_c, np.concatenate(
            [pix, np.ones((len(pix), 1))], axis=1).T).T
        x = d / d[:, 2:3]                   # hit points on the z=1 plane
        on_plane = (np.abs(x[:, 0]) <= 0.5) & (np.abs(x[:, 1]) <= 0.5)

        p = scene.projector
        v = p.center[None, :] - x
        d2 = (v * v).sum(1)
        dist = np.sqrt(d2)
        cos_s = -v[:, 2] / dist             # n = (0,0,-1)
        cos_p = (-(v / dist[:, None]) @ p.axis)

        xp = (x @ p.R.T + p.t) @ p.K.T
        xp = xp[:, :2] / xp[:, 2:3]
        wp, hp = p.resolution
        inside = (xp[:, 0] >= 0) & (xp[:, 0] < wp) & \
            (xp[:, 1] >= 0) & (xp[:, 1] < hp)

        img_p = np.asarray(I_p, dtype=np.float64)
        tx = np.clip(xp[:, 0] - 0.5, 0, wp - 1)
        ty = np.clip(xp[:, 1] - 0.5, 0, hp - 1)
        x0 = np.floor(tx).astype(int)
        y0 = np.floor(ty).astype(int)
        x1 = np.minimum(x0 + 1, wp - 1)
        y1 = np.minimum(y0 + 1, hp - 1)
        fx = (tx - x0)[:, None]
        fy = (ty - y0)[:, None]
        I = (img_p[y0, x0] * (1 - fx) * (1 - fy) + img_p[y0, x1] * fx * (1 - fy)
             + img_p[y1, x0] * (1 - fx) * fy + img_p[y1, x1] * fx * fy)

        albedo = vals["base_color"].reshape(-1, 3).mean(axis=0)
        emitted = scene.projector.intensity_scale * I ** vals["gamma_p"][None, :]
        E = albedo[None, :] / np.pi * (cos_s * cos_p / d2)[:, None] * emitted
        return np.where((on_plane & inside)[:, None], E, 0.0), on_plane

    offsets = (np.arange(ss) + 0.5) / ss
    E = 0.0
    for oy in offsets:
        for ox in offsets:
            E_s, _ = irradiance(ox, oy)
            E = E + E_s
    E = E / ss ** 2
    _, on_plane = irradiance(0.5, 0.5)
    img = np.clip((scene.camera.exposure * vals["white_balance"][None, :] * E)
                  ** vals["gamma_c"][None, :], 0.0, 1.0)
    return img.reshape(hc, wc, 3), on_plane.reshape(hc, wc)


@pytest.fixture(scope="session")
def plane_scene() -> Scene:
    return unit_plane_scene()


@pytest.fixture(scope="session")
def principled_scene() -> Scene:
    return unit_plane_scene(cam_res=(32, 32), proj_res=(24, 24), albedo=0.6,
                            lambertian=False, roughness=0.5, metallic=0.1,
                            gamma_c=0.5)


@pytest.fixture(scope="session")
def tiny_fixture_spec() -> FixtureSpec:
    return FixtureSpec(name="flat-plane", K=2, test_size=2,
                       projector_resolution=(64, 48),
                       camera_resolution=(80, 60), texture_resolution=16,
                       gt_spp=16)


@pytest.fixture(scope="session")
def tiny_scene(tiny_fixture_spec) -> Scene:
    return make_scene(tiny_fixture_spec)
