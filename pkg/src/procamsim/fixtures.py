"""Synthetic fixtures: deterministic scenes with known ground-truth
parameters plus rendered training/test pairs.

Three named fixtures:

- ``flat-plane``: a tilted diffuse plane; the workhorse for radiometric
  oracles, compensation round trips and structured-light runs.
- ``two-plane-corner``: a fronto-parallel plane A and a perpendicular side
  plane B that the projector frustum misses, so B is lit purely by
  interreflection from A; optionally with a near-specular patch on A.
- ``textured-relief``: a bumpy heightfield with spatially varying
  roughness/metallic maps for qualitative demos.

Everything (geometry, textures, input images, render seeds) derives from the
fixture seed, so re-running with the same spec is bitwise reproducible.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import torch

from . import imgio
from .errors import ValidationError
from .render import RenderSettings, render
from .scene import (CameraModel, MaterialMaps, ProjectorModel, Scene,
                    SceneParams, TriangleMesh, save_scene)

FIXTURE_NAMES = ("flat-plane", "two-plane-corner", "textured-relief")

GT_GAMMA_P = 2.2
GT_GAMMA_C = 0.4545
GT_WHITE_BALANCE = (0.9, 1.0, 1.15)


@dataclass
class FixtureSpec:
    name: str = "flat-plane"
    K: int = 15                     # training pairs
    test_size: int = 20
    seed: int = 0
    projector_resolution: tuple[int, int] = (800, 600)
    camera_resolution: tuple[int, int] = (640, 360)
    texture_resolution: int = 64
    gt_spp: int = 256
    max_depth: int = 4
    tile_size: int = 16384
    specular_patch: bool = True     # two-plane-corner only
    lambertian: bool | None = None  # None: per-fixture default

    def __post_init__(self):
        if self.name not in FIXTURE_NAMES:
            raise ValidationError(f"unknown fixture '{self.name}'; "
                                  f"choose from {FIXTURE_NAMES}")
        if self.K < 1 or self.test_size < 0:
            raise ValidationError("K must be >= 1 and test_size >= 0")


@dataclass
class Fixture:
    spec: FixtureSpec
    scene: Scene
    train_inputs: list[np.ndarray]
    train_targets: list[np.ndarray]
    test_inputs: list[np.ndarray]
    test_targets: list[np.ndarray]
    gt_values: dict = field(default_factory=dict)

    def indirect_mask(self) -> np.ndarray:
        """Camera pixels that see the side plane (two-plane-corner only)."""
        from .render import render_aux

        aux = render_aux(self.scene)
        return aux.mask & (aux.normal[:, :, 0] < -0.7)


def _look_at_rotation(center: np.ndarray, target: np.ndarray) -> np.ndarray:
    """World->device rotation for a device at ``center`` looking at ``target``."""
    z = target - center
    z = z / np.linalg.norm(z)
    up = np.array([0.0, 1.0, 0.0])
    x = np.cross(up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z])


def _fit_intrinsics(points: np.ndarray, R: np.ndarray, center: np.ndarray,
                    resolution: tuple[int, int], margin: float = 0.98):
    """Focal length putting the given world points just inside the frame."""
    w, h = resolution
    local = (points - center) @ R.T
    nx = np.abs(local[:, 0] / local[:, 2]).max()
    ny = np.abs(local[:, 1] / local[:, 2]).max()
    # anamorphic fit: each axis is tight so the footprint does not spill
    # sideways past the given points
    fx = (w / 2.0) * margin / nx
    fy = (h / 2.0) * margin / ny
    K = np.array([[fx, 0.0, w / 2.0], [0.0, fy, h / 2.0], [0.0, 0.0, 1.0]])
    return K


def _quad(corners, normal, uv_rect):
    """Two triangles for a quad; corners counter-clockwise as seen from the
    normal side, uv_rect = (u0, v0, u1, v1)."""
    c = np.asarray(corners, dtype=np.float64)
    n = np.tile(np.asarray(normal, dtype=np.float64), (4, 1))
    u0, v0, u1, v1 = uv_rect
    uv = np.array([[u0, v0], [u1, v0], [u1, v1], [u0, v1]])
    faces = np.array([[0, 2, 1], [0, 3, 2]])
    # enforce agreement between winding and the requested normal
    gn = np.cross(c[2] - c[0], c[1] - c[0])
    if np.dot(gn, normal) < 0:
        faces = faces[:, ::-1]
    return c, faces, n, uv


def _merge(parts):
    verts, faces, normals, uvs = [], [], [], []
    offset = 0
    for v, f, n, uv in parts:
        verts.append(v)
        faces.append(f + offset)
        normals.append(n)
        uvs.append(uv)
        offset += len(v)
    return TriangleMesh(vertices=np.concatenate(verts),
                        faces=np.concatenate(faces),
                        normals=np.concatenate(normals),
                        uvs=np.concatenate(uvs))


def _smooth_texture(rng, res, lo, hi, cells=6, channels=3):
    """Low-frequency random texture via bilinear upsampling of a coarse grid."""
    coarse = rng.uniform(lo, hi, (cells, cells, channels)).astype(np.float32)
    t = torch.as_tensor(coarse).permute(2, 0, 1)[None]
    up = torch.nn.functional.interpolate(t, size=(res, res), mode="bilinear",
                                         align_corners=True)
    out = up[0].permute(1, 2, 0).numpy()
    return out if channels > 1 else out[:, :, 0]


def smooth_input_image(rng, resolution, cells=(6, 8)) -> np.ndarray:
    """A smooth random projector input image (H, W, 3) in [0, 1]."""
    w, h = resolution
    coarse = rng.uniform(0.05, 1.0, (cells[0], cells[1], 3)).astype(np.float32)
    t = torch.as_tensor(coarse).permute(2, 0, 1)[None]
    up = torch.nn.functional.interpolate(t, size=(h, w), mode="bilinear",
                                         align_corners=True)
    return up[0].permute(1, 2, 0).numpy()


def _default_camera(resolution) -> CameraModel:
    w, h = resolution
    f = 0.9 * w
    K = np.array([[f, 0.0, w / 2.0], [0.0, f, h / 2.0], [0.0, 0.0, 1.0]])
    return CameraModel(K=K, resolution=resolution, exposure=1.0,
                       gamma=np.full(3, GT_GAMMA_C),
                       white_balance=np.array(GT_WHITE_BALANCE))


def _intensity_scale(albedo: float, distance: float, cos_s: float,
                     cos_p: float, target_irradiance: float = 0.7) -> float:
    """k such that a white input slightly overexposes the brightest region."""
    return target_irradiance * np.pi * distance ** 2 / \
        (albedo * cos_s * cos_p)


def _flat_plane(spec: FixtureSpec):
    rng = np.random.default_rng([spec.seed, 101])
    # tilted plane around the y axis: z = 1 + 0.25 x
    xs = np.array([-0.55, 0.55])
    corners = np.array([[-0.55, -0.55, 1.0 - 0.25 * 0.55],
                        [0.55, -0.55, 1.0 + 0.25 * 0.55],
                        [0.55, 0.55, 1.0 + 0.25 * 0.55],
                        [-0.55, 0.55, 1.0 - 0.25 * 0.55]])
    normal = np.array([-0.25, 0.0, -1.0])
    normal /= np.linalg.norm(normal)
    mesh = _merge([_quad(corners, normal, (0, 0, 1, 1))])

    cam = _default_camera(spec.camera_resolution)
    center = np.array([-0.35, 0.0, 0.0])
    R_p = _look_at_rotation(center, np.array([0.0, 0.0, 1.0]))
    # tight frustum (long focal length) for low structured-light quantization
    inner = corners.mean(axis=0) + (corners - corners.mean(axis=0)) * 0.62
    K_p = _fit_intrinsics(inner, R_p, center, spec.projector_resolution)
    k = _intensity_scale(albedo=0.55, distance=1.05, cos_s=0.9, cos_p=0.95)
    proj = ProjectorModel(K=K_p, R=R_p, t=-R_p @ center,
                          resolution=spec.projector_resolution,
                          gamma=np.full(3, GT_GAMMA_P), intensity_scale=k)

    res = spec.texture_resolution
    mats = MaterialMaps(
        base_color=_smooth_texture(rng, res, 0.25, 0.75),
        roughness=np.full((res, res), 0.8, np.float32),
        metallic=np.zeros((res, res), np.float32),
        normal_map=np.tile(np.array([0.5, 0.5, 1.0], np.float32), (res, res, 1)),
        lambertian=True if spec.lambertian is None else spec.lambertian)
    return mesh, cam, proj, mats


def _two_plane_corner(spec: FixtureSpec):
    rng = np.random.default_rng([spec.seed, 202])
    # plane A: fronto-parallel, left/center; plane B: perpendicular side wall
    a_corners = np.array([[-0.62, -0.5, 1.25], [0.22, -0.5, 1.25],
                          [0.22, 0.5, 1.25], [-0.62, 0.5, 1.25]])
    b_corners = np.array([[0.25, -0.5, 1.25], [0.25, -0.5, 0.55],
                          [0.25, 0.5, 0.55], [0.25, 0.5, 1.25]])
    mesh = _merge([
        _quad(a_corners, [0.0, 0.0, -1.0], (0.0, 0.0, 0.5, 1.0)),
        _quad(b_corners, [-1.0, 0.0, 0.0], (0.5, 0.0, 1.0, 1.0)),
    ])

    cam = _default_camera(spec.camera_resolution)
    center = np.array([-0.4, 0.0, 0.0])
    R_p = _look_at_rotation(center, np.array([-0.2, 0.0, 1.25]))
    # frustum fitted to plane A only (margin < 1): the side plane B receives
    # no direct light and is illuminated purely by interreflection
    inset = a_corners.mean(axis=0) * 0.1 + a_corners * 0.9
    K_p = _fit_intrinsics(inset, R_p, center, spec.projector_resolution,
                          margin=0.995)
    k = _intensity_scale(albedo=0.55, distance=1.35, cos_s=0.9, cos_p=0.98)
    proj = ProjectorModel(K=K_p, R=R_p, t=-R_p @ center,
                          resolution=spec.projector_resolution,
                          gamma=np.full(3, GT_GAMMA_P), intensity_scale=k)

    res = spec.texture_resolution
    lambertian = (not spec.specular_patch) if spec.lambertian is None \
        else spec.lambertian
    base_color = _smooth_texture(rng, res, 0.35, 0.8)
    roughness = np.full((res, res), 0.7, np.float32)
    metallic = np.zeros((res, res), np.float32)
    if spec.specular_patch and not lambertian:
        # near-specular patch on plane A, placed so its mirror reflection of
        # the projector beam lands on the side plane B
        y0, y1 = int(res * 0.35), int(res * 0.6)
        x0, x1 = int(res * 0.36), int(res * 0.48)
        roughness[y0:y1, x0:x1] = 0.06
        metallic[y0:y1, x0:x1] = 0.9
        base_color[y0:y1, x0:x1] = (0.85, 0.83, 0.8)
    mats = MaterialMaps(
        base_color=base_color, roughness=roughness, metallic=metallic,
        normal_map=np.tile(np.array([0.5, 0.5, 1.0], np.float32), (res, res, 1)),
        lambertian=lambertian)
    return mesh, cam, proj, mats


def _textured_relief(spec: FixtureSpec):
    rng = np.random.default_rng([spec.seed, 303])
    n = 24
    u = np.linspace(0.0, 1.0, n)
    uu, vv = np.meshgrid(u, u)
    x = (uu - 0.5) * 1.1
    y = (vv - 0.5) * 1.1
    z = 1.0 + 0.08 * np.sin(2 * np.pi * 2 * uu) * np.cos(2 * np.pi * 1.5 * vv)
    verts = np.stack([x.reshape(-1), y.reshape(-1), z.reshape(-1)], axis=1)
    idx = np.arange(n * n).reshape(n, n)
    i00 = idx[:-1, :-1].reshape(-1)
    i01 = idx[:-1, 1:].reshape(-1)
    i10 = idx[1:, :-1].reshape(-1)
    i11 = idx[1:, 1:].reshape(-1)
    faces = np.concatenate([np.stack([i00, i11, i01], axis=1),
                            np.stack([i00, i10, i11], axis=1)], axis=0)
    # analytic heightfield normals, oriented toward the camera (-z side)
    dzdu = 0.08 * 2 * np.pi * 2 * np.cos(2 * np.pi * 2 * uu) * \
        np.cos(2 * np.pi * 1.5 * vv) / 1.1
    dzdv = -0.08 * 2 * np.pi * 1.5 * np.sin(2 * np.pi * 2 * uu) * \
        np.sin(2 * np.pi * 1.5 * vv) / 1.1
    normals = np.stack([dzdu.reshape(-1), dzdv.reshape(-1),
                        -np.ones(n * n)], axis=1)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    uvs = np.stack([uu.reshape(-1), 1.0 - vv.reshape(-1)], axis=1)
    mesh = TriangleMesh(vertices=verts, faces=faces, normals=normals, uvs=uvs)

    cam = _default_camera(spec.camera_resolution)
    center = np.array([-0.35, 0.1, 0.0])
    R_p = _look_at_rotation(center, np.array([0.0, 0.0, 1.0]))
    K_p = _fit_intrinsics(verts[:: max(len(verts) // 64, 1)], R_p, center,
                          spec.projector_resolution)
    k = _intensity_scale(albedo=0.5, distance=1.05, cos_s=0.9, cos_p=0.95)
    proj = ProjectorModel(K=K_p, R=R_p, t=-R_p @ center,
                          resolution=spec.projector_resolution,
                          gamma=np.full(3, GT_GAMMA_P), intensity_scale=k)

    res = spec.texture_resolution
    nm = np.tile(np.array([0.5, 0.5, 1.0], np.float32), (res, res, 1))
    mats = MaterialMaps(
        base_color=_smooth_texture(rng, res, 0.15, 0.9),
        roughness=_smooth_texture(rng, res, 0.3, 0.8, channels=1),
        metallic=(_smooth_texture(rng, res, 0.0, 1.0, channels=1) > 0.75)
        .astype(np.float32) * 0.8,
        normal_map=nm,
        lambertian=False if spec.lambertian is None else spec.lambertian)
    return mesh, cam, proj, mats


_BUILDERS = {"flat-plane": _flat_plane, "two-plane-corner": _two_plane_corner,
             "textured-relief": _textured_relief}


def make_scene(spec: FixtureSpec) -> Scene:
    """Build the fixture scene with its ground-truth parameters."""
    mesh, cam, proj, mats = _BUILDERS[spec.name](spec)
    params = SceneParams(mats, gamma_p=proj.gamma, gamma_c=cam.gamma,
                         white_balance=cam.white_balance)
    scene = Scene(projector=proj, camera=cam, mesh=mesh, params=params)
    scene.validate()
    return scene


def make_fixture(spec: FixtureSpec, out_dir: str | None = None) -> Fixture:
    """Build the scene and render its training/test pairs with the GT θ*.

    With ``out_dir``, writes the scene directory (JSON + OBJ + PFM maps) and
    the image pairs as PNGs under ``train/`` and ``test/``.
    """
    scene = make_scene(spec)
    rng_in = np.random.default_rng([spec.seed, 7])
    rng_test = np.random.default_rng([spec.seed, 11])
    train_inputs = [smooth_input_image(rng_in, spec.projector_resolution)
                    for _ in range(spec.K)]
    test_inputs = [smooth_input_image(rng_test, spec.projector_resolution)
                   for _ in range(spec.test_size)]

    def gt_render(img, seed):
        settings = RenderSettings(spp=spec.gt_spp, max_depth=spec.max_depth,
                                  seed=seed, tile_size=spec.tile_size)
        return render(scene, torch.as_tensor(img), settings).numpy()

    train_targets = [gt_render(img, spec.seed * 1000 + 13 + i)
                     for i, img in enumerate(train_inputs)]
    test_targets = [gt_render(img, spec.seed * 1000 + 500 + i)
                    for i, img in enumerate(test_inputs)]

    fixture = Fixture(spec=spec, scene=scene,
                      train_inputs=train_inputs, train_targets=train_targets,
                      test_inputs=test_inputs, test_targets=test_targets,
                      gt_values=scene.params.values())
    if out_dir is not None:
        write_fixture(fixture, out_dir)
    return fixture


def write_fixture(fixture: Fixture, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    save_scene(fixture.scene, os.path.join(out_dir, "scene.json"))
    for sub, inputs, targets in (
            ("train", fixture.train_inputs, fixture.train_targets),
            ("test", fixture.test_inputs, fixture.test_targets)):
        d = os.path.join(out_dir, sub)
        os.makedirs(d, exist_ok=True)
        for i, (ip, tc) in enumerate(zip(inputs, targets)):
            imgio.write_png(os.path.join(d, f"input_{i:03d}.png"), ip)
            imgio.write_png(os.path.join(d, f"target_{i:03d}.png"), tc)


def perturb_for_training(scene: Scene, base_color_gray: float = 0.5) -> Scene:
    """A copy of the scene with the canonical perturbed initialization:
    γ_p shifted by +0.3, white balance scaled by 1.2, base color reset to a
    constant gray, roughness/metallic/normal map at neutral defaults."""
    vals = scene.params.values()
    res = vals["base_color"].shape[0]
    mats = MaterialMaps(
        base_color=np.full_like(vals["base_color"], base_color_gray),
        roughness=np.full_like(vals["roughness"], 0.5),
        metallic=np.zeros_like(vals["metallic"]),
        normal_map=np.tile(np.array([0.5, 0.5, 1.0], np.float32), (res, res, 1)),
        lambertian=scene.params.lambertian)
    params = SceneParams(mats,
                         gamma_p=np.minimum(vals["gamma_p"] + 0.3, 2.95),
                         gamma_c=vals["gamma_c"],
                         white_balance=np.clip(vals["white_balance"] * 1.2,
                                               0.25, 2.45))
    return Scene(projector=scene.projector, camera=scene.camera,
                 mesh=scene.mesh, params=params)
