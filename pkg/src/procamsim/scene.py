"""Scene/state types, parameter bounds and scene-file (de)serialization.

A scene is a single JSON document with sections ``projector``, ``camera``,
``mesh`` (OBJ path), ``materials`` (texture paths or constant initializers)
and ``params`` (bounds). Box-constrained parameters are represented by
unconstrained latents with a logistic squashing map, so optimizer steps can
never leave the feasible region and gradients never vanish discontinuously at
the bounds.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from . import imgio
from .errors import SceneParseError, ValidationError

# Default box constraints; a scene file may override them (e.g. relaxed test
# scenes with linear responses).
DEFAULT_BOUNDS = {
    "gamma_p": (2.0, 3.0),
    "gamma_c": (1.0 / 3.0, 1.0),
    "white_balance": (0.2, 2.5),
    "base_color": (0.0, 1.0),
    "roughness": (0.03, 1.0),
    "metallic": (0.0, 1.0),
    "normal_map": (0.0, 1.0),
}

_TEXTURE_FIELDS = ("base_color", "roughness", "metallic", "normal_map")


# ---------------------------------------------------------------------------
# Squashing map

def squash_param(latent, lo: float, hi: float):
    """Map an unconstrained latent into (lo, hi) via a logistic curve.

    Monotone and differentiable everywhere; latent 0 maps to the midpoint.
    """
    if lo >= hi:
        raise ValidationError(f"invalid bounds ({lo}, {hi})")
    if isinstance(latent, torch.Tensor):
        return lo + (hi - lo) * torch.sigmoid(latent)
    return lo + (hi - lo) / (1.0 + math.exp(-latent))


def unsquash_param(value, lo: float, hi: float):
    """Inverse of :func:`squash_param` for values strictly inside (lo, hi)."""
    if lo >= hi:
        raise ValidationError(f"invalid bounds ({lo}, {hi})")
    if isinstance(value, torch.Tensor):
        frac = ((value - lo) / (hi - lo)).clamp(1e-12, 1.0 - 1e-12)
        return torch.log(frac) - torch.log1p(-frac)
    frac = min(max((value - lo) / (hi - lo), 1e-12), 1.0 - 1e-12)
    return math.log(frac / (1.0 - frac))


# ---------------------------------------------------------------------------
# Device models

def _check_rotation(r: np.ndarray, name: str) -> None:
    if np.abs(r @ r.T - np.eye(3)).max() >= 1e-6:
        raise ValidationError(f"{name} is not orthonormal", field=name)
    if np.linalg.det(r) <= 0:
        raise ValidationError(f"{name} has negative determinant", field=name)


@dataclass
class ProjectorModel:
    """Pinhole projective emitter. ``intensity_scale`` (k) folds the gain and
    per-pixel solid angle into a single linear radiometric constant."""

    K: np.ndarray                  # 3x3 intrinsics, pixels
    R: np.ndarray                  # world -> projector rotation
    t: np.ndarray                  # world -> projector translation
    resolution: tuple[int, int]    # (W, H)
    gain: float = 1.0
    gamma: np.ndarray = field(default_factory=lambda: np.full(3, 2.2))
    intensity_scale: float = 1.0   # k

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64)
        self.R = np.asarray(self.R, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.gamma = np.asarray(self.gamma, dtype=np.float64).reshape(3)
        self.resolution = (int(self.resolution[0]), int(self.resolution[1]))

    def validate(self, bounds=None) -> None:
        _check_rotation(self.R, "projector.R")
        lo, hi = (bounds or DEFAULT_BOUNDS)["gamma_p"]
        if not np.all((self.gamma >= lo) & (self.gamma <= hi)):
            raise ValidationError(
                f"projector.gamma {self.gamma} outside [{lo}, {hi}]",
                field="gamma_p")
        if self.gain <= 0 or self.intensity_scale <= 0:
            raise ValidationError("projector gain/intensity_scale must be > 0",
                                  field="projector.gain")

    @property
    def center(self) -> np.ndarray:
        """Optical center in world coordinates."""
        return -self.R.T @ self.t

    @property
    def axis(self) -> np.ndarray:
        """Forward (+z of the projector frame) in world coordinates."""
        return self.R.T @ np.array([0.0, 0.0, 1.0])


@dataclass
class CameraModel:
    """Pinhole camera at the world origin; pose refinement is applied on top
    of the identity base pose."""

    K: np.ndarray
    resolution: tuple[int, int]
    exposure: float = 1.0          # g_c, held constant
    gamma: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))
    white_balance: np.ndarray = field(default_factory=lambda: np.ones(3))
    rotation_refinement: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation_refinement: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64)
        self.gamma = np.asarray(self.gamma, dtype=np.float64).reshape(3)
        self.white_balance = np.asarray(self.white_balance, dtype=np.float64).reshape(3)
        self.rotation_refinement = np.asarray(self.rotation_refinement, dtype=np.float64)
        self.translation_refinement = np.asarray(self.translation_refinement,
                                                 dtype=np.float64).reshape(3)
        self.resolution = (int(self.resolution[0]), int(self.resolution[1]))

    def validate(self, bounds=None) -> None:
        b = bounds or DEFAULT_BOUNDS
        lo, hi = b["gamma_c"]
        if not np.all((self.gamma >= lo - 1e-12) & (self.gamma <= hi + 1e-12)):
            raise ValidationError(
                f"camera.gamma {self.gamma} outside [{lo}, {hi}]", field="gamma_c")
        lo, hi = b["white_balance"]
        if not np.all((self.white_balance > lo) & (self.white_balance < hi)):
            raise ValidationError(
                f"camera.white_balance {self.white_balance} outside ({lo}, {hi})",
                field="white_balance")
        _check_rotation(self.rotation_refinement, "camera.rotation_refinement")
        if self.exposure <= 0:
            raise ValidationError("camera.exposure must be > 0", field="exposure")


# ---------------------------------------------------------------------------
# Materials and mesh

@dataclass
class MaterialMaps:
    """Disney-principled subset textures plus the tangent-space normal map.

    ``lambertian`` switches the BRDF to a pure diffuse lobe; used by analytic
    oracle scenes.
    """

    base_color: np.ndarray   # (H, W, 3) in [0,1]
    roughness: np.ndarray    # (H, W) in [0,1]
    metallic: np.ndarray     # (H, W) in [0,1]
    normal_map: np.ndarray   # (H, W, 3) in [0,1]; texel (.5,.5,1) = no change
    lambertian: bool = False

    def validate(self) -> None:
        for name in _TEXTURE_FIELDS:
            tex = getattr(self, name)
            if not np.isfinite(tex).all():
                raise ValidationError(f"materials.{name} has non-finite texels",
                                      field=name)
            if tex.min() < -1e-9 or tex.max() > 1 + 1e-9:
                raise ValidationError(f"materials.{name} outside [0,1]", field=name)
        if self.base_color.shape[:2] != self.roughness.shape[:2] or \
           self.base_color.shape[:2] != self.metallic.shape[:2] or \
           self.base_color.shape[:2] != self.normal_map.shape[:2]:
            raise ValidationError("material map resolutions differ", field="materials")


@dataclass
class TriangleMesh:
    """Indexed triangles with per-vertex unit normals and UVs in [0,1]^2."""

    vertices: np.ndarray   # (N, 3)
    faces: np.ndarray      # (M, 3) int
    normals: np.ndarray    # (N, 3) unit
    uvs: np.ndarray        # (N, 2)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.normals = np.asarray(self.normals, dtype=np.float64)
        self.uvs = np.asarray(self.uvs, dtype=np.float64)

    def validate(self) -> None:
        if self.faces.size == 0:
            raise ValidationError("mesh has no triangles", field="mesh")
        if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
            raise ValidationError("mesh face index out of range", field="mesh.faces")
        norm = np.linalg.norm(self.normals, axis=1)
        if np.abs(norm - 1.0).max() > 1e-4:
            raise ValidationError("vertex normals not unit length", field="mesh.normals")
        uv = self.uvs[self.faces]
        e1 = uv[:, 1] - uv[:, 0]
        e2 = uv[:, 2] - uv[:, 0]
        area2 = np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
        if (area2 < 1e-14).any():
            raise ValidationError("degenerate UV triangle (zero UV-space area)",
                                  field="mesh.uvs")

    @property
    def scale(self) -> float:
        """Bounding-box diagonal; the reference length for geometric epsilons."""
        ext = self.vertices.max(axis=0) - self.vertices.min(axis=0)
        return float(np.linalg.norm(ext))


# ---------------------------------------------------------------------------
# Differentiable parameter set

class SceneParams:
    """The full differentiable parameter set.

    Every bounded field is stored as an unconstrained latent;
    :meth:`materialize` applies the squashing maps and returns the constrained
    tensors (graph-connected to the latents, so autograd reaches them). The
    6-vector ``pose`` (axis-angle increment + translation) refines the camera
    pose and is unbounded.

    ``mode`` is ``"latent"`` for optimization or ``"direct"`` for
    finite-difference checks, where the constrained values themselves are the
    autograd leaves.
    """

    SCALAR_FIELDS = ("gamma_p", "gamma_c", "white_balance")
    TEXTURE_FIELDS = _TEXTURE_FIELDS

    def __init__(self, materials: MaterialMaps, gamma_p, gamma_c, white_balance,
                 pose=None, bounds=None):
        self.bounds = dict(DEFAULT_BOUNDS)
        if bounds:
            self.bounds.update({k: tuple(v) for k, v in bounds.items()})
        self.lambertian = materials.lambertian
        self.mode = "latent"
        self._latents: dict[str, torch.Tensor] = {}
        self._direct: dict[str, torch.Tensor] = {}

        init = {
            "gamma_p": np.asarray(gamma_p, dtype=np.float64),
            "gamma_c": np.asarray(gamma_c, dtype=np.float64),
            "white_balance": np.asarray(white_balance, dtype=np.float64),
            "base_color": materials.base_color,
            "roughness": materials.roughness,
            "metallic": materials.metallic,
            "normal_map": materials.normal_map,
        }
        for name, value in init.items():
            lo, hi = self.bounds[name]
            # nudge strictly inside the open interval so the logistic map is
            # well-defined and serialization round trips
            delta = 1e-5 * (hi - lo)
            v = torch.as_tensor(np.asarray(value), dtype=torch.float64)
            v = v.clamp(lo + delta, hi - delta)
            self._latents[name] = unsquash_param(v, lo, hi).requires_grad_(True)
        pose = np.zeros(6) if pose is None else np.asarray(pose, dtype=np.float64)
        self._latents["pose"] = torch.as_tensor(pose, dtype=torch.float64).requires_grad_(True)

    # -- access ------------------------------------------------------------

    def materialize(self) -> dict[str, torch.Tensor]:
        """Constrained parameter tensors, graph-connected to the current leaves."""
        if self.mode == "direct":
            return dict(self._direct)
        out = {}
        for name, latent in self._latents.items():
            if name == "pose":
                out[name] = latent
            else:
                lo, hi = self.bounds[name]
                out[name] = squash_param(latent, lo, hi)
        return out

    def latents(self) -> dict[str, torch.Tensor]:
        return dict(self._latents)

    def leaves(self) -> dict[str, torch.Tensor]:
        """The autograd leaf tensors for the active mode."""
        return dict(self._direct) if self.mode == "direct" else dict(self._latents)

    def values(self) -> dict[str, np.ndarray]:
        """Detached numpy snapshot of the constrained values."""
        return {k: v.detach().cpu().numpy().copy()
                for k, v in self.materialize().items()}

    def set_direct_mode(self) -> None:
        """Re-root the graph at the constrained values (for FD vs AD checks)."""
        mat = {k: v.detach().clone().requires_grad_(True)
               for k, v in self.materialize().items()}
        self._direct = mat
        self.mode = "direct"

    def set_latent_mode(self) -> None:
        if self.mode == "direct":
            # fold any direct-mode edits back into the latents
            for name, v in self._direct.items():
                if name == "pose":
                    self._latents[name] = v.detach().clone().requires_grad_(True)
                else:
                    lo, hi = self.bounds[name]
                    self._latents[name] = unsquash_param(
                        v.detach(), lo, hi).requires_grad_(True)
        self._direct = {}
        self.mode = "latent"

    def material_values(self) -> MaterialMaps:
        vals = self.values()
        return MaterialMaps(base_color=vals["base_color"],
                            roughness=vals["roughness"],
                            metallic=vals["metallic"],
                            normal_map=vals["normal_map"],
                            lambertian=self.lambertian)


# ---------------------------------------------------------------------------
# Scene bundle + (de)serialization

@dataclass
class Scene:
    projector: ProjectorModel
    camera: CameraModel
    mesh: TriangleMesh
    params: SceneParams

    @property
    def scale(self) -> float:
        return self.mesh.scale

    def validate(self) -> None:
        self.projector.validate(self.params.bounds)
        self.camera.validate(self.params.bounds)
        self.mesh.validate()
        self.params.material_values().validate()


def _require(section: dict, key: str, where: str):
    if key not in section:
        raise SceneParseError(f"missing field '{where}.{key}'", field=f"{where}.{key}")
    return section[key]


def _load_texture(value, base_dir: str, resolution, channels: int) -> np.ndarray:
    if isinstance(value, str):
        path = os.path.join(base_dir, value)
        tex = imgio.read_pfm(path) if path.lower().endswith(".pfm") else imgio.read_png(path)
    else:
        w, h = resolution
        tex = np.full((h, w, channels) if channels == 3 else (h, w),
                      np.nan, dtype=np.float32)
        tex[...] = np.asarray(value, dtype=np.float32)
    if channels == 1 and tex.ndim == 3:
        tex = tex[..., 0]
    if channels == 3 and tex.ndim == 2:
        tex = np.repeat(tex[..., None], 3, axis=2)
    return tex.astype(np.float32)


def load_scene(path: str | os.PathLike) -> Scene:
    """Load and validate a scene description.

    Raises :class:`SceneParseError` on malformed input and
    :class:`ValidationError` (naming the field) on invariant violations.
    """
    path = os.fspath(path)
    base_dir = os.path.dirname(os.path.abspath(path))
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise SceneParseError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e

    proj = _require(doc, "projector", "scene")
    cam = _require(doc, "camera", "scene")
    mats = _require(doc, "materials", "scene")
    bounds = doc.get("params", {}).get("bounds", {})
    bounds = {k: tuple(v) for k, v in bounds.items()}

    projector = ProjectorModel(
        K=_require(proj, "K", "projector"),
        R=_require(proj, "R", "projector"),
        t=_require(proj, "t", "projector"),
        resolution=_require(proj, "resolution", "projector"),
        gain=proj.get("gain", 1.0),
        gamma=_require(proj, "gamma", "projector"),
        intensity_scale=proj.get("intensity_scale", 1.0),
    )
    camera = CameraModel(
        K=_require(cam, "K", "camera"),
        resolution=_require(cam, "resolution", "camera"),
        exposure=cam.get("exposure", 1.0),
        gamma=_require(cam, "gamma", "camera"),
        white_balance=_require(cam, "white_balance", "camera"),
        rotation_refinement=cam.get("rotation_refinement", np.eye(3).tolist()),
        translation_refinement=cam.get("translation_refinement", [0.0, 0.0, 0.0]),
    )

    mesh_path = os.path.join(base_dir, _require(doc, "mesh", "scene"))
    vertices, faces, normals, uvs = imgio.read_obj(mesh_path)
    if normals is None or uvs is None:
        raise SceneParseError(f"{mesh_path}: mesh must carry vn and vt records")
    mesh = TriangleMesh(vertices=vertices, faces=faces, normals=normals, uvs=uvs)

    tex_res = mats.get("resolution", [64, 64])
    materials = MaterialMaps(
        base_color=_load_texture(_require(mats, "base_color", "materials"),
                                 base_dir, tex_res, 3),
        roughness=_load_texture(_require(mats, "roughness", "materials"),
                                base_dir, tex_res, 1),
        metallic=_load_texture(_require(mats, "metallic", "materials"),
                               base_dir, tex_res, 1),
        normal_map=_load_texture(mats.get("normal_map", [0.5, 0.5, 1.0]),
                                 base_dir, tex_res, 3),
        lambertian=bool(mats.get("lambertian", False)),
    )

    params = SceneParams(materials,
                         gamma_p=projector.gamma,
                         gamma_c=camera.gamma,
                         white_balance=camera.white_balance,
                         pose=doc.get("params", {}).get("pose"),
                         bounds=bounds)
    scene = Scene(projector=projector, camera=camera, mesh=mesh, params=params)
    scene.validate()
    return scene


def save_scene(scene: Scene, path: str | os.PathLike) -> None:
    """Write scene JSON plus OBJ mesh and PFM parameter maps next to it."""
    path = os.fspath(path)
    base_dir = os.path.dirname(os.path.abspath(path))
    os.makedirs(base_dir, exist_ok=True)
    vals = scene.params.values()

    imgio.write_obj(os.path.join(base_dir, "mesh.obj"), scene.mesh.vertices,
                    scene.mesh.faces, scene.mesh.normals, scene.mesh.uvs)
    tex_files = {}
    for name in _TEXTURE_FIELDS:
        tex = vals[name]
        fname = f"{name}.pfm"
        imgio.write_pfm(os.path.join(base_dir, fname), tex)
        tex_files[name] = fname

    h, w = vals["base_color"].shape[:2]
    doc = {
        "projector": {
            "K": scene.projector.K.tolist(),
            "R": scene.projector.R.tolist(),
            "t": scene.projector.t.tolist(),
            "resolution": list(scene.projector.resolution),
            "gain": scene.projector.gain,
            "gamma": vals["gamma_p"].tolist(),
            "intensity_scale": scene.projector.intensity_scale,
        },
        "camera": {
            "K": scene.camera.K.tolist(),
            "resolution": list(scene.camera.resolution),
            "exposure": scene.camera.exposure,
            "gamma": vals["gamma_c"].tolist(),
            "white_balance": vals["white_balance"].tolist(),
            "rotation_refinement": scene.camera.rotation_refinement.tolist(),
            "translation_refinement": scene.camera.translation_refinement.tolist(),
        },
        "mesh": "mesh.obj",
        "materials": {**tex_files,
                      "resolution": [w, h],
                      "lambertian": scene.params.lambertian},
        "params": {
            "bounds": {k: list(v) for k, v in scene.params.bounds.items()},
            "pose": vals["pose"].tolist(),
        },
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
