"""Differentiable projector-camera system simulator.

Forward path-traced rendering of a projector-lit scene, reverse-mode
gradients via path replay, inverse estimation of materials and device
response, relighting, projector compensation, and Gray-code structured-light
geometry acquisition.
"""

from .denoise import DenoiseSettings, denoise
from .errors import (BehindDeviceError, DegenerateGeometryError,
                     EmptyMeshError, MissingRecordError, NumericalError,
                     ProcamsimError, ResolutionMismatchError, SceneParseError,
                     SingularMatrixError, ValidationError)
from .fixtures import Fixture, FixtureSpec, make_fixture, make_scene
from .metrics import MetricsReport, MetricsRow, mean_l1, psnr, rgb_distance, ssim
from .optimize import TrainConfig, compensate, relight, train
from .render import AuxBuffers, RenderSettings, render, render_aux
from .scene import (CameraModel, MaterialMaps, ProjectorModel, Scene,
                    SceneParams, TriangleMesh, load_scene, save_scene)
from .structured_light import (CorrespondenceMap, DepthGrid, GrayCodeSet,
                               decode, generate_patterns, gray_decode,
                               gray_encode, mesh_from_depth, triangulate)
from .tape import GradientTape, ParamGrads, RenderRecord, fd_check

__version__ = "0.1.0"

__all__ = [
    "AuxBuffers", "BehindDeviceError", "CameraModel", "CorrespondenceMap",
    "DegenerateGeometryError", "DenoiseSettings", "DepthGrid", "EmptyMeshError",
    "Fixture", "FixtureSpec", "GradientTape", "GrayCodeSet", "MaterialMaps",
    "MetricsReport",
    "MetricsRow", "MissingRecordError", "NumericalError", "ParamGrads",
    "ProcamsimError", "ProjectorModel", "RenderRecord", "RenderSettings",
    "ResolutionMismatchError", "Scene", "SceneParams", "SceneParseError",
    "SingularMatrixError", "TrainConfig", "TriangleMesh", "ValidationError",
    "compensate", "decode", "denoise", "fd_check", "generate_patterns",
    "gray_decode", "gray_encode", "load_scene", "make_fixture", "make_scene",
    "mean_l1", "mesh_from_depth",
    "psnr", "relight", "render", "render_aux", "rgb_distance", "save_scene",
    "ssim", "train", "triangulate",
]
