"""Gray-code structured light: patterns, decoding, triangulation, meshing.

The pattern set carries an all-white and all-black reference followed, per
axis, by one bit-plane image per bit (MSB first) each immediately followed by
its complement: 2 (bits_x + bits_y) + 2 images total. Decoding compares each
capture against its complement per pixel, so no global threshold is needed;
low-contrast pixels are invalidated. Decoded correspondences triangulate by
the midpoint method between the camera ray and the projector ray, and the
resulting depth grid meshes into one vertex per valid pixel with two
triangles per fully-valid 2x2 cell.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (DegenerateGeometryError, EmptyMeshError,
                     ResolutionMismatchError, ValidationError)
from .geometry import unproject_grid
from .scene import TriangleMesh

BIT_THRESHOLD = 0.02       # min |capture - complement| per bit, LDR units
CONTRAST_FLOOR = 0.1       # min white - black reference contrast


def gray_encode(n: np.ndarray | int):
    n = np.asarray(n)
    return n ^ (n >> 1)


def gray_decode(g: np.ndarray | int):
    g = np.asarray(g).astype(np.int64)
    out = g.copy()
    shift = 1
    while shift < 64:
        out ^= out >> shift
        shift *= 2
    return out


@dataclass
class GrayCodeSet:
    patterns: list[np.ndarray]     # each (H_p, W_p) float32 in {0, 1}
    bits_x: int
    bits_y: int
    resolution: tuple[int, int]    # (W_p, H_p)

    def __len__(self):
        return len(self.patterns)

    def as_inputs(self) -> list[np.ndarray]:
        """Patterns expanded to (H, W, 3) projector input images."""
        return [np.repeat(p[:, :, None], 3, axis=2) for p in self.patterns]


@dataclass
class CorrespondenceMap:
    coords: np.ndarray     # (H_c, W_c, 2) decoded projector pixel (x_p, y_p)
    valid: np.ndarray      # (H_c, W_c) bool


@dataclass
class DepthGrid:
    depth: np.ndarray      # (H_c, W_c) camera-z, scene units
    mask: np.ndarray       # (H_c, W_c) bool
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))


def generate_patterns(width: int, height: int) -> GrayCodeSet:
    """Standard reflected-binary Gray-code pattern set for a projector."""
    if width <= 0 or height <= 0:
        raise ValidationError("pattern dimensions must be positive")
    bits_x = max(int(np.ceil(np.log2(width))), 1)
    bits_y = max(int(np.ceil(np.log2(height))), 1)
    patterns = [np.ones((height, width), dtype=np.float32),
                np.zeros((height, width), dtype=np.float32)]
    gx = gray_encode(np.arange(width))
    gy = gray_encode(np.arange(height))
    for b in range(bits_x):
        bit = ((gx >> (bits_x - 1 - b)) & 1).astype(np.float32)
        img = np.tile(bit[None, :], (height, 1))
        patterns.append(img)
        patterns.append(1.0 - img)
    for b in range(bits_y):
        bit = ((gy >> (bits_y - 1 - b)) & 1).astype(np.float32)
        img = np.tile(bit[:, None], (1, width))
        patterns.append(img)
        patterns.append(1.0 - img)
    return GrayCodeSet(patterns=patterns, bits_x=bits_x, bits_y=bits_y,
                       resolution=(width, height))


def _to_gray_plane(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img.mean(axis=2) if img.ndim == 3 else img


def decode(captures, code_set: GrayCodeSet,
           bit_threshold: float = BIT_THRESHOLD,
           contrast_floor: float = CONTRAST_FLOOR) -> CorrespondenceMap:
    """Per-camera-pixel projector coordinates from pattern captures."""
    if len(captures) != len(code_set.patterns):
        raise ResolutionMismatchError(
            f"got {len(captures)} captures for {len(code_set.patterns)} patterns")
    caps = [_to_gray_plane(c) for c in captures]
    shape = caps[0].shape
    if any(c.shape != shape for c in caps):
        raise ResolutionMismatchError("captures differ in resolution")

    white, black = caps[0], caps[1]
    valid = (white - black) > contrast_floor

    def decode_axis(start: int, bits: int) -> np.ndarray:
        code = np.zeros(shape, dtype=np.int64)
        nonlocal valid
        for b in range(bits):
            on = caps[start + 2 * b]
            off = caps[start + 2 * b + 1]
            valid = valid & (np.abs(on - off) >= bit_threshold)
            code = (code << 1) | (on > off).astype(np.int64)
        return gray_decode(code)

    x_code = decode_axis(2, code_set.bits_x)
    y_code = decode_axis(2 + 2 * code_set.bits_x, code_set.bits_y)
    w_p, h_p = code_set.resolution
    valid = valid & (x_code < w_p) & (y_code < h_p)
    coords = np.stack([x_code, y_code], axis=-1).astype(np.float64)
    coords[~valid] = 0.0
    return CorrespondenceMap(coords=coords, valid=valid)


def triangulate(cmap: CorrespondenceMap, K_c, K_p, R_p, t_p,
                parallel_eps: float = 1e-8) -> DepthGrid:
    """Midpoint triangulation of camera rays against projector rays.

    The camera sits at the world origin with identity pose; the projector
    maps world points x to K_p (R_p x + t_p). Near-parallel ray pairs (and
    negative depths) are flagged invalid; a zero baseline invalidates all.
    """
    h, w = cmap.valid.shape
    ys, xs = np.mgrid[0:h, 0:w]
    pix_c = np.stack([xs.reshape(-1) + 0.5, ys.reshape(-1) + 0.5], axis=1)
    d1 = unproject_grid(pix_c, K_c)

    pix_p = cmap.coords.reshape(-1, 2) + 0.5
    R_p = np.asarray(R_p, dtype=np.float64)
    t_p = np.asarray(t_p, dtype=np.float64).reshape(3)
    d2 = unproject_grid(pix_p, K_p) @ R_p       # rows: R_p^T d
    o2 = -R_p.T @ t_p

    # closed-form midpoint: minimize |s d1 - (o2 + t d2)|
    d12 = (d1 * d2).sum(1)
    denom = 1.0 - d12 * d12
    r = o2[None, :]
    rd1 = (r * d1).sum(1)
    rd2 = (r * d2).sum(1)
    ok = cmap.valid.reshape(-1) & (denom > parallel_eps)
    denom_safe = np.where(denom > parallel_eps, denom, 1.0)
    s = (rd1 - d12 * rd2) / denom_safe
    t = (d12 * rd1 - rd2) / denom_safe
    mid = 0.5 * (s[:, None] * d1 + r + t[:, None] * d2)
    depth = mid[:, 2]
    ok = ok & (depth > 0) & np.isfinite(depth)

    grid = np.zeros(h * w)
    grid[ok] = depth[ok]
    return DepthGrid(depth=grid.reshape(h, w), mask=ok.reshape(h, w),
                     points=mid[ok])


def mesh_from_depth(grid: DepthGrid, K_c, stride: int = 1) -> TriangleMesh:
    """One vertex per valid pixel, two triangles per fully-valid 2x2 cell.

    UVs are normalized camera pixel coordinates (v flipped so texture row 0
    is the top image row); per-vertex normals average the adjacent face
    normals, oriented toward the camera.
    """
    mask = grid.mask[::stride, ::stride]
    depth = grid.depth[::stride, ::stride]
    h, w = mask.shape
    if mask.sum() < 3:
        raise EmptyMeshError("fewer than 3 valid depth pixels")

    ys, xs = np.mgrid[0:h, 0:w]
    pix = np.stack([(xs.reshape(-1) + 0.5) * stride,
                    (ys.reshape(-1) + 0.5) * stride], axis=1)
    dirs = unproject_grid(pix, K_c)
    verts_all = dirs * (depth.reshape(-1) / np.maximum(dirs[:, 2], 1e-12))[:, None]

    index = -np.ones(h * w, dtype=np.int64)
    flat_valid = mask.reshape(-1)
    index[flat_valid] = np.arange(flat_valid.sum())
    vertices = verts_all[flat_valid]
    uvs = np.stack([(xs.reshape(-1)[flat_valid] + 0.5) / w,
                    1.0 - (ys.reshape(-1)[flat_valid] + 0.5) / h], axis=1)

    cell = mask[:-1, :-1] & mask[:-1, 1:] & mask[1:, :-1] & mask[1:, 1:]
    cy, cx = np.nonzero(cell)
    if len(cy) == 0:
        raise EmptyMeshError("no fully-valid 2x2 cell to mesh")
    i00 = index[cy * w + cx]
    i01 = index[cy * w + cx + 1]
    i10 = index[(cy + 1) * w + cx]
    i11 = index[(cy + 1) * w + cx + 1]
    # wound so the geometric normal faces the camera (-z side)
    faces = np.concatenate([np.stack([i00, i11, i01], axis=1),
                            np.stack([i00, i10, i11], axis=1)], axis=0)

    fv = vertices[faces]
    fn = np.cross(fv[:, 1] - fv[:, 0], fv[:, 2] - fv[:, 0])
    fn /= np.maximum(np.linalg.norm(fn, axis=1, keepdims=True), 1e-30)
    normals = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(normals, faces[:, k], fn)
    nrm = np.linalg.norm(normals, axis=1, keepdims=True)
    if (nrm[:, 0] < 1e-12).any():
        # isolated vertices with no face: point back at the camera
        lone = nrm[:, 0] < 1e-12
        normals[lone] = -vertices[lone] / np.maximum(
            np.linalg.norm(vertices[lone], axis=1, keepdims=True), 1e-30)
        nrm = np.linalg.norm(normals, axis=1, keepdims=True)
    normals /= nrm
    return TriangleMesh(vertices=vertices, faces=faces, normals=normals, uvs=uvs)
