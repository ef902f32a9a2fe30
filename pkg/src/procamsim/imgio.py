"""Image, mesh and point-cloud codecs.

PFM is the HDR interchange format (32-bit float, little-endian, ``PF``/``Pf``
header); PNG carries 8-bit LDR data. Meshes use Wavefront OBJ with
``v``/``vn``/``vt``/``f`` records, point clouds ASCII PLY.
"""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

from .errors import SceneParseError


# ---------------------------------------------------------------------------
# PFM

def write_pfm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write a float32 image as PFM. (H, W) or (H, W, 1) -> Pf, (H, W, 3) -> PF."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[:, :, 0]
    if image.ndim == 2:
        header = b"Pf"
    elif image.ndim == 3 and image.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError(f"unsupported PFM shape {image.shape}")
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")  # negative scale marks little-endian
        # PFM stores rows bottom-to-top
        f.write(np.ascontiguousarray(image[::-1]).tobytes())


def read_pfm(path: str | os.PathLike) -> np.ndarray:
    """Read a PFM file into a float32 array, (H, W) or (H, W, 3)."""
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"PF", b"Pf"):
            raise SceneParseError(f"{path}: not a PFM file (header {header!r})")
        dims = f.readline().split()
        if len(dims) != 2:
            raise SceneParseError(f"{path}: malformed PFM dimension line")
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        count = w * h * (3 if header == b"PF" else 1)
        data = np.frombuffer(f.read(count * 4), dtype="<f4" if scale < 0 else ">f4")
        if data.size != count:
            raise SceneParseError(f"{path}: truncated PFM payload")
    if header == b"PF":
        img = data.reshape(h, w, 3)
    else:
        img = data.reshape(h, w)
    return np.ascontiguousarray(img[::-1]).astype(np.float32)


# ---------------------------------------------------------------------------
# PNG

def write_png(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write an image as 8-bit PNG. Float input is treated as [0, 1]."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(image).save(path)


def read_png(path: str | os.PathLike) -> np.ndarray:
    """Read a PNG into float32 [0, 1], (H, W) or (H, W, 3)."""
    img = np.asarray(Image.open(path))
    if img.ndim == 3 and img.shape[2] == 4:
        img = img[:, :, :3]
    return img.astype(np.float32) / 255.0


# ---------------------------------------------------------------------------
# OBJ

def write_obj(path, vertices, faces, normals=None, uvs=None) -> None:
    """Write an indexed triangle mesh; vertices/normals/uvs share indices."""
    with open(path, "w") as f:
        for v in vertices:
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        if uvs is not None:
            for t in uvs:
                f.write(f"vt {t[0]:.9g} {t[1]:.9g}\n")
        if normals is not None:
            for n in normals:
                f.write(f"vn {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}\n")
        for tri in faces:
            idx = [i + 1 for i in tri]
            if uvs is not None and normals is not None:
                f.write(f"f {idx[0]}/{idx[0]}/{idx[0]} {idx[1]}/{idx[1]}/{idx[1]} {idx[2]}/{idx[2]}/{idx[2]}\n")
            elif uvs is not None:
                f.write(f"f {idx[0]}/{idx[0]} {idx[1]}/{idx[1]} {idx[2]}/{idx[2]}\n")
            elif normals is not None:
                f.write(f"f {idx[0]}//{idx[0]} {idx[1]}//{idx[1]} {idx[2]}//{idx[2]}\n")
            else:
                f.write(f"f {idx[0]} {idx[1]} {idx[2]}\n")


def read_obj(path):
    """Parse an OBJ file.

    Returns (vertices, faces, normals, uvs) with normals/uvs re-indexed to the
    vertex order (None when absent). Faces must be triangles.
    """
    verts, norms, uvs = [], [], []
    face_v, face_t, face_n = [], [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            try:
                if tag == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif tag == "vn":
                    norms.append([float(x) for x in parts[1:4]])
                elif tag == "vt":
                    uvs.append([float(x) for x in parts[1:3]])
                elif tag == "f":
                    if len(parts) != 4:
                        raise SceneParseError(
                            f"{path}:{lineno}: only triangle faces supported")
                    fv, ft, fn = [], [], []
                    for vert in parts[1:]:
                        fields = vert.split("/")
                        fv.append(int(fields[0]) - 1)
                        ft.append(int(fields[1]) - 1 if len(fields) > 1 and fields[1] else -1)
                        fn.append(int(fields[2]) - 1 if len(fields) > 2 and fields[2] else -1)
                    face_v.append(fv)
                    face_t.append(ft)
                    face_n.append(fn)
            except (ValueError, IndexError) as e:
                raise SceneParseError(f"{path}:{lineno}: {e}") from e

    vertices = np.asarray(verts, dtype=np.float64)
    faces = np.asarray(face_v, dtype=np.int64)
    if faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
        raise SceneParseError(f"{path}: face vertex index out of range")

    def reindex(attr, fidx, width):
        if not attr:
            return None
        attr = np.asarray(attr, dtype=np.float64)
        fidx = np.asarray(fidx, dtype=np.int64)
        if fidx.size == 0 or (fidx < 0).all():
            return None
        if fidx.max() >= len(attr):
            raise SceneParseError(f"{path}: attribute index out of range")
        out = np.zeros((len(vertices), width))
        out[faces.reshape(-1)] = attr[fidx.reshape(-1)]
        return out

    normals = reindex(norms, face_n, 3)
    uv = reindex(uvs, face_t, 2)
    return vertices, faces, normals, uv


# ---------------------------------------------------------------------------
# PLY

def write_ply_ascii(path, points: np.ndarray, colors: np.ndarray | None = None) -> None:
    """Write a point cloud as ASCII PLY; colors are float [0,1] -> uchar."""
    points = np.asarray(points, dtype=np.float64)
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(points)}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        if colors is not None:
            f.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        f.write("end_header\n")
        if colors is None:
            for p in points:
                f.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")
        else:
            c8 = np.clip(np.round(np.asarray(colors) * 255), 0, 255).astype(np.uint8)
            for p, c in zip(points, c8):
                f.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {c[0]} {c[1]} {c[2]}\n")
