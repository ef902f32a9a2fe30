"""Forward rendering: path tracing with next-event estimation toward the
projector.

The projector is a pinhole projective emitter and the only light source; all
direct lighting arrives via a deterministic shadow ray to its optical center,
with a cosine falloff off the projector axis and a bilinear lookup into the
input image. Indirect light continues through BRDF-sampled bounces.

Sampling decisions (pixel jitter, lobe choice, bounce directions) come from
per-(seed, tile) Philox streams and are detached from the autograd graph;
gradients flow through radiance values only. Rendering the same scene with
the same settings and seed is bitwise reproducible across thread counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import bvh as bvh_mod
from .brdf import eval_brdf, sample_brdf
from .errors import ResolutionMismatchError
from .geometry import MeshDerived, rodrigues, shading_normal
from .radiometry import crf_apply, prf_apply, radiance_clip

_OFFSET_FRAC = 1e-4   # secondary-ray origin offset, relative to scene scale


@dataclass
class RenderSettings:
    spp: int = 16
    max_depth: int = 4
    clipping_enabled: bool = True
    seed: int = 0
    tile_size: int = 16384        # pixels per tile; part of the RNG layout
    dtype: torch.dtype = torch.float32

    def __post_init__(self):
        if self.spp < 1:
            raise ValueError("spp must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")


@dataclass
class AuxBuffers:
    """Noise-free guidance buffers: one centered primary ray per pixel."""
    albedo: np.ndarray    # (H, W, 3)
    normal: np.ndarray    # (H, W, 3)
    depth: np.ndarray     # (H, W)
    mask: np.ndarray      # (H, W) bool


class SceneCache:
    """Immutable per-scene acceleration data shared across renders."""

    def __init__(self, scene, dtype):
        self.derived = MeshDerived(scene.mesh)
        self.bvh = bvh_mod.build_bvh(self.derived)
        self.eps = _OFFSET_FRAC * max(self.derived.scale, 1e-9)
        mesh = scene.mesh
        f = mesh.faces
        t = lambda a: torch.as_tensor(np.ascontiguousarray(a), dtype=dtype)
        self.face_normal = t(self.derived.face_normal)
        self.p0 = t(self.derived.p0)
        # dual edge basis: barycentric u = (x - p0)·dual_u, v = (x - p0)·dual_v
        e1, e2 = self.derived.e1, self.derived.e2
        d00 = (e1 * e1).sum(1)
        d01 = (e1 * e2).sum(1)
        d11 = (e2 * e2).sum(1)
        det = np.maximum(d00 * d11 - d01 * d01, 1e-30)
        self.dual_u = t((d11[:, None] * e1 - d01[:, None] * e2) / det[:, None])
        self.dual_v = t((d00[:, None] * e2 - d01[:, None] * e1) / det[:, None])
        self.tangent = t(self.derived.tangent)
        self.bitangent = t(self.derived.bitangent)
        self.n0, self.n1, self.n2 = (t(mesh.normals[f[:, i]]) for i in range(3))
        self.uv0, self.uv1, self.uv2 = (t(mesh.uvs[f[:, i]]) for i in range(3))
        self.dtype = dtype


_CACHES: dict[tuple[int, torch.dtype], SceneCache] = {}


def get_cache(scene, dtype) -> SceneCache:
    key = (id(scene.mesh), dtype)
    cache = _CACHES.get(key)
    if cache is None or cache.derived.mesh is not scene.mesh:
        cache = SceneCache(scene, dtype)
        _CACHES[key] = cache
    return cache


def bilinear_sample(tex: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Bilinear lookup with clamped borders.

    ``tex`` is (H, W, C) or (H, W); ``coords`` (N, 2) in continuous pixel
    units (texel center at i + 0.5). Differentiable in both the texture and
    the coordinates.
    """
    squeeze = tex.dim() == 2
    if squeeze:
        tex = tex[:, :, None]
    h, w, c = tex.shape
    x = coords[:, 0] - 0.5
    y = coords[:, 1] - 0.5
    x0 = torch.floor(x.detach())
    y0 = torch.floor(y.detach())
    fx = (x - x0).clamp(0.0, 1.0)[:, None]
    fy = (y - y0).clamp(0.0, 1.0)[:, None]
    x0 = x0.long().clamp(0, w - 1)
    y0 = y0.long().clamp(0, h - 1)
    x1 = (x0 + 1).clamp(0, w - 1)
    y1 = (y0 + 1).clamp(0, h - 1)
    flat = tex.reshape(h * w, c)
    v00 = flat[y0 * w + x0]
    v01 = flat[y0 * w + x1]
    v10 = flat[y1 * w + x0]
    v11 = flat[y1 * w + x1]
    top = v00 + (v01 - v00) * fx
    bot = v10 + (v11 - v10) * fx
    out = top + (bot - top) * fy
    return out[:, 0] if squeeze else out


def _make_frame(n: torch.Tensor):
    """Branchless orthonormal frame around unit normals (N, 3)."""
    sign = torch.where(n[:, 2] >= 0, torch.ones_like(n[:, 2]), -torch.ones_like(n[:, 2]))
    a = -1.0 / (sign + n[:, 2])
    b = n[:, 0] * n[:, 1] * a
    t = torch.stack([1.0 + sign * n[:, 0] ** 2 * a, sign * b, -sign * n[:, 0]], dim=1)
    bt = torch.stack([b, sign + n[:, 1] ** 2 * a, -n[:, 1]], dim=1)
    return t, bt


def _to_local(v, t, b, n):
    return torch.stack([(v * t).sum(1), (v * b).sum(1), (v * n).sum(1)], dim=1)


def _stratified_jitter(rng, npix, spp):
    """Stratified-jittered sub-pixel offsets, (npix, spp, 2) in [0, 1)."""
    u = rng.random((npix, spp, 2))
    n1 = int(np.sqrt(spp))
    n_str = n1 * n1
    if n_str > 1:
        s = np.arange(n_str)
        sx = (s % n1).astype(np.float64)
        sy = (s // n1).astype(np.float64)
        u[:, :n_str, 0] = (sx + u[:, :n_str, 0]) / n1
        u[:, :n_str, 1] = (sy + u[:, :n_str, 1]) / n1
    return u


class _Emitter:
    """Projector-side constants materialized once per render."""

    def __init__(self, scene, mats, I_p, dtype):
        p = scene.projector
        wp, hp = p.resolution
        if tuple(I_p.shape[:2]) != (hp, wp):
            raise ResolutionMismatchError(
                f"projector input is {I_p.shape[1]}x{I_p.shape[0]}, expected {wp}x{hp}")
        self.image = I_p if isinstance(I_p, torch.Tensor) else \
            torch.as_tensor(np.asarray(I_p), dtype=dtype)
        self.image = self.image.to(dtype)
        self.k = float(p.intensity_scale)
        self.gamma_p = mats["gamma_p"].to(dtype)
        self.center_np = p.center
        self.center = torch.as_tensor(p.center, dtype=dtype)
        self.axis = torch.as_tensor(p.axis, dtype=dtype)
        self.K = torch.as_tensor(p.K, dtype=dtype)
        self.R = torch.as_tensor(p.R, dtype=dtype)
        self.t = torch.as_tensor(p.t, dtype=dtype)
        self.res = (wp, hp)

    def project(self, x: torch.Tensor):
        """World points -> projector pixel coords + inside-frustum mask."""
        xc = x @ self.R.T + self.t
        z = xc[:, 2]
        pix = (xc @ self.K.T)[:, :2] / z[:, None].clamp_min(1e-12)
        wp, hp = self.res
        inside = (z > 1e-9) & (pix[:, 0] >= 0) & (pix[:, 0] < wp) \
            & (pix[:, 1] >= 0) & (pix[:, 1] < hp)
        return pix, inside


def render(scene, I_p, settings: RenderSettings, differentiable: bool = False,
           tile_range: tuple[int, int] | None = None, stats: dict | None = None):
    """Render the camera-captured LDR image for projector input ``I_p``.

    Returns a (H, W, 3) torch tensor in [0, 1], or flat (npix, 3) rows when
    ``tile_range`` restricts rendering to a contiguous tile span (used by the
    replay backward pass). With ``differentiable=False`` the whole render runs
    under ``no_grad``.
    """
    ctx = torch.enable_grad() if differentiable else torch.no_grad()
    with ctx:
        return _render_impl(scene, I_p, settings, tile_range, stats)


def _render_impl(scene, I_p, settings, tile_range, stats):
    dtype = settings.dtype
    cache = get_cache(scene, dtype)
    mats = scene.params.materialize()
    emitter = _Emitter(scene, mats, I_p, dtype)

    w_cam, h_cam = scene.camera.resolution
    npix_total = w_cam * h_cam
    n_tiles = (npix_total + settings.tile_size - 1) // settings.tile_size
    lo_tile, hi_tile = tile_range if tile_range is not None else (0, n_tiles)

    chunks = []
    dropped = 0
    for tile in range(lo_tile, hi_tile):
        start = tile * settings.tile_size
        stop = min(start + settings.tile_size, npix_total)
        rows, d = _render_tile(scene, cache, mats, emitter, settings,
                               np.arange(start, stop), tile)
        chunks.append(rows)
        dropped += d
    if stats is not None:
        stats["dropped_samples"] = stats.get("dropped_samples", 0) + dropped
    image = torch.cat(chunks, dim=0)
    if tile_range is None:
        image = image.view(h_cam, w_cam, 3)
    return image


def _render_tile(scene, cache, mats, emitter, settings, pix_ids, tile):
    dtype = settings.dtype
    spp = settings.spp
    npix = len(pix_ids)
    n = npix * spp
    cam = scene.camera
    w_cam = cam.resolution[0]
    rng = np.random.Generator(np.random.Philox(
        key=[settings.seed & 0xFFFFFFFFFFFFFFFF, np.uint64(tile)]))

    # materialized parameters in render dtype (graph-preserving casts)
    bc_tex = mats["base_color"].to(dtype)
    rough_tex = mats["roughness"].to(dtype)
    metal_tex = mats["metallic"].to(dtype)
    nm_tex = mats["normal_map"].to(dtype)
    wb = mats["white_balance"].to(dtype)
    gamma_c = mats["gamma_c"].to(dtype)
    pose = mats["pose"]
    lambertian = scene.params.lambertian
    k = emitter.k
    g_c = float(cam.exposure)
    clip_thr = k / wb.min()

    # primary rays (pose-refined, differentiable)
    jit = _stratified_jitter(rng, npix, spp)
    ix = (pix_ids % w_cam).astype(np.float64)
    iy = (pix_ids // w_cam).astype(np.float64)
    px = np.repeat(ix, spp) + jit[:, :, 0].reshape(-1)
    py = np.repeat(iy, spp) + jit[:, :, 1].reshape(-1)
    kinv = np.linalg.inv(cam.K)
    d_cam = np.stack([px, py, np.ones(n)], axis=1) @ kinv.T
    d_cam = torch.as_tensor(d_cam, dtype=dtype)

    r_ref = rodrigues(pose[:3]).to(dtype)
    t_ref = pose[3:].to(dtype)
    d_world = d_cam @ r_ref            # == (R^T d)^T rows
    d_world = d_world / torch.linalg.norm(d_world, dim=1, keepdim=True)
    o_world = (-(r_ref.T @ t_ref)).expand(n, 3)

    # per-bounce random draws, fixed shapes so streams do not depend on the
    # active set
    bounce_u = [rng.random((n, 3)) for _ in range(max(settings.max_depth - 1, 0))]

    irradiance = torch.zeros((n, 3), dtype=dtype)
    active = np.arange(n)
    origin = o_world
    direction = d_world
    throughput = torch.ones((n, 3), dtype=dtype)
    origin_np = origin.detach().numpy().astype(np.float64)
    direction_np = direction.detach().numpy().astype(np.float64)
    dropped = 0

    for depth in range(settings.max_depth):
        t_hit, tri, bu, bv = bvh_mod.intersect_batch(
            cache.bvh, cache.derived, origin_np, direction_np)
        hit = tri >= 0
        if not hit.any():
            break
        sel = np.nonzero(hit)[0]
        active = active[sel]
        tri = tri[sel]
        sel_t = torch.as_tensor(sel)
        tri_t = torch.as_tensor(tri)
        origin = origin[sel_t]
        direction = direction[sel_t]
        throughput = throughput[sel_t]
        # recompute the hit distance from the (constant) triangle plane so
        # that the hit point stays on the surface under pose perturbations,
        # and the barycentrics from the hit point so texture/normal lookups
        # move with it
        gn = cache.face_normal[tri_t]
        p0 = cache.p0[tri_t]
        denom = (direction * gn).sum(1, keepdim=True)
        t_c = ((p0 - origin) * gn).sum(1, keepdim=True) / \
            torch.where(denom.abs() > 1e-12, denom, torch.full_like(denom, 1e-12))
        x = origin + t_c * direction
        rel = x - p0
        bu_c = (rel * cache.dual_u[tri_t]).sum(1, keepdim=True)
        bv_c = (rel * cache.dual_v[tri_t]).sum(1, keepdim=True)
        bw_c = 1.0 - bu_c - bv_c
        n_interp = bw_c * cache.n0[tri_t] + bu_c * cache.n1[tri_t] + bv_c * cache.n2[tri_t]
        n_interp = n_interp / torch.linalg.norm(n_interp, dim=1, keepdim=True).clamp_min(1e-12)
        uv = bw_c * cache.uv0[tri_t] + bu_c * cache.uv1[tri_t] + bv_c * cache.uv2[tri_t]

        th, tw = bc_tex.shape[0], bc_tex.shape[1]
        tex_xy = torch.stack([uv[:, 0] * tw, (1.0 - uv[:, 1]) * th], dim=1)
        bc = bilinear_sample(bc_tex, tex_xy)
        rough = bilinear_sample(rough_tex, tex_xy)
        metal = bilinear_sample(metal_tex, tex_xy)
        nm = bilinear_sample(nm_tex, tex_xy)
        n_s = shading_normal(n_interp, cache.tangent[tri_t],
                             cache.bitangent[tri_t], nm, gn)
        frame_t, frame_b = _make_frame(n_s)

        wo_world = -direction
        wo_local = _to_local(wo_world, frame_t, frame_b, n_s)

        # --- next-event estimation toward the projector pinhole
        to_p = emitter.center - x
        d2 = (to_p * to_p).sum(1)
        dist = torch.sqrt(d2)
        wi_w = to_p / dist[:, None]
        cos_s = (n_s * wi_w).sum(1)
        cos_geom = (gn * wi_w).sum(1)
        cos_p = (-(wi_w) * emitter.axis).sum(1)
        xp_pix, inside = emitter.project(x)
        facing = (cos_s > 0) & (cos_geom > 0) & (cos_p > 0) & inside

        x_np = x.detach().numpy().astype(np.float64)
        gn_np = gn.detach().numpy().astype(np.float64)
        wi_np = wi_w.detach().numpy().astype(np.float64)
        sh_origin = x_np + cache.eps * gn_np
        occluded = bvh_mod.occluded_batch(
            cache.bvh, cache.derived, sh_origin, wi_np,
            np.maximum(dist.detach().numpy() - 2.0 * cache.eps, 0.0))
        vis = torch.as_tensor((~occluded) & facing.detach().numpy(), dtype=dtype)

        ip_val = bilinear_sample(emitter.image, xp_pix)
        radiance = prf_apply(ip_val, emitter.gamma_p, k)
        wi_local = _to_local(wi_w, frame_t, frame_b, n_s)
        f_nee = eval_brdf(wi_local, wo_local, bc, rough, metal, lambertian)
        contrib = throughput * f_nee * radiance * \
            (vis * cos_s.clamp_min(0.0) * cos_p.clamp_min(0.0) / d2)[:, None]
        if settings.clipping_enabled:
            contrib = radiance_clip(contrib, k, wb)
            assert contrib.detach().max().item() <= clip_thr.detach().item() * (1 + 1e-5)
        finite = torch.isfinite(contrib).all(dim=1, keepdim=True)
        dropped += int((~finite).sum())
        contrib = torch.where(finite, contrib, torch.zeros_like(contrib))
        irradiance = irradiance.index_add(0, torch.as_tensor(active), contrib)

        # --- BRDF-sampled continuation
        if depth + 1 >= settings.max_depth:
            break
        u = torch.as_tensor(bounce_u[depth][active], dtype=dtype)
        with torch.no_grad():
            s = sample_brdf(wo_local.detach(), bc.detach(), rough.detach(),
                            metal.detach(), u, lambertian)
            wi_b = (s.wi[:, 0:1] * frame_t + s.wi[:, 1:2] * frame_b
                    + s.wi[:, 2:3] * n_s).detach()
            pdf = s.pdf
        cos_b = (n_s * wi_b).sum(1)
        cos_b_geom = (gn * wi_b).sum(1).detach()
        alive_t = (pdf > 1e-12) & (cos_b.detach() > 0) & (cos_b_geom > 0)
        alive = alive_t.numpy()
        if not alive.any():
            break
        wi_local_diff = _to_local(wi_b, frame_t, frame_b, n_s)
        f_b = eval_brdf(wi_local_diff, wo_local, bc, rough, metal, lambertian)
        weight = f_b * (cos_b / pdf.clamp_min(1e-12))[:, None]
        throughput = throughput * weight

        sel2 = np.nonzero(alive)[0]
        sel2_t = torch.as_tensor(sel2)
        active = active[sel2]
        origin = (x + cache.eps * gn)[sel2_t]
        direction = wi_b[sel2_t]
        throughput = throughput[sel2_t]
        origin_np = origin.detach().numpy().astype(np.float64)
        direction_np = direction.detach().numpy().astype(np.float64)

    e_pixel = irradiance.view(npix, spp, 3).sum(dim=1) / spp
    img = crf_apply(e_pixel, g_c, wb, gamma_c)
    return img, dropped


def render_aux(scene, dtype=torch.float32) -> AuxBuffers:
    """Deterministic guidance buffers from one centered ray per pixel."""
    with torch.no_grad():
        cache = get_cache(scene, dtype)
        mats = scene.params.materialize()
        cam = scene.camera
        w_cam, h_cam = cam.resolution
        pose = mats["pose"]
        r_ref = rodrigues(pose[:3]).to(dtype)
        t_ref = pose[3:].to(dtype)

        ys, xs = np.mgrid[0:h_cam, 0:w_cam]
        px = xs.reshape(-1) + 0.5
        py = ys.reshape(-1) + 0.5
        kinv = np.linalg.inv(cam.K)
        d_cam = np.stack([px, py, np.ones(px.size)], axis=1) @ kinv.T
        d = torch.as_tensor(d_cam, dtype=dtype) @ r_ref
        d = d / torch.linalg.norm(d, dim=1, keepdim=True)
        o = (-(r_ref.T @ t_ref)).expand(px.size, 3)

        t_hit, tri, bu, bv = bvh_mod.intersect_batch(
            cache.bvh, cache.derived, o.numpy().astype(np.float64),
            d.numpy().astype(np.float64))
        hit = tri >= 0
        albedo = np.zeros((px.size, 3), dtype=np.float32)
        normal = np.zeros((px.size, 3), dtype=np.float32)
        depth = np.zeros(px.size, dtype=np.float32)
        if hit.any():
            sel = np.nonzero(hit)[0]
            sel_t = torch.as_tensor(sel)
            tri_t = torch.as_tensor(tri[sel])
            bu_c = torch.as_tensor(bu[sel], dtype=dtype)[:, None]
            bv_c = torch.as_tensor(bv[sel], dtype=dtype)[:, None]
            bw_c = 1.0 - bu_c - bv_c
            uv = bw_c * cache.uv0[tri_t] + bu_c * cache.uv1[tri_t] + bv_c * cache.uv2[tri_t]
            bc_tex = mats["base_color"].to(dtype)
            th, tw = bc_tex.shape[0], bc_tex.shape[1]
            tex_xy = torch.stack([uv[:, 0] * tw, (1.0 - uv[:, 1]) * th], dim=1)
            albedo[sel] = bilinear_sample(bc_tex, tex_xy).numpy()
            n_interp = bw_c * cache.n0[tri_t] + bu_c * cache.n1[tri_t] + bv_c * cache.n2[tri_t]
            n_interp = n_interp / torch.linalg.norm(n_interp, dim=1, keepdim=True).clamp_min(1e-12)
            nm = bilinear_sample(mats["normal_map"].to(dtype), tex_xy)
            n_s = shading_normal(n_interp, cache.tangent[tri_t],
                                 cache.bitangent[tri_t], nm,
                                 cache.face_normal[tri_t])
            normal[sel] = n_s.numpy()
            depth[sel] = t_hit[sel].astype(np.float32)
        return AuxBuffers(albedo=albedo.reshape(h_cam, w_cam, 3),
                          normal=normal.reshape(h_cam, w_cam, 3),
                          depth=depth.reshape(h_cam, w_cam),
                          mask=hit.reshape(h_cam, w_cam))
