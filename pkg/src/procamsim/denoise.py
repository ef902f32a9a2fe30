"""Cross-bilateral denoising guided by noise-free auxiliary buffers.

The filter output is a convex combination of input pixels inside a square
window: weights combine a spatial Gaussian with range Gaussians on the
guidance albedo, normal and depth buffers, which are treated as constants.
Gradients therefore propagate to the noisy radiance image only, with
non-negative weights that sum to one per pixel — the operation can never
amplify the input range.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ResolutionMismatchError
from .render import AuxBuffers


@dataclass
class DenoiseSettings:
    radius: int = 3
    sigma_spatial: float = 2.0
    sigma_albedo: float = 0.1
    sigma_normal: float = 0.2
    sigma_depth_frac: float = 0.05   # fraction of the guide depth range
    enabled: bool = True

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("radius must be >= 0")
        if min(self.sigma_spatial, self.sigma_albedo, self.sigma_normal,
               self.sigma_depth_frac) <= 0:
            raise ValueError("sigmas must be > 0")


def denoise(image: torch.Tensor, aux: AuxBuffers,
            settings: DenoiseSettings | None = None) -> torch.Tensor:
    """Filter an (H, W, 3) image; differentiable w.r.t. ``image`` only."""
    settings = settings or DenoiseSettings()
    h, w, _ = image.shape
    if aux.albedo.shape[:2] != (h, w):
        raise ResolutionMismatchError(
            "auxiliary buffers do not match the image resolution")
    r = settings.radius
    if r == 0 or not settings.enabled:
        return image

    dtype = image.dtype
    albedo = torch.as_tensor(aux.albedo, dtype=dtype)
    normal = torch.as_tensor(aux.normal, dtype=dtype)
    depth = torch.as_tensor(aux.depth, dtype=dtype)
    mask = torch.as_tensor(aux.mask.astype(np.float32), dtype=dtype)

    d_valid = depth[aux.mask] if aux.mask.any() else depth.reshape(-1)
    d_range = float(d_valid.max() - d_valid.min()) if d_valid.numel() else 0.0
    sigma_d = max(settings.sigma_depth_frac * d_range, 1e-6)

    inv2ss = 1.0 / (2.0 * settings.sigma_spatial ** 2)
    inv2sa = 1.0 / (2.0 * settings.sigma_albedo ** 2)
    inv2sn = 1.0 / (2.0 * settings.sigma_normal ** 2)
    inv2sd = 1.0 / (2.0 * sigma_d ** 2)

    num = torch.zeros_like(image)
    den = torch.zeros(h, w, dtype=dtype)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            img_s = _shift(image, dy, dx)
            alb_s = _shift(albedo, dy, dx)
            nrm_s = _shift(normal, dy, dx)
            dep_s = _shift(depth, dy, dx)
            msk_s = _shift(mask, dy, dx)
            w_g = (
                -(dy * dy + dx * dx) * inv2ss
                - ((alb_s - albedo) ** 2).sum(-1) * inv2sa
                - ((nrm_s - normal) ** 2).sum(-1) * inv2sn
                - (dep_s - depth) ** 2 * inv2sd
            ).exp() * msk_s
            num = num + img_s * w_g[:, :, None]
            den = den + w_g
    # the center tap (dy=dx=0, weight msk) guarantees den > 0 on the mask;
    # off-mask pixels fall back to the input
    out = num / den.clamp_min(1e-20)[:, :, None]
    return torch.where(torch.as_tensor(aux.mask)[:, :, None], out, image)


def _shift(t: torch.Tensor, dy: int, dx: int) -> torch.Tensor:
    """Shift rows/cols with edge replication (no wraparound)."""
    h = t.shape[0]
    w = t.shape[1]
    ys = torch.arange(h) + dy
    xs = torch.arange(w) + dx
    ys = ys.clamp(0, h - 1)
    xs = xs.clamp(0, w - 1)
    return t[ys][:, xs]
