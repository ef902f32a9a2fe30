"""Nonlinear responses at both ends of the pipeline.

The projector response turns an LDR input pixel into emitted radiance
(per-channel gamma, scaled by the projector intensity constant); the camera
response turns captured irradiance into an LDR pixel (exposure, white balance,
per-channel gamma). All functions are torch-based and differentiable; a value
of exactly zero propagates a zero gradient rather than the diverging true
derivative.
"""

from __future__ import annotations

import torch

_EPS = 1e-12


def _safe_pow(base: torch.Tensor, exponent: torch.Tensor) -> torch.Tensor:
    """base ** exponent with value 0 and gradient 0 where base <= 0."""
    positive = base > 0
    safe = torch.where(positive, base, torch.ones_like(base))
    out = torch.exp(exponent * torch.log(safe.clamp_min(_EPS)))
    return torch.where(positive, out, torch.zeros_like(out))


def prf_apply(pixel: torch.Tensor, gamma_p: torch.Tensor, k) -> torch.Tensor:
    """Projector response: emitted radiance = k * pixel^gamma_p per channel.

    ``pixel`` is (..., 3) in [0, 1] (clamped defensively); ``gamma_p`` is a
    3-vector broadcast over leading dims; ``k`` is the projector intensity
    scale.
    """
    pixel = pixel.clamp(0.0, 1.0)
    return k * _safe_pow(pixel, gamma_p)


def crf_apply(irradiance: torch.Tensor, g_c, w: torch.Tensor,
              gamma_c: torch.Tensor) -> torch.Tensor:
    """Camera response: LDR pixel = clamp((g_c * w * E)^gamma_c, 0, 1).

    Saturated pixels clamp with zero gradient, so overexposed regions do not
    push gradients.
    """
    scaled = g_c * w * irradiance.clamp_min(0.0)
    return _safe_pow(scaled, gamma_c).clamp(0.0, 1.0)


def radiance_clip(contribution: torch.Tensor, k, w: torch.Tensor) -> torch.Tensor:
    """Clamp a per-sample radiance contribution at k / min(w) per channel.

    Applied to each Monte Carlo sample before pixel accumulation; suppresses
    fireflies from low-probability, high-contribution paths. Where a sample is
    clipped its upstream radiance gradient is zero (subgradient of min).
    """
    w = torch.as_tensor(w, dtype=contribution.dtype)
    threshold = k / torch.min(w)
    return torch.minimum(contribution, threshold)
