"""Principled BRDF subset: diffuse + GGX microfacet specular.

All functions work in the local shading frame (+z = shading normal) on torch
tensors batched over the leading dimension, and are differentiable w.r.t.
base_color/roughness/metallic. The diffuse lobe carries a Schlick Fresnel
coupling term so the total reflectance stays bounded by the base color for
dielectrics; F0 = mix(0.04, base_color, metallic).

Sampling mixes a cosine-weighted diffuse lobe with a GGX visible-normal
(VNDF) specular lobe. The specular selection weight fades linearly with
roughness for dielectrics: at full roughness the dielectric specular lobe is
broad enough that cosine sampling covers it, and the mixture then reduces to
a pure cosine sampler.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

PI = 3.141592653589793
_DIELECTRIC_F0 = 0.04
_MIN_COS = 1e-7


@dataclass
class BrdfSample:
    wi: torch.Tensor       # (N, 3) local frame
    f: torch.Tensor        # (N, 3) BRDF value
    pdf: torch.Tensor      # (N,)
    lobe: torch.Tensor     # (N,) int8: 0 diffuse, 1 specular


def luminance(rgb: torch.Tensor) -> torch.Tensor:
    return 0.2126 * rgb[..., 0] + 0.7152 * rgb[..., 1] + 0.0722 * rgb[..., 2]


def _schlick(f0, cos):
    return f0 + (1.0 - f0) * (1.0 - cos).clamp(0.0, 1.0) ** 5


def _ggx_d(alpha2, cos_h):
    c2 = cos_h * cos_h
    denom = c2 * (alpha2 - 1.0) + 1.0
    return alpha2 / (PI * denom * denom).clamp_min(1e-20)


def _smith_lambda(alpha2, cos):
    c2 = (cos * cos).clamp_min(_MIN_COS)
    tan2 = (1.0 - c2) / c2
    return 0.5 * (torch.sqrt(1.0 + alpha2 * tan2) - 1.0)


def _f0(base_color, metallic):
    return _DIELECTRIC_F0 * (1.0 - metallic[..., None]) + base_color * metallic[..., None]


def _lobe_weights(base_color, roughness, metallic, lambertian):
    """Mixture weights for the sampler; returns specular selection prob."""
    if lambertian:
        return torch.zeros_like(roughness)
    d_w = (1.0 - metallic) * luminance(base_color)
    s_w = luminance(_f0(base_color, metallic)) * \
        (1.0 - (1.0 - metallic) * roughness)
    total = d_w + s_w
    return torch.where(total > 0, s_w / total.clamp_min(1e-12),
                       torch.zeros_like(total))


def eval_brdf(wi: torch.Tensor, wo: torch.Tensor, base_color: torch.Tensor,
              roughness: torch.Tensor, metallic: torch.Tensor,
              lambertian: bool = False) -> torch.Tensor:
    """BRDF value f_r(wi, wo) in 1/sr, (N, 3); zero below the hemisphere."""
    cos_i = wi[:, 2]
    cos_o = wo[:, 2]
    valid = (cos_i > 0) & (cos_o > 0)
    if lambertian:
        f = base_color / PI
        return torch.where(valid[:, None], f, torch.zeros_like(f))

    cos_i_c = cos_i.clamp_min(_MIN_COS)
    cos_o_c = cos_o.clamp_min(_MIN_COS)
    # diffuse with Fresnel coupling (reciprocal by symmetry)
    couple = (1.0 - _schlick(_DIELECTRIC_F0, cos_i_c)) * \
        (1.0 - _schlick(_DIELECTRIC_F0, cos_o_c))
    diffuse = (1.0 - metallic[:, None]) * base_color / PI * couple[:, None]

    h = wi + wo
    h = h / torch.linalg.norm(h, dim=1, keepdim=True).clamp_min(1e-12)
    alpha = (roughness * roughness).clamp_min(1e-6)
    alpha2 = alpha * alpha
    d = _ggx_d(alpha2, h[:, 2].clamp(0.0, 1.0))
    g2 = 1.0 / (1.0 + _smith_lambda(alpha2, cos_i_c) + _smith_lambda(alpha2, cos_o_c))
    f = _schlick(_f0(base_color, metallic), (wi * h).sum(dim=1).clamp(0.0, 1.0)[:, None])
    spec = f * (d * g2 / (4.0 * cos_i_c * cos_o_c))[:, None]

    out = diffuse + spec
    return torch.where(valid[:, None], out, torch.zeros_like(out))


def pdf_brdf(wi: torch.Tensor, wo: torch.Tensor, base_color: torch.Tensor,
             roughness: torch.Tensor, metallic: torch.Tensor,
             lambertian: bool = False) -> torch.Tensor:
    """Density of :func:`sample_brdf`'s mixture; zero below the hemisphere."""
    cos_i = wi[:, 2]
    cos_o = wo[:, 2]
    valid = (cos_i > 0) & (cos_o > 0)
    pdf_diff = cos_i.clamp_min(0.0) / PI
    p_spec = _lobe_weights(base_color, roughness, metallic, lambertian)

    h = wi + wo
    h = h / torch.linalg.norm(h, dim=1, keepdim=True).clamp_min(1e-12)
    alpha = (roughness * roughness).clamp_min(1e-6)
    alpha2 = alpha * alpha
    d = _ggx_d(alpha2, h[:, 2].clamp(0.0, 1.0))
    g1_o = 1.0 / (1.0 + _smith_lambda(alpha2, cos_o.clamp_min(_MIN_COS)))
    pdf_spec = g1_o * d / (4.0 * cos_o.clamp_min(_MIN_COS))

    pdf = (1.0 - p_spec) * pdf_diff + p_spec * pdf_spec
    return torch.where(valid, pdf, torch.zeros_like(pdf))


def _sample_ggx_vndf(wo, alpha, u1, u2):
    """Visible-normal GGX sampling (Heitz 2018), local frame."""
    vh = torch.stack([alpha * wo[:, 0], alpha * wo[:, 1], wo[:, 2]], dim=1)
    vh = vh / torch.linalg.norm(vh, dim=1, keepdim=True).clamp_min(1e-12)
    lensq = vh[:, 0] ** 2 + vh[:, 1] ** 2
    inv = 1.0 / torch.sqrt(lensq.clamp_min(1e-20))
    t1 = torch.where(lensq[:, None] > 1e-14,
                     torch.stack([-vh[:, 1] * inv, vh[:, 0] * inv,
                                  torch.zeros_like(inv)], dim=1),
                     torch.tensor([1.0, 0.0, 0.0], dtype=wo.dtype).expand_as(vh))
    t2 = torch.cross(vh, t1, dim=1)
    r = torch.sqrt(u1)
    phi = 2.0 * PI * u2
    p1 = r * torch.cos(phi)
    p2 = r * torch.sin(phi)
    s = 0.5 * (1.0 + vh[:, 2])
    p2 = (1.0 - s) * torch.sqrt((1.0 - p1 * p1).clamp_min(0.0)) + s * p2
    p3 = torch.sqrt((1.0 - p1 * p1 - p2 * p2).clamp_min(0.0))
    nh = p1[:, None] * t1 + p2[:, None] * t2 + p3[:, None] * vh
    ne = torch.stack([alpha * nh[:, 0], alpha * nh[:, 1],
                      nh[:, 2].clamp_min(1e-8)], dim=1)
    return ne / torch.linalg.norm(ne, dim=1, keepdim=True).clamp_min(1e-12)


def sample_brdf(wo: torch.Tensor, base_color: torch.Tensor,
                roughness: torch.Tensor, metallic: torch.Tensor,
                u: torch.Tensor, lambertian: bool = False) -> BrdfSample:
    """Draw an incident direction; ``u`` is (N, 3) uniform randoms
    (2 for the lobe shape + 1 for lobe selection)."""
    n = wo.shape[0]
    p_spec = _lobe_weights(base_color, roughness, metallic, lambertian)
    use_spec = u[:, 2] < p_spec

    # cosine-weighted diffuse
    r = torch.sqrt(u[:, 0].clamp(1e-12, 1.0 - 1e-12))
    phi = 2.0 * PI * u[:, 1]
    wi_diff = torch.stack([r * torch.cos(phi), r * torch.sin(phi),
                           torch.sqrt((1.0 - r * r).clamp_min(1e-12))], dim=1)

    # GGX VNDF specular
    alpha = (roughness * roughness).clamp_min(1e-6)
    h = _sample_ggx_vndf(wo, alpha, u[:, 0].clamp(1e-12, 1.0 - 1e-12), u[:, 1])
    wi_spec = 2.0 * (wo * h).sum(dim=1, keepdim=True) * h - wo

    wi = torch.where(use_spec[:, None], wi_spec, wi_diff)
    pdf = pdf_brdf(wi, wo, base_color, roughness, metallic, lambertian)
    f = eval_brdf(wi, wo, base_color, roughness, metallic, lambertian)
    lobe = use_spec.to(torch.int8)
    return BrdfSample(wi=wi, f=f, pdf=pdf, lobe=lobe)


def tv_loss(maps: dict[str, torch.Tensor] | list[torch.Tensor]) -> torch.Tensor:
    """Anisotropic (L1) total-variation penalty, summed over maps.

    Each map contributes the mean absolute horizontal texel difference plus
    the mean absolute vertical difference; constant maps contribute zero.
    """
    if isinstance(maps, dict):
        maps = list(maps.values())
    total = None
    for m in maps:
        if m.dim() == 2:
            m = m[:, :, None]
        dh = (m[:, 1:, :] - m[:, :-1, :]).abs().mean() if m.shape[1] > 1 else m.sum() * 0
        dv = (m[1:, :, :] - m[:-1, :, :]).abs().mean() if m.shape[0] > 1 else m.sum() * 0
        term = dh + dv
        total = term if total is None else total + term
    return total
