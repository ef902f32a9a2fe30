"""Inverse rendering: parameter training, relighting and compensation.

Training minimizes the mean-L1 pixel loss between denoised renders and
captured targets plus a total-variation penalty on the material maps, using
Adam on the unconstrained latents with per-group learning rates. Because the
latents pass through bounded squashing maps, every parameter respects its
bounds at every step by construction.

Compensation optimizes the projector input image itself for a fixed scene,
initialized by warping the target through the geometric correspondence and
projected back into [0, 1] after every step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .brdf import tv_loss
from .denoise import DenoiseSettings, denoise
from .errors import NumericalError, ResolutionMismatchError, ValidationError
from .render import RenderSettings, render, render_aux
from .tape import GradientTape, deterministic_backward


@dataclass
class TrainConfig:
    iterations: int = 200
    batch_size: int = 1
    lr_textures: float = 1e-2
    lr_response: float = 5e-3
    lr_pose: float = 1e-4
    lambda_reg: float = 1e-2
    spp: int = 16
    max_depth: int = 4
    seed: int = 0
    tile_size: int = 16384
    clipping_enabled: bool = True
    denoise: DenoiseSettings = field(default_factory=DenoiseSettings)
    dtype: torch.dtype = torch.float32

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1:
            raise ValidationError("iterations and batch_size must be >= 1")
        if min(self.lr_textures, self.lr_response, self.lr_pose) <= 0:
            raise ValidationError("learning rates must be > 0")


_RESPONSE_FIELDS = ("gamma_p", "gamma_c", "white_balance")


def _check_pairs(scene, inputs, targets):
    if len(inputs) != len(targets) or len(inputs) < 1:
        raise ValidationError("need K >= 1 matching (input, target) pairs")
    wp, hp = scene.projector.resolution
    wc, hc = scene.camera.resolution
    for i, (ip, tc) in enumerate(zip(inputs, targets)):
        if tuple(np.shape(ip)[:2]) != (hp, wp):
            raise ResolutionMismatchError(f"input {i} is not projector-resolution")
        if tuple(np.shape(tc)[:2]) != (hc, wc):
            raise ResolutionMismatchError(f"target {i} is not camera-resolution")


def _settings(cfg: TrainConfig, seed: int) -> RenderSettings:
    return RenderSettings(spp=cfg.spp, max_depth=cfg.max_depth,
                          clipping_enabled=cfg.clipping_enabled, seed=seed,
                          tile_size=cfg.tile_size, dtype=cfg.dtype)


def _assert_bounds(scene) -> None:
    vals = scene.params.values()
    for name, (lo, hi) in scene.params.bounds.items():
        v = vals[name]
        assert v.min() >= lo - 1e-9 and v.max() <= hi + 1e-9, \
            f"{name} escaped [{lo}, {hi}]"


def train(scene, inputs, targets, cfg: TrainConfig):
    """Fit the scene parameters to K (projector input, camera capture) pairs.

    Returns ``(scene.params, history)`` where history holds one dict per
    iteration with the pixel, regularizer and total loss.
    """
    _check_pairs(scene, inputs, targets)
    latents = scene.params.latents()
    groups = [
        {"params": [latents[n] for n in scene.params.TEXTURE_FIELDS],
         "lr": cfg.lr_textures},
        {"params": [latents[n] for n in _RESPONSE_FIELDS], "lr": cfg.lr_response},
        {"params": [latents["pose"]], "lr": cfg.lr_pose},
    ]
    opt = torch.optim.Adam(groups, betas=(0.9, 0.999), eps=1e-8)
    tape = GradientTape(scene)
    inputs_t = [torch.as_tensor(np.asarray(ip), dtype=cfg.dtype) for ip in inputs]
    targets_t = [torch.as_tensor(np.asarray(tc), dtype=cfg.dtype) for tc in targets]

    history = []
    for it in range(cfg.iterations):
        rng = np.random.default_rng([cfg.seed, it])
        batch = rng.choice(len(inputs_t), size=min(cfg.batch_size, len(inputs_t)),
                           replace=False)
        opt.zero_grad()
        tape.zero_grad()
        aux = render_aux(scene, dtype=cfg.dtype)

        pixel_loss = 0.0
        for j, idx in enumerate(batch):
            seed = int(rng.integers(0, 2**31 - 1))
            record = tape.forward(inputs_t[idx], _settings(cfg, seed))
            primal = record.image.detach().clone().requires_grad_(True)
            with deterministic_backward():
                out = denoise(primal, aux, cfg.denoise)
                loss_j = (out - targets_t[idx]).abs().mean() / len(batch)
                loss_j.backward()
            tape.backward(record, primal.grad)
            pixel_loss += float(loss_j.detach())

        mats = scene.params.materialize()
        reg = tv_loss([mats[n] for n in scene.params.TEXTURE_FIELDS])
        if cfg.lambda_reg > 0:
            with deterministic_backward():
                (cfg.lambda_reg * reg).backward()
        total = pixel_loss + cfg.lambda_reg * float(reg.detach())
        if not np.isfinite(total):
            grad_dump = {n: float(t.grad.abs().max()) if t.grad is not None else 0.0
                         for n, t in latents.items()}
            raise NumericalError(f"non-finite loss at iteration {it}; "
                                 f"last gradient maxima: {grad_dump}")
        opt.step()
        _assert_bounds(scene)
        history.append({"iter": it, "loss_pixel": pixel_loss,
                        "loss_tv": float(reg.detach()), "loss_total": total})
    return scene.params, history


def relight(scene, I_p, settings: RenderSettings,
            denoise_settings: DenoiseSettings | None = None) -> torch.Tensor:
    """Forward-render a novel projector input with the current parameters."""
    img = render(scene, torch.as_tensor(np.asarray(I_p), dtype=settings.dtype),
                 settings)
    if denoise_settings is not None and denoise_settings.enabled:
        img = denoise(img, render_aux(scene, dtype=settings.dtype),
                      denoise_settings)
    return img.detach()


def warp_target_to_projector(scene, target: torch.Tensor,
                             fill: float = 0.5):
    """Initialize compensation by splatting the target into projector space.

    Each camera pixel's primary hit is projected into the projector; the
    target color is averaged into the nearest projector texel. Texels no
    camera pixel reaches keep the ``fill`` gray. Returns (image, footprint
    mask) as numpy arrays.
    """
    from .render import get_cache, _Emitter

    dtype = torch.float32
    aux = render_aux(scene, dtype=dtype)
    cache = get_cache(scene, dtype)
    mats = scene.params.materialize()
    emitter = _Emitter(scene, mats,
                       torch.zeros((scene.projector.resolution[1],
                                    scene.projector.resolution[0], 3)), dtype)
    wc, hc = scene.camera.resolution
    ys, xs = np.mgrid[0:hc, 0:wc]
    # reconstruct hit points from the aux depth along centered rays
    from .geometry import unproject_grid, rodrigues

    pose = mats["pose"].detach()
    r_ref = rodrigues(pose[:3]).numpy()
    d = unproject_grid(np.stack([xs.reshape(-1) + 0.5, ys.reshape(-1) + 0.5],
                                axis=1), scene.camera.K) @ r_ref
    o = -r_ref.T @ pose[3:].numpy()
    x = o[None, :] + d * aux.depth.reshape(-1)[:, None]
    with torch.no_grad():
        pix, inside = emitter.project(torch.as_tensor(x, dtype=dtype))
    ok = aux.mask.reshape(-1) & inside.numpy()
    wp, hp = scene.projector.resolution
    px = np.clip(pix[:, 0].numpy().astype(np.int64), 0, wp - 1)[ok]
    py = np.clip(pix[:, 1].numpy().astype(np.int64), 0, hp - 1)[ok]
    tgt = np.asarray(target, dtype=np.float64).reshape(-1, 3)[ok]

    acc = np.zeros((hp, wp, 3))
    cnt = np.zeros((hp, wp))
    np.add.at(acc, (py, px), tgt)
    np.add.at(cnt, (py, px), 1.0)
    footprint = cnt > 0
    img = np.full((hp, wp, 3), fill, dtype=np.float32)
    img[footprint] = (acc[footprint] / cnt[footprint, None]).astype(np.float32)
    return img, footprint


def compensate(scene, target, iterations: int = 100, lr: float = 5e-2,
               settings: RenderSettings | None = None, init=None):
    """Solve for the projector input whose render matches ``target``.

    Projected Adam on the input image (clamped to [0, 1] each step),
    initialized from the geometric warp of the target unless ``init`` is
    given. Returns (input image, its render, loss history).
    """
    settings = settings or RenderSettings(spp=8, max_depth=2)
    wc, hc = scene.camera.resolution
    target_t = torch.as_tensor(np.asarray(target), dtype=settings.dtype)
    if tuple(target_t.shape[:2]) != (hc, wc):
        raise ResolutionMismatchError("compensation target is not camera-resolution")

    if init is None:
        init, _ = warp_target_to_projector(scene, target_t)
    I_p = torch.as_tensor(np.asarray(init), dtype=settings.dtype) \
        .clone().clamp_(0.0, 1.0).requires_grad_(True)
    opt = torch.optim.Adam([I_p], lr=lr)
    tape = GradientTape(scene)

    history = []
    for it in range(iterations):
        seed = settings.seed + it
        s = RenderSettings(spp=settings.spp, max_depth=settings.max_depth,
                           clipping_enabled=settings.clipping_enabled,
                           seed=seed, tile_size=settings.tile_size,
                           dtype=settings.dtype)
        opt.zero_grad()
        record = tape.forward(I_p, s)
        primal = record.image.detach().clone().requires_grad_(True)
        loss = (primal - target_t).abs().mean()
        loss.backward()
        tape.backward(record, primal.grad, wrt_input=True)
        opt.step()
        with torch.no_grad():
            I_p.clamp_(0.0, 1.0)
        history.append({"iter": it, "loss": float(loss.detach())})

    result = I_p.detach()
    final = render(scene, result, settings).detach()
    return result, final, history
