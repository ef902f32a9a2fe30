"""Reverse-mode gradients of rendering losses via path replay.

The primal render runs without building an autograd graph. ``backward`` then
re-traces the image tile by tile with the recorded seed — each tile's RNG
stream depends only on (seed, tile id), so the replay reproduces the primal
samples bitwise — and back-propagates the loss adjoint through the
differentiable re-render. Peak memory is bounded by one tile's graph instead
of the whole image's.

Sampling decisions are detached (see :mod:`.render`): gradients flow through
radiance values, response curves, textures and the normal perturbation, but
not through lobe choices, sampled directions or their densities. Clipped
samples receive exactly zero upstream radiance gradient (min-subgradient).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import MissingRecordError, NumericalError
from .render import RenderSettings, render


@contextlib.contextmanager
def deterministic_backward():
    """Force deterministic autograd kernels for the duration of the block.

    The texture-gradient scatter (index backward) is otherwise accumulated
    in a thread-count-dependent order, which breaks bitwise reproducibility
    across thread counts.
    """
    prev = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)


@dataclass
class RenderRecord:
    """Everything needed to replay a forward render for its backward pass."""
    scene: object
    input_image: torch.Tensor
    settings: RenderSettings
    image: torch.Tensor            # primal result, detached
    differentiable: bool = True


@dataclass
class ParamGrads:
    """Gradients per parameter leaf, plus optionally d/d(projector input)."""
    grads: dict[str, torch.Tensor] = field(default_factory=dict)
    input_grad: torch.Tensor | None = None

    def finite(self) -> bool:
        ok = all(torch.isfinite(g).all() for g in self.grads.values())
        if self.input_grad is not None:
            ok = ok and bool(torch.isfinite(self.input_grad).all())
        return bool(ok)


class GradientTape:
    """Pairs a primal render with its tile-replayed backward pass."""

    def __init__(self, scene):
        self.scene = scene

    def forward(self, I_p, settings: RenderSettings,
                stats: dict | None = None) -> RenderRecord:
        img = render(self.scene, I_p, settings, differentiable=False, stats=stats)
        return RenderRecord(scene=self.scene, input_image=I_p,
                            settings=settings, image=img.detach())

    def backward(self, record: RenderRecord, adjoint: torch.Tensor,
                 wrt_input: bool = False) -> ParamGrads:
        """Accumulate d(loss)/d(leaves) given d(loss)/d(image).

        ``adjoint`` has the primal image's shape. Gradients accumulate into
        the leaves' ``.grad`` fields (zero them between optimizer steps) and
        are also returned. With ``wrt_input`` the projector input image must
        be a leaf tensor with ``requires_grad``.
        """
        if record is None or not record.differentiable:
            raise MissingRecordError(
                "backward requires a record from a differentiable-mode forward")
        scene = record.scene
        settings = record.settings
        w_cam, h_cam = scene.camera.resolution
        npix = w_cam * h_cam
        adj = adjoint.reshape(npix, 3)
        I_p = record.input_image
        if wrt_input and not (isinstance(I_p, torch.Tensor) and I_p.requires_grad):
            raise MissingRecordError(
                "wrt_input requires the projector input to be a grad leaf")

        n_tiles = (npix + settings.tile_size - 1) // settings.tile_size
        with deterministic_backward():
            for tile in range(n_tiles):
                rows = render(scene, I_p, settings, differentiable=True,
                              tile_range=(tile, tile + 1))
                lo = tile * settings.tile_size
                a = adj[lo:lo + rows.shape[0]].to(rows.dtype)
                if rows.requires_grad:
                    torch.autograd.backward(rows, grad_tensors=a)

        grads = {}
        for name, leaf in scene.params.leaves().items():
            grads[name] = (leaf.grad.detach().clone() if leaf.grad is not None
                           else torch.zeros_like(leaf))
        input_grad = None
        if wrt_input:
            input_grad = (I_p.grad.detach().clone() if I_p.grad is not None
                          else torch.zeros_like(I_p))
        pg = ParamGrads(grads=grads, input_grad=input_grad)
        if not pg.finite():
            raise NumericalError("non-finite gradient in backward pass")
        return pg

    def zero_grad(self) -> None:
        for leaf in self.scene.params.leaves().values():
            leaf.grad = None


def _loss_and_image(scene, I_p, settings):
    img = render(scene, I_p, settings, differentiable=False)
    return img.double().mean().item()


def fd_check(scene, I_p, settings: RenderSettings, selectors,
             h: float = 1e-3) -> list[dict]:
    """Compare replayed-AD gradients against central finite differences.

    ``selectors`` is a list of (name, index) pairs where ``name`` is a
    constrained parameter field (checked in direct mode, so the derivative is
    w.r.t. the physical value, not the latent) or ``"input"`` for a projector
    input pixel; ``index`` is a flat or tuple index into that tensor. The
    loss is the image mean; both sides share random numbers through the seed.
    Returns one report row per selector with ad, fd and relative error.
    """
    scene.params.set_direct_mode()
    try:
        I_p = I_p.detach().clone().requires_grad_(True)
        tape = GradientTape(scene)
        record = tape.forward(I_p, settings)
        npix = record.image.shape[0] * record.image.shape[1]
        adjoint = torch.full_like(record.image, 1.0 / (npix * 3))
        tape.zero_grad()
        pg = tape.backward(record, adjoint, wrt_input=True)

        rows = []
        for name, index in selectors:
            if name == "input":
                grad_t, value_t = pg.input_grad, I_p
            else:
                grad_t, value_t = pg.grads[name], scene.params.leaves()[name]
            idx = tuple(np.atleast_1d(index)) if not np.isscalar(index) else (index,)
            if value_t.dim() == 0:
                idx = ()
            ad = float(grad_t[idx]) if idx else float(grad_t)

            with torch.no_grad():
                orig = float(value_t[idx]) if idx else float(value_t)
                _assign(value_t, idx, orig + h)
                f_plus = _loss_and_image(scene, I_p, settings)
                _assign(value_t, idx, orig - h)
                f_minus = _loss_and_image(scene, I_p, settings)
                _assign(value_t, idx, orig)
            fd = (f_plus - f_minus) / (2.0 * h)
            denom = max(abs(fd), abs(ad), 1e-12)
            rel = abs(ad - fd) / denom if max(abs(fd), abs(ad)) > 0 else 0.0
            rows.append({"param": name, "index": index, "ad": ad, "fd": fd,
                         "rel_err": rel})
        return rows
    finally:
        scene.params.set_latent_mode()


def _assign(tensor: torch.Tensor, idx, value: float) -> None:
    if idx:
        tensor.data[idx] = value
    else:
        tensor.data.fill_(value)
