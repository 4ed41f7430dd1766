"""DDIM sampling with classifier-free guidance and plug-in HcP layers.

Inference is text-only: nothing in this module touches prior images.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from .backbone import HcPHook, NoiseSchedule, ToyBackbone
from .exceptions import ShapeError, ValidationError
from .tokens import PromptEncoder
from .training import Checkpoint, check_compatibility
from .validation import check_non_negative, check_positive_int, check_unit_interval


@dataclass
class SamplerConfig:
    steps: int = 50
    guidance_scale: float = 7.5
    eta: float = 0.0
    seed: int = 0
    gamma: Optional[float] = None
    num_images: int = 1
    T: int = 1000
    beta_schedule: str = "scaled_linear"

    def __post_init__(self):
        check_positive_int(self.steps, "steps")
        check_non_negative(self.guidance_scale, "guidance_scale")
        check_unit_interval(self.eta, "eta")
        check_positive_int(self.num_images, "num_images")
        if self.gamma is not None:
            check_unit_interval(self.gamma, "gamma")
        if self.steps >= self.T:
            raise ValidationError(f"steps={self.steps} must be smaller than T={self.T}")

    def to_dict(self) -> dict:
        return asdict(self)


def ddim_timesteps(steps: int, T: int) -> List[Tuple[int, int]]:
    """``(t, t_prev)`` pairs with a uniform stride, ending at the clean step 0."""
    stride = T // steps
    ts = [T - 1 - k * stride for k in range(steps)]
    return list(zip(ts, ts[1:] + [0]))


def ddim_step(z_t: torch.Tensor, eps_hat: torch.Tensor, t: int, t_prev: int, schedule: NoiseSchedule,
              eta: float = 0.0, noise: Optional[torch.Tensor] = None) -> torch.Tensor:
    if not t > t_prev >= 0:
        raise ValidationError(f"DDIM step needs t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    if z_t.shape != eps_hat.shape:
        raise ShapeError(f"shape mismatch: z_t {tuple(z_t.shape)} vs eps_hat {tuple(eps_hat.shape)}")
    a_t = schedule.alpha_bar(t)
    a_prev = schedule.alpha_bar(t_prev)
    x0 = (z_t - math.sqrt(1.0 - a_t) * eps_hat) / math.sqrt(a_t)
    sigma = eta * math.sqrt((1.0 - a_prev) / (1.0 - a_t)) * math.sqrt(1.0 - a_t / a_prev)
    z_prev = math.sqrt(a_prev) * x0 + math.sqrt(max(1.0 - a_prev - sigma ** 2, 0.0)) * eps_hat
    if sigma > 0:
        if noise is None:
            raise ValidationError("eta > 0 requires a noise tensor")
        z_prev = z_prev + sigma * noise
    return z_prev


def guided_epsilon(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, w: float) -> torch.Tensor:
    if eps_cond.shape != eps_uncond.shape:
        raise ShapeError(f"shape mismatch: {tuple(eps_cond.shape)} vs {tuple(eps_uncond.shape)}")
    return eps_uncond + w * (eps_cond - eps_uncond)


def attach_hcp(backbone: ToyBackbone, checkpoint: Checkpoint, gamma: Optional[float] = None,
               layer_map: Optional[Dict[str, str]] = None) -> ToyBackbone:
    """Route every cross-attention site of ``backbone`` through the checkpoint's HcP layers."""
    resolved = check_compatibility(checkpoint, backbone.descriptor, layer_map)
    gamma = checkpoint.config.gamma if gamma is None else check_unit_interval(gamma, "gamma")
    layers = checkpoint.hcp_layers()
    layers.requires_grad_(False)
    for saved_id, target_id in resolved.items():
        backbone.attach(target_id, HcPHook(layers[saved_id], gamma))
    return backbone


def detach_hcp(backbone: ToyBackbone) -> ToyBackbone:
    backbone.detach_hooks()
    return backbone


class _Tracing:
    """Wraps a site's hook (or base attention) to report the combined maps."""

    def __init__(self, inner, recorder, timestep_ref):
        self.inner = inner
        self.recorder = recorder
        self.timestep_ref = timestep_ref

    def __call__(self, layer_id, z_in, c, site):
        out, maps = self.inner(layer_id, z_in, c, site) if self.inner is not None else site.base(z_in, c)
        self.recorder.record(layer_id, self.timestep_ref[0], maps.combined[0])
        return out, maps


def latents_to_image(z: torch.Tensor, upscale: int = 4) -> np.ndarray:
    """Identity "decoder": first three latent channels mapped to ``uint8`` RGB."""
    z = z.detach().to(torch.float64)
    rgb = z[:3] if z.shape[0] >= 3 else z[:1].expand(3, -1, -1)
    img = ((rgb.clamp(-1.0, 1.0) + 1.0) * 127.5).round().to(torch.uint8).permute(1, 2, 0).numpy()
    return np.kron(img, np.ones((upscale, upscale, 1), dtype=np.uint8))


def image_grid(images: List[np.ndarray]) -> np.ndarray:
    cols = math.ceil(math.sqrt(len(images)))
    rows = math.ceil(len(images) / cols)
    h, w, c = images[0].shape
    grid = np.zeros((rows * h, cols * w, c), dtype=np.uint8)
    for i, im in enumerate(images):
        r, q = divmod(i, cols)
        grid[r * h:(r + 1) * h, q * w:(q + 1) * w] = im
    return grid


@torch.no_grad()
def generate(prompt: str, config: SamplerConfig, backbone: ToyBackbone, encoder: Optional[PromptEncoder] = None,
             recorder=None, control: Optional[torch.Tensor] = None) -> dict:
    """Sample latents for ``prompt``; returns ``{"latents", "images", "grid", "bundle"}``.

    ``recorder`` (see :class:`hcplayer.analysis.TraceRecorder`) receives the
    conditional branch's combined maps at every site and step.
    """
    encoder = encoder or PromptEncoder()
    bundle = encoder.encode(prompt)
    desc = backbone.descriptor
    schedule = NoiseSchedule(config.T, beta_schedule=config.beta_schedule)
    gen = torch.Generator().manual_seed(config.seed)
    shape = (config.num_images, desc.latent_channels, desc.latent_side, desc.latent_side)
    z = torch.randn(shape, generator=gen)
    c = bundle.embeddings.unsqueeze(0).expand(config.num_images, -1, -1)
    u = encoder.empty_embedding().unsqueeze(0).expand(config.num_images, -1, -1)
    hooks = dict(backbone.hooks)
    if config.gamma is not None:
        for layer_id, hook in hooks.items():
            if isinstance(hook, HcPHook):
                hooks[layer_id] = HcPHook(hook.params, config.gamma)
    timestep_ref = [0]
    cond_hooks = hooks
    if recorder is not None:
        recorder.bind(desc, bundle, config)
        cond_hooks = {l: _Tracing(hooks.get(l), recorder, timestep_ref)
                      for l in desc.layer_ids if recorder.wants_layer(l)}
        cond_hooks.update({l: h for l, h in hooks.items() if l not in cond_hooks})
    for t, t_prev in ddim_timesteps(config.steps, config.T):
        timestep_ref[0] = t
        eps_c, _ = backbone(z, t, c, hooks=cond_hooks, control=control)
        if config.guidance_scale != 1.0:
            eps_u, _ = backbone(z, t, u, hooks=hooks, control=control)
            eps = guided_epsilon(eps_c, eps_u, config.guidance_scale)
        else:
            eps = eps_c
        noise = torch.randn(shape, generator=gen) if config.eta > 0 else None
        z = ddim_step(z, eps, t, t_prev, schedule, config.eta, noise)
    if recorder is not None:
        recorder.close()
    images = [latents_to_image(zi) for zi in z]
    return {"latents": z, "images": images, "grid": image_grid(images), "bundle": bundle}
