"""Pluggable denoiser interface, the toy denoiser and the DDPM noise schedule.

A backbone exposes its cross-attention sites through a
:class:`BackboneDescriptor`.  At every site the backbone calls the hook
registered for that layer (if any) with the signature::

    hook(layer_id, z_in, c, site) -> (z_out, AttentionMaps)

where ``z_in`` is ``[B, P, width]``, ``c`` is ``[B, N, D]`` and ``site`` is the
:class:`CrossAttentionSite` holding the frozen projections.  Without a hook the
site runs plain cross-attention.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .attention import (
    AttentionMaps,
    CrossAttentionConfig,
    CrossAttentionWeights,
    HcPKey,
    hcp_cross_attention,
)
from .exceptions import ConfigurationError, ValidationError
from .objectives import STAGES, StagePartition
from .priors import CANONICAL_SIDES
from .validation import check_positive_int


@dataclass(frozen=True)
class LayerSpec:
    id: str
    stage: str
    side: int
    head_count: int = 8
    d: int = 64
    token_capacity: int = 16

    @property
    def query_len(self) -> int:
        return self.side * self.side


@dataclass(frozen=True)
class BackboneDescriptor:
    layers: Tuple[LayerSpec, ...]
    latent_channels: int = 4
    latent_side: int = 16
    embed_dim: int = 32
    width: int = 32

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(
            l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers))
        if not self.layers:
            raise ValidationError("descriptor needs at least one cross-attention layer")
        ids = [l.id for l in self.layers]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"duplicate layer ids in {ids}")
        for l in self.layers:
            if l.stage not in STAGES:
                raise ValidationError(f"layer {l.id!r}: unknown stage {l.stage!r}")
            if l.side not in CANONICAL_SIDES:
                raise ValidationError(f"layer {l.id!r}: side {l.side} not one of {CANONICAL_SIDES}")
            if l.d % l.head_count:
                raise ValidationError(f"layer {l.id!r}: d={l.d} not divisible by head_count={l.head_count}")
        StagePartition((l.id, l.stage) for l in self.layers)

    @property
    def layer_ids(self) -> List[str]:
        return [l.id for l in self.layers]

    def layer(self, layer_id: str) -> LayerSpec:
        for l in self.layers:
            if l.id == layer_id:
                return l
        raise ConfigurationError(f"unknown layer id {layer_id!r}; known: {self.layer_ids}")

    def partition(self) -> StagePartition:
        return StagePartition((l.id, l.stage) for l in self.layers)

    def to_dict(self) -> dict:
        return {
            "layers": [asdict(l) for l in self.layers],
            "latent_channels": self.latent_channels,
            "latent_side": self.latent_side,
            "embed_dim": self.embed_dim,
            "width": self.width,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "BackboneDescriptor":
        data = dict(data)
        data["layers"] = tuple(LayerSpec(**l) for l in data["layers"])
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def attention_config(self, layer_id: str) -> CrossAttentionConfig:
        l = self.layer(layer_id)
        return CrossAttentionConfig(l.d, l.head_count, l.token_capacity, self.embed_dim,
                                    l.query_len, in_channels=self.width)


def minimal_descriptor(head_count: int = 8, d: int = 64, tokens: int = 16, embed_dim: int = 32,
                       width: int = 32) -> BackboneDescriptor:
    """Four layers at 16^2 and 8^2: down16, mid8, up8, up16."""
    table = [("down_0", "down", 16), ("mid_0", "mid", 8), ("up_0", "up", 8), ("up_1", "up", 16)]
    return BackboneDescriptor(
        tuple(LayerSpec(i, s, side, head_count, d, tokens) for i, s, side in table),
        latent_channels=4, latent_side=16, embed_dim=embed_dim, width=width,
    )


class NoiseSchedule:
    """DDPM noise schedule.

    ``beta_schedule`` is ``"linear"`` (betas evenly spaced) or
    ``"scaled_linear"`` (square roots evenly spaced, as used by Stable
    Diffusion).  ``alphas_cumprod[t]`` is the product of the first ``t`` factors
    ``(1 - beta)``, so ``t = 0`` is the clean latent and every value lies in
    ``(0, 1]``.
    """

    def __init__(self, T: int = 1000, beta_start: Optional[float] = None, beta_end: Optional[float] = None,
                 beta_schedule: str = "scaled_linear", betas=None):
        self.T = check_positive_int(T, "T")
        self.beta_schedule = "custom" if betas is not None else beta_schedule
        if betas is None:
            if beta_schedule == "linear":
                lo, hi = beta_start or 1e-4, beta_end or 0.02
                betas = np.linspace(lo, hi, T, dtype=np.float64)
            elif beta_schedule == "scaled_linear":
                lo, hi = beta_start or 0.00085, beta_end or 0.012
                betas = np.linspace(lo ** 0.5, hi ** 0.5, T, dtype=np.float64) ** 2
            else:
                raise ValidationError(f"unknown beta_schedule {beta_schedule!r}")
        betas = np.asarray(betas, dtype=np.float64)
        if betas.shape != (T,) or np.any(betas <= 0) or np.any(betas >= 1):
            raise ValidationError("betas must be a length-T array with entries in (0, 1)")
        self.betas = betas
        self.alphas_cumprod = np.concatenate([[1.0], np.cumprod(1.0 - betas)[:-1]])

    def alpha_bar(self, t: int) -> float:
        if not 0 <= int(t) < self.T:
            raise ValidationError(f"timestep {t} outside [0, {self.T})")
        return float(self.alphas_cumprod[int(t)])

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_schedule": self.beta_schedule, "beta_start": float(self.betas[0]),
                "beta_end": float(self.betas[-1])}


def forward_noise(z0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """``sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps``; ``t`` is an int or a per-sample tensor."""
    if eps.shape != z0.shape:
        raise ValidationError(f"noise shape {tuple(eps.shape)} != latent shape {tuple(z0.shape)}")
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        abar = torch.tensor([schedule.alpha_bar(int(v)) for v in t], dtype=torch.float64)
        abar = abar.reshape(-1, *([1] * (z0.ndim - 1)))
        return (abar.sqrt() * z0 + (1 - abar).sqrt() * eps).to(z0.dtype)
    abar = schedule.alpha_bar(int(t))
    return math.sqrt(abar) * z0 + math.sqrt(1.0 - abar) * eps


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half, 1))
    args = t.to(torch.float32)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class CrossAttentionSite(nn.Module):
    """Frozen projections of one cross-attention layer."""

    def __init__(self, spec: LayerSpec, width: int, embed_dim: int):
        super().__init__()
        self.spec = spec
        self.to_q = nn.Linear(width, spec.d, bias=False)
        self.to_k = nn.Linear(embed_dim, spec.d, bias=False)
        self.to_v = nn.Linear(embed_dim, spec.d, bias=False)
        self.to_out = nn.Linear(spec.d, width)
        self.config = CrossAttentionConfig(spec.d, spec.head_count, spec.token_capacity, embed_dim,
                                           spec.query_len, in_channels=width)

    @property
    def weights(self) -> CrossAttentionWeights:
        return CrossAttentionWeights(self.to_q.weight, self.to_k.weight, self.to_v.weight)

    def base(self, z_in: torch.Tensor, c: torch.Tensor):
        return hcp_cross_attention(z_in, c, None, 1.0, self.config, self.weights)


class HcPHook:
    """Routes a site through the HcP path with combination weight ``gamma``."""

    def __init__(self, params: HcPKey, gamma: float):
        self.params = params
        self.gamma = gamma

    def __call__(self, layer_id, z_in, c, site: CrossAttentionSite):
        return hcp_cross_attention(z_in, c, self.params, self.gamma, site.config, site.weights)


def _resize(h: torch.Tensor, side: int) -> torch.Tensor:
    cur = h.shape[-1]
    if cur == side:
        return h
    if cur > side and cur % side == 0:
        return F.avg_pool2d(h, cur // side)
    return F.interpolate(h, size=(side, side), mode="bilinear", align_corners=False)


class ToyBackbone(nn.Module):
    """Small convolutional denoiser with one cross-attention site per descriptor layer.

    ``control_channels > 0`` adds an extra conditioning input (a stand-in for
    controllable pipelines); it is added to the stem features.
    """

    def __init__(self, descriptor: BackboneDescriptor, seed: int = 0, control_channels: int = 0):
        super().__init__()
        self.descriptor = descriptor
        self.seed = seed
        w = descriptor.width
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.stem = nn.Conv2d(descriptor.latent_channels, w, 3, padding=1)
            self.time_proj = nn.Linear(w, w)
            self.control = nn.Conv2d(control_channels, w, 3, padding=1) if control_channels else None
            self.sites = nn.ModuleDict(
                {l.id: CrossAttentionSite(l, w, descriptor.embed_dim) for l in descriptor.layers})
            self.mixers = nn.ModuleDict({l.id: nn.Conv2d(w, w, 3, padding=1) for l in descriptor.layers})
            self.head = nn.Conv2d(w, descriptor.latent_channels, 3, padding=1)
        self.control_channels = control_channels
        self.hooks: Dict[str, Callable] = {}

    def freeze(self) -> "ToyBackbone":
        self.requires_grad_(False)
        return self

    def attach(self, layer_id: str, hook: Callable) -> None:
        self.descriptor.layer(layer_id)
        self.hooks[layer_id] = hook

    def detach_hooks(self) -> None:
        self.hooks = {}

    def _resolve_hooks(self, hooks):
        hooks = self.hooks if hooks is None else hooks
        for layer_id in hooks:
            if layer_id not in self.sites:
                raise ConfigurationError(
                    f"hook references unknown layer id {layer_id!r}; known: {self.descriptor.layer_ids}")
        return hooks

    def forward(self, z_t: torch.Tensor, t, c: torch.Tensor, hooks: Optional[Mapping] = None,
                control: Optional[torch.Tensor] = None):
        hooks = self._resolve_hooks(hooks)
        b = z_t.shape[0]
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1:
            t = t.expand(b)
        if c.ndim == 2:
            c = c.unsqueeze(0).expand(b, -1, -1)
        h = self.stem(z_t)
        h = h + self.time_proj(timestep_embedding(t, self.descriptor.width))[:, :, None, None]
        if self.control is not None and control is not None:
            h = h + self.control(control)
        maps: Dict[str, AttentionMaps] = {}
        for spec in self.descriptor.layers:
            h = _resize(h, spec.side)
            site = self.sites[spec.id]
            z_in = h.flatten(2).transpose(1, 2)
            hook = hooks.get(spec.id)
            out, maps[spec.id] = hook(spec.id, z_in, c, site) if hook is not None else site.base(z_in, c)
            h = h + site.to_out(out).transpose(1, 2).reshape(h.shape)
            h = h + self.mixers[spec.id](F.silu(h))
        h = _resize(h, self.descriptor.latent_side)
        return self.head(F.silu(h)), maps

    def denoise(self, z_t, t, c, hooks=None, control=None):
        return self.forward(z_t, t, c, hooks=hooks, control=control)

    def base_parameters(self) -> Dict[str, torch.Tensor]:
        return dict(self.named_parameters())


def toy_backbone(descriptor: Optional[BackboneDescriptor] = None, seed: int = 0,
                 control_channels: int = 0) -> ToyBackbone:
    descriptor = descriptor or minimal_descriptor()
    stages = {l.stage for l in descriptor.layers}
    if stages != set(STAGES):
        raise ValidationError(f"toy backbone needs at least one layer per stage, got {sorted(stages)}")
    if len({l.side for l in descriptor.layers}) < 2:
        raise ValidationError("toy backbone needs at least two distinct scales")
    return ToyBackbone(descriptor, seed=seed, control_channels=control_channels).freeze()
