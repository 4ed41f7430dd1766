"""Cross-attention with a plug-in human-centric key path.

A base cross-attention layer projects latent positions to queries and text
embeddings to keys/values.  The HcP path adds a second, trainable key
``K_h = phi(C)`` whose attention map ``M_h`` is mixed into the base map::

    M_hat = gamma * M + (1 - gamma) * M_h

All tensors carry optional leading batch dimensions.  Attention maps are laid
out ``[..., heads, P, N]`` (query positions by text tokens).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from .exceptions import ConfigurationError, ShapeError, StateError
from .validation import check_positive_int, check_unit_interval

DEFAULT_GAMMA = 0.9
DEFAULT_HIDDEN_WIDTH = 1024
DEFAULT_NUM_BLOCKS = 3


@dataclass(frozen=True)
class CrossAttentionConfig:
    latent_dim: int
    head_count: int
    token_count: int
    embed_dim: int
    query_len: int
    in_channels: Optional[int] = None

    def __post_init__(self):
        for name in ("latent_dim", "head_count", "token_count", "embed_dim", "query_len"):
            check_positive_int(getattr(self, name), name)
        if self.latent_dim % self.head_count:
            raise ConfigurationError(
                f"latent_dim={self.latent_dim} is not divisible by head_count={self.head_count}"
            )

    @property
    def head_dim(self) -> int:
        return self.latent_dim // self.head_count


@dataclass
class AttentionMaps:
    """Maps of one cross-attention call, each ``[..., heads, P, N]``.

    ``human_centric`` is ``None`` when the layer ran without the HcP path, in
    which case ``combined`` is the base map itself.
    """

    base: torch.Tensor
    human_centric: Optional[torch.Tensor]
    combined: torch.Tensor
    gamma: float = 1.0

    def detach(self) -> "AttentionMaps":
        hc = None if self.human_centric is None else self.human_centric.detach()
        return AttentionMaps(self.base.detach(), hc, self.combined.detach(), self.gamma)


def _matmul_rows(x: torch.Tensor, weight: torch.Tensor, x_name: str, w_name: str) -> torch.Tensor:
    if weight.ndim != 2:
        raise ShapeError(f"{w_name} must be a 2-D matrix, got shape {tuple(weight.shape)}")
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(
            f"shape mismatch: {x_name} {tuple(x.shape)} has {x.shape[-1]} columns but "
            f"{w_name} {tuple(weight.shape)} expects input width {weight.shape[1]}"
        )
    return x @ weight.transpose(0, 1)


def project_queries(z_in: torch.Tensor, w_q: torch.Tensor) -> torch.Tensor:
    """Project latent rows ``[..., P, channels]`` with ``w_q`` of shape ``[d, channels]``."""
    return _matmul_rows(z_in, w_q, "z_in", "W_q")


def project_text_kv(c: torch.Tensor, w_k: torch.Tensor, w_v: torch.Tensor):
    """Return ``(K, V)`` for embeddings ``c`` of shape ``[..., N, D]``."""
    return _matmul_rows(c, w_k, "C", "W_k"), _matmul_rows(c, w_v, "C", "W_v")


def split_heads(x: torch.Tensor, head_count: int) -> torch.Tensor:
    """``[..., L, d]`` -> ``[..., heads, L, d // heads]``."""
    *lead, length, dim = x.shape
    if dim % head_count:
        raise ShapeError(f"last dimension {dim} is not divisible by head_count={head_count}")
    x = x.reshape(*lead, length, head_count, dim // head_count)
    return x.transpose(-3, -2)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    """``[..., heads, L, dh]`` -> ``[..., L, heads * dh]``."""
    *lead, heads, length, dim = x.shape
    return x.transpose(-3, -2).reshape(*lead, length, heads * dim)


def attention_map(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Row-wise ``softmax(Q K^T / sqrt(d))`` for ``Q [..., P, d]`` and ``K [..., N, d]``."""
    d = q.shape[-1]
    if d == 0 or k.shape[-1] == 0:
        raise ConfigurationError("attention requires a positive projection dimension d")
    if k.shape[-1] != d:
        raise ShapeError(f"shape mismatch: Q has d={d}, K has d={k.shape[-1]}")
    logits = (q @ k.transpose(-1, -2)) / math.sqrt(d)
    logits = logits - logits.amax(dim=-1, keepdim=True)
    weights = torch.exp(logits)
    return weights / weights.sum(dim=-1, keepdim=True)


def combine_maps(m: torch.Tensor, m_h: torch.Tensor, gamma: float) -> torch.Tensor:
    gamma = check_unit_interval(gamma, "gamma")
    if m.shape != m_h.shape:
        raise ShapeError(f"shape mismatch: M {tuple(m.shape)} vs M_h {tuple(m_h.shape)}")
    return gamma * m + (1.0 - gamma) * m_h


def attention_output(v: torch.Tensor, m_hat: torch.Tensor) -> torch.Tensor:
    """``M_hat [..., P, N] @ V [..., N, d]``."""
    if m_hat.shape[-1] != v.shape[-2]:
        raise ShapeError(
            f"shape mismatch: map {tuple(m_hat.shape)} has {m_hat.shape[-1]} tokens, "
            f"V {tuple(v.shape)} has {v.shape[-2]} rows"
        )
    return m_hat @ v


class HcPKey(nn.Module):
    """The HcP layer: maps each text-embedding row to an auxiliary key row.

    ``num_blocks`` blocks of ``Linear -> tanh -> Linear`` at ``hidden_width``,
    followed by a final ``Linear`` to ``key_dim``.  The final affine starts
    small so the initial ``M_h`` is close to uniform.
    """

    def __init__(
        self,
        embed_dim: int,
        key_dim: int,
        hidden_width: int = DEFAULT_HIDDEN_WIDTH,
        num_blocks: int = DEFAULT_NUM_BLOCKS,
        seed: Optional[int] = 0,
        final_std: float = 1e-3,
    ):
        super().__init__()
        self.embed_dim = check_positive_int(embed_dim, "embed_dim")
        self.key_dim = check_positive_int(key_dim, "key_dim")
        self.hidden_width = check_positive_int(hidden_width, "hidden_width")
        self.num_blocks = check_positive_int(num_blocks, "num_blocks")
        self.final_std = final_std
        layers = []
        width_in = embed_dim
        for _ in range(num_blocks):
            layers += [nn.Linear(width_in, hidden_width), nn.Tanh(), nn.Linear(hidden_width, hidden_width)]
            width_in = hidden_width
        self.blocks = nn.Sequential(*layers)
        self.out = nn.Linear(hidden_width, key_dim)
        self.initialized = False
        if seed is not None:
            self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for module in list(self.blocks) + [self.out]:
                if not isinstance(module, nn.Linear):
                    continue
                fan_in = module.in_features
                std = self.final_std if module is self.out else 1.0 / math.sqrt(fan_in)
                module.weight.copy_(torch.randn(module.weight.shape, generator=gen) * std)
                module.bias.zero_()
        self.initialized = True

    def forward(self, c: torch.Tensor) -> torch.Tensor:
        return self.out(self.blocks(c))

    def architecture(self) -> dict:
        return {
            "embed_dim": self.embed_dim,
            "key_dim": self.key_dim,
            "hidden_width": self.hidden_width,
            "num_blocks": self.num_blocks,
            "activation": "tanh",
            "final_std": self.final_std,
        }


def hcp_key(c_h: torch.Tensor, params: Optional[HcPKey]) -> torch.Tensor:
    if params is None or not getattr(params, "initialized", False):
        raise StateError("HcP parameters are not initialised")
    if c_h.shape[-1] != params.embed_dim:
        raise ShapeError(
            f"shape mismatch: C has {c_h.shape[-1]} columns, HcP layer expects {params.embed_dim}"
        )
    return params(c_h)


@dataclass
class CrossAttentionWeights:
    """Frozen base projections; matrices are ``[out, in]``."""

    w_q: torch.Tensor
    w_k: torch.Tensor
    w_v: torch.Tensor


def hcp_cross_attention(
    z_in: torch.Tensor,
    c: torch.Tensor,
    params: Optional[HcPKey],
    gamma: float,
    config: CrossAttentionConfig,
    weights: CrossAttentionWeights,
):
    """Full cross-attention with the HcP path.

    ``params=None`` runs the base layer only.  Returns ``(z_out, maps)`` with
    ``z_out`` of shape ``[..., P, d]`` (heads merged).
    """
    q = split_heads(project_queries(z_in, weights.w_q), config.head_count)
    k, v = project_text_kv(c, weights.w_k, weights.w_v)
    k = split_heads(k, config.head_count)
    v = split_heads(v, config.head_count)
    m = attention_map(q, k)
    if params is None:
        maps = AttentionMaps(base=m, human_centric=None, combined=m, gamma=1.0)
        return merge_heads(attention_output(v, m)), maps
    gamma = check_unit_interval(gamma, "gamma")
    k_h = split_heads(hcp_key(c, params), config.head_count)
    m_h = attention_map(q, k_h)
    m_hat = combine_maps(m, m_h, gamma)
    maps = AttentionMaps(base=m, human_centric=m_h, combined=m_hat, gamma=gamma)
    return merge_heads(attention_output(v, m_hat)), maps
