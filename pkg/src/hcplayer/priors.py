"""Multi-scale human-centric prior features from pose or depth images."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn

from .exceptions import ContractError, DegenerateInputError, ValidationError
from .validation import check_positive_int

PRIOR_SIZE = 256
CANONICAL_SIDES = (64, 32, 16, 8)
PRIOR_CHANNELS = 8


class PriorKind(str, Enum):
    POSE = "pose"
    DEPTH = "depth"


@dataclass
class PriorImage:
    """Prior image, ``pixels`` is ``[H, W, C]`` float in ``[0, 1]``."""

    pixels: np.ndarray
    kind: PriorKind = PriorKind.POSE

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float32)
        if pixels.ndim == 2:
            pixels = pixels[:, :, None]
        if pixels.ndim != 3:
            raise ValidationError(f"prior pixels must be [H, W, C], got shape {pixels.shape}")
        if pixels.size and (pixels.min() < 0.0 or pixels.max() > 1.0):
            raise ValidationError("prior pixels must be normalised to [0, 1]")
        self.pixels = pixels
        self.kind = PriorKind(self.kind)

    @property
    def size(self) -> Tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]

    def to_tensor(self) -> torch.Tensor:
        """``[1, 3, H, W]`` float32; grayscale is replicated to three channels."""
        x = torch.from_numpy(np.ascontiguousarray(self.pixels)).permute(2, 0, 1)
        if x.shape[0] == 1:
            x = x.expand(3, -1, -1)
        elif x.shape[0] == 4:
            x = x[:3]
        return x.unsqueeze(0).contiguous()

    def digest(self) -> str:
        h = hashlib.sha256(self.kind.value.encode())
        h.update(np.ascontiguousarray(self.pixels).tobytes())
        return h.hexdigest()


def preprocess_prior(image: PriorImage, size: int = PRIOR_SIZE) -> PriorImage:
    if image.size == (size, size):
        return image
    x = torch.from_numpy(image.pixels).permute(2, 0, 1).unsqueeze(0)
    x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
    return PriorImage(x[0].permute(1, 2, 0).clamp(0.0, 1.0).numpy(), image.kind)


def load_prior_image(path, kind=PriorKind.POSE, size: int = PRIOR_SIZE) -> PriorImage:
    """Read an 8- or 16-bit PNG and resize it to ``size x size``."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64) / 65535.0
        else:
            if im.mode not in ("L", "RGB", "RGBA"):
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    return preprocess_prior(PriorImage(np.clip(arr, 0.0, 1.0).astype(np.float32), kind), size)


class ToyExtractor(nn.Module):
    """Small deterministic stand-in for a pretrained convolutional backbone.

    Stage ``s`` average-pools the grayscale input by ``2**(s+1)`` and applies a
    bank of 3x3 filters (replicate padding) followed by ``relu(scale*x + bias)``.
    On a 256x256 input the stages are 128, 64, 32, 16 and 8 pixels wide.
    """

    def __init__(self, channels: int = 12, num_stages: int = 5, seed: int = 0, bias: float = 0.0):
        super().__init__()
        self.channels = check_positive_int(channels, "channels")
        self.num_stages = check_positive_int(num_stages, "num_stages")
        gen = torch.Generator().manual_seed(seed)
        blur = torch.tensor([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]]) / 16.0
        kernels = blur + 0.15 * torch.randn(channels, 3, 3, generator=gen)
        scales = 1.0 + 0.25 * torch.arange(channels, dtype=torch.float32)
        self.register_buffer("kernels", kernels.unsqueeze(1))
        self.register_buffer("scales", scales)
        self.register_buffer("biases", torch.full((channels,), float(bias)))

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        gray = x.mean(dim=1, keepdim=True)
        outs = []
        for s in range(self.num_stages):
            pooled = F.avg_pool2d(gray, kernel_size=2 ** (s + 1))
            padded = F.pad(pooled, (1, 1, 1, 1), mode="replicate")
            resp = F.conv2d(padded, self.kernels)
            outs.append(torch.relu(resp * self.scales[None, :, None, None] + self.biases[None, :, None, None]))
        return outs

    def constant_response(self, value: float) -> torch.Tensor:
        """Per-channel response to a constant image of intensity ``value``."""
        return torch.relu(self.scales * value * self.kernels.sum(dim=(1, 2, 3)) + self.biases)


class ResNetExtractor(nn.Module):
    """Adapter exposing a torchvision ResNet-50 as a stage-feature extractor.

    ``weights`` is forwarded to ``torchvision.models.resnet50``; pass e.g.
    ``"IMAGENET1K_V2"`` for the pretrained network.  With ``weights=None`` the
    network is randomly initialised (useful only for shape tests).
    """

    mean = (0.485, 0.456, 0.406)
    std = (0.229, 0.224, 0.225)

    def __init__(self, weights=None):
        super().__init__()
        from torchvision.models import resnet50

        self.net = resnet50(weights=weights).eval()
        self.net.requires_grad_(False)
        self.register_buffer("_mean", torch.tensor(self.mean).view(1, 3, 1, 1))
        self.register_buffer("_std", torch.tensor(self.std).view(1, 3, 1, 1))

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        net = self.net
        x = (x - self._mean) / self._std
        stem = net.relu(net.bn1(net.conv1(x)))
        h = net.maxpool(stem)
        l1 = net.layer1(h)
        l2 = net.layer2(l1)
        l3 = net.layer3(l2)
        l4 = net.layer4(l3)
        return [stem, l1, l2, l3, l4]


def extract_stage_features(image: PriorImage, extractor) -> List[torch.Tensor]:
    """Run ``extractor`` and return its last four stages as ``[C, h, w]`` maps."""
    if hasattr(extractor, "eval"):
        extractor.eval()
    with torch.no_grad():
        stages = list(extractor(image.to_tensor()))
    if len(stages) < 4:
        raise ContractError(f"extractor must produce at least 4 stages, got {len(stages)}")
    sides = [s.shape[-1] for s in stages]
    if any(b >= a for a, b in zip(sides, sides[1:])):
        raise ContractError(f"extractor stage sizes must strictly decrease, got {sides}")
    last = [s[0] if s.ndim == 4 else s for s in stages[-4:]]
    if image.size == (PRIOR_SIZE, PRIOR_SIZE):
        got = tuple((m.shape[-2], m.shape[-1]) for m in last)
        want = tuple((s, s) for s in CANONICAL_SIDES)
        if got != want:
            raise ContractError(
                f"extractor stages for a {PRIOR_SIZE}^2 input must have spatial sizes "
                f"{{64^2, 32^2, 16^2, 8^2}}, got {got}"
            )
    return [m.detach().to(torch.float32) for m in last]


def channel_variances(stage_map: torch.Tensor) -> torch.Tensor:
    """Population variance of every channel over all spatial positions."""
    flat = stage_map.reshape(stage_map.shape[0], -1).to(torch.float64)
    return flat.var(dim=1, unbiased=False)


def top_variance_indices(stage_map: torch.Tensor, k: int = PRIOR_CHANNELS) -> List[int]:
    """Indices of the ``k`` highest-variance channels, highest first; ties go to the lower index."""
    k = check_positive_int(k, "k")
    if stage_map.ndim != 3:
        raise ValidationError(f"stage map must be [C, h, w], got shape {tuple(stage_map.shape)}")
    if stage_map.shape[0] < k:
        raise ValidationError(f"need at least k={k} channels, got {stage_map.shape[0]}")
    var = channel_variances(stage_map).numpy()
    return np.argsort(-var, kind="stable")[:k].tolist()


def select_top_variance_channels(stage_map: torch.Tensor, k: int = PRIOR_CHANNELS) -> torch.Tensor:
    return stage_map[top_variance_indices(stage_map, k)]


def resize_to_scale(feature_map: torch.Tensor, target: Tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of ``[c, h, w]`` to ``[c, *target]``; identity on equal size."""
    th, tw = target
    check_positive_int(th, "target height")
    check_positive_int(tw, "target width")
    if tuple(feature_map.shape[-2:]) == (th, tw):
        return feature_map.clone()
    out = F.interpolate(feature_map.unsqueeze(0), size=(th, tw), mode="bilinear", align_corners=False)
    return out[0]


@dataclass
class PriorFeatureStack:
    """Four ``[8, s, s]`` maps at sides 64, 32, 16, 8, channels unit-normalised."""

    per_scale: List[torch.Tensor]
    source_stage_ids: List[int] = field(default_factory=lambda: [-4, -3, -2, -1])

    def __post_init__(self):
        if len(self.per_scale) != len(CANONICAL_SIDES):
            raise ValidationError(f"expected {len(CANONICAL_SIDES)} scales, got {len(self.per_scale)}")
        for side, m in zip(CANONICAL_SIDES, self.per_scale):
            if tuple(m.shape) != (PRIOR_CHANNELS, side, side):
                raise ValidationError(
                    f"scale {side}^2 must have shape {(PRIOR_CHANNELS, side, side)}, got {tuple(m.shape)}"
                )

    def for_side(self, side: int) -> torch.Tensor:
        """Prior map ``[8, side*side]`` for a layer whose latent grid is ``side x side``."""
        if side in CANONICAL_SIDES:
            m = self.per_scale[CANONICAL_SIDES.index(side)]
        else:
            larger = [i for i, s in enumerate(CANONICAL_SIDES) if s >= side]
            src = self.per_scale[larger[-1] if larger else 0]
            m = _unit_normalise(resize_to_scale(src, (side, side)))
        return m.reshape(m.shape[0], -1)

    def to_arrays(self) -> dict:
        return {f"scale_{s}": m.numpy() for s, m in zip(CANONICAL_SIDES, self.per_scale)}


def _unit_normalise(m: torch.Tensor) -> torch.Tensor:
    flat = m.reshape(m.shape[0], -1)
    norms = flat.norm(dim=1)
    if torch.any(norms == 0):
        bad = torch.nonzero(norms == 0).flatten().tolist()
        raise DegenerateInputError(f"prior feature channels {bad} have zero norm")
    return (flat / norms[:, None]).reshape(m.shape)


def build_prior_stack(image: PriorImage, extractor, k: int = PRIOR_CHANNELS) -> PriorFeatureStack:
    image = preprocess_prior(image)
    stages = extract_stage_features(image, extractor)
    maps = [_unit_normalise(select_top_variance_channels(s, k)) for s in stages]
    return PriorFeatureStack(maps)


def make_extractor(name: str = "toy", **kwargs):
    if name == "toy":
        return ToyExtractor(**kwargs)
    if name == "resnet50":
        return ResNetExtractor(**kwargs)
    raise ValidationError(f"unknown extractor {name!r}; expected 'toy' or 'resnet50'")


def stack_cache_key(image: PriorImage, extractor_id: str) -> str:
    return f"{extractor_id}:{image.digest()}"


class PriorStackCache:
    """Content-addressed cache of prior stacks."""

    def __init__(self, extractor, extractor_id: str = "toy"):
        self.extractor = extractor
        self.extractor_id = extractor_id
        self._stacks: dict = {}

    def get(self, image: PriorImage) -> PriorFeatureStack:
        key = stack_cache_key(image, self.extractor_id)
        if key not in self._stacks:
            self._stacks[key] = build_prior_stack(image, self.extractor)
        return self._stacks[key]

    def __len__(self):
        return len(self._stacks)


def load_prior_stack_for(path, kind: PriorKind, cache: PriorStackCache) -> PriorFeatureStack:
    return cache.get(load_prior_image(Path(path), kind))
