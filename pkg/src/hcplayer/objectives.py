"""Alignment loss, stage-dependent cosine weighting and the combined objective."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Optional, Sequence

import torch

from .exceptions import DegenerateInputError, ShapeError, ValidationError
from .validation import check_non_negative, check_positive_int

STAGES = ("down", "mid", "up")
DEFAULT_T = 1000
DEFAULT_ALPHA = 0.1


class StagePartition(dict):
    """Ordered mapping ``layer id -> stage`` with contiguous stages."""

    def __init__(self, items: Iterable):
        super().__init__()
        for layer, stage in (items.items() if isinstance(items, Mapping) else items):
            if stage not in STAGES:
                raise ValidationError(f"layer {layer!r}: unknown stage {stage!r}")
            if layer in self:
                raise ValidationError(f"layer {layer!r} appears more than once")
            self[layer] = stage
        order = [STAGES.index(s) for s in self.values()]
        if order != sorted(order):
            raise ValidationError(f"stages must be contiguous down -> mid -> up, got {list(self.values())}")


@dataclass
class WeightSchedule:
    """Cosine loss weights per stage.

    ``cosine`` toggles the schedule per stage; a disabled stage uses weight 1.
    """

    partition: StagePartition
    T: int = DEFAULT_T
    cosine: Dict[str, bool] = field(default_factory=lambda: {s: True for s in STAGES})

    def __post_init__(self):
        check_positive_int(self.T, "T")
        if not isinstance(self.partition, StagePartition):
            self.partition = StagePartition(self.partition)
        unknown = set(self.cosine) - set(STAGES)
        if unknown:
            raise ValidationError(f"unknown stages in cosine toggles: {sorted(unknown)}")
        self.cosine = {s: bool(self.cosine.get(s, True)) for s in STAGES}

    def condition(self) -> str:
        off = [s for s in STAGES if not self.cosine[s]]
        return "cosine" if not off else "no-cosine:" + ",".join(off)


def stage_weight(stage: str, t: float, T: int) -> float:
    """The cosine weight of a stage at timestep ``t``, clipped into ``[0, 1]``."""
    if stage == "down":
        arg = t / T
    elif stage == "mid":
        arg = (t - T) / T
    elif stage == "up":
        arg = (2 * t - T) / T
    else:
        raise ValidationError(f"unknown stage {stage!r}")
    value = math.cos(arg * math.pi / 2)
    # cos(pi/2) evaluates to ~6e-17; snap it so boundary layers contribute exactly 0
    if abs(value) < 1e-15:
        return 0.0
    return min(1.0, max(0.0, value))


def lambda_weight(layer, t: float, schedule: WeightSchedule) -> float:
    if layer not in schedule.partition:
        raise ValidationError(f"layer {layer!r} is not in the stage partition")
    if not 0 <= t <= schedule.T:
        raise ValidationError(f"timestep {t} outside [0, {schedule.T}]")
    stage = schedule.partition[layer]
    if not schedule.cosine[stage]:
        return 1.0
    return stage_weight(stage, t, schedule.T)


def cosine_per_head(h: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of matching rows of ``h`` and ``m`` (both ``[heads, P]``)."""
    hn = h.norm(dim=-1)
    mn = m.norm(dim=-1)
    if torch.any(hn == 0):
        raise DegenerateInputError("prior feature map has a zero-norm channel")
    if torch.any(mn == 0):
        raise DegenerateInputError("attention map slice has zero norm")
    return (h * m).sum(dim=-1) / (hn * mn)


def alignment_loss(h: torch.Tensor, m_h: torch.Tensor, human_indices: Sequence[int]) -> torch.Tensor:
    """Mean cosine distance between prior maps and the attention columns of ``human_indices``.

    ``h`` is ``[heads, P]``, ``m_h`` is ``[heads, P, N]``.  Cosine similarity is
    taken per head over spatial positions and averaged over heads.
    """
    idx = sorted(set(int(i) for i in human_indices))
    if not idx:
        raise ValidationError("human-centric index set is empty")
    if m_h.ndim != 3 or h.ndim != 2 or h.shape != m_h.shape[:2]:
        raise ShapeError(f"shape mismatch: H {tuple(h.shape)} vs M_h {tuple(m_h.shape)}")
    n = m_h.shape[-1]
    if idx[0] < 0 or idx[-1] >= n:
        raise ValidationError(f"human indices {idx} out of range for {n} tokens")
    h = h.to(m_h.dtype)
    total = 0.0
    for i in idx:
        total = total + (1.0 - cosine_per_head(h, m_h[:, :, i]).mean())
    return total / len(idx)


def denoising_loss(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    if eps.shape != eps_hat.shape:
        raise ShapeError(f"shape mismatch: noise {tuple(eps.shape)} vs prediction {tuple(eps_hat.shape)}")
    return ((eps - eps_hat) ** 2).mean()


def _as_float(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


@dataclass
class LossBreakdown:
    l_hca_per_layer: Dict[str, float]
    lambdas: Dict[str, float]
    l_ldm: float
    total: float
    alpha: float
    gamma: float
    t: float
    step: Optional[int] = None
    graph: Optional[torch.Tensor] = field(default=None, repr=False, compare=False)

    def recompute_total(self) -> float:
        return self.alpha * sum(self.lambdas[k] * v for k, v in self.l_hca_per_layer.items()) + self.l_ldm

    @property
    def mean_hca(self) -> float:
        vals = list(self.l_hca_per_layer.values())
        return sum(vals) / len(vals) if vals else 0.0

    def to_record(self) -> dict:
        return {
            "step": self.step,
            "t": self.t,
            "alpha": self.alpha,
            "gamma": self.gamma,
            "l_hca": dict(self.l_hca_per_layer),
            "lambda": dict(self.lambdas),
            "l_ldm": self.l_ldm,
            "total": self.total,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "LossBreakdown":
        return cls(dict(rec["l_hca"]), dict(rec["lambda"]), rec["l_ldm"], rec["total"],
                   rec["alpha"], rec["gamma"], rec["t"], rec.get("step"))


def total_loss(per_layer_hca: Mapping, l_ldm, t: float, alpha: float, schedule: WeightSchedule,
               gamma: float = float("nan")) -> LossBreakdown:
    """Combine per-layer alignment losses and the denoising loss.

    Inputs may be floats or tensors; with tensors the differentiable total is
    kept in ``LossBreakdown.graph``.
    """
    alpha = check_non_negative(alpha, "alpha")
    lambdas = {layer: lambda_weight(layer, t, schedule) for layer in per_layer_hca}
    weighted = 0.0
    for layer, value in per_layer_hca.items():
        weighted = weighted + lambdas[layer] * value
    total = alpha * weighted + l_ldm
    return LossBreakdown(
        l_hca_per_layer={str(k): _as_float(v) for k, v in per_layer_hca.items()},
        lambdas={str(k): v for k, v in lambdas.items()},
        l_ldm=_as_float(l_ldm),
        total=_as_float(total),
        alpha=alpha,
        gamma=float(gamma),
        t=float(t),
        graph=total if isinstance(total, torch.Tensor) else None,
    )
