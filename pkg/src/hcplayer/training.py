"""Fine-tuning of the HcP layers against the combined objective.

Only HcP parameters are trainable.  The backbone is frozen and guarded by
parameter digests; any change to a base parameter is a hard failure.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from . import __version__
from .attention import DEFAULT_GAMMA, DEFAULT_HIDDEN_WIDTH, DEFAULT_NUM_BLOCKS, HcPKey
from .backbone import BackboneDescriptor, HcPHook, NoiseSchedule, ToyBackbone, forward_noise, toy_backbone
from .exceptions import CompatibilityError, FreezeGuardError, StateError, ValidationError
from .objectives import (
    DEFAULT_ALPHA,
    STAGES,
    LossBreakdown,
    WeightSchedule,
    alignment_loss,
    denoising_loss,
    total_loss,
)
from .priors import PriorFeatureStack, PriorImage, PriorKind, PriorStackCache, load_prior_image, make_extractor
from .tokens import PromptBundle, PromptEncoder
from .validation import check_non_negative, check_positive_int, check_unit_interval

log = logging.getLogger(__name__)

MAX_SKIP_FRACTION = 0.10


@dataclass
class TrainingConfig:
    alpha: float = DEFAULT_ALPHA
    gamma: float = DEFAULT_GAMMA
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 8
    epochs: int = 10
    max_steps: Optional[int] = None
    T: int = 1000
    beta_schedule: str = "scaled_linear"
    window: Tuple[int, int] = (0, 1000)
    cosine: Dict[str, bool] = field(default_factory=lambda: {s: True for s in STAGES})
    seed: int = 0
    hidden_width: int = DEFAULT_HIDDEN_WIDTH
    num_blocks: int = DEFAULT_NUM_BLOCKS
    supervise: str = "human_centric"
    grad_clip: Optional[float] = None
    checkpoint_every: int = 0
    guard_every: int = 1
    extractor: str = "toy"
    prior_kind: str = "pose"

    def __post_init__(self):
        self.window = tuple(int(v) for v in self.window)
        check_positive_int(self.T, "T")
        lo, hi = self.window
        if not 0 <= lo <= hi <= self.T:
            raise ValidationError(f"timestep window {self.window} must satisfy 0 <= lo <= hi <= T={self.T}")
        if lo >= self.T:
            raise ValidationError(f"timestep window {self.window} contains no trainable timestep below T")
        check_non_negative(self.alpha, "alpha")
        check_unit_interval(self.gamma, "gamma")
        check_positive_int(self.batch_size, "batch_size")
        check_positive_int(self.epochs, "epochs")
        if self.max_steps is not None:
            check_positive_int(self.max_steps, "max_steps")
        if self.supervise not in ("human_centric", "combined"):
            raise ValidationError(f"supervise must be 'human_centric' or 'combined', got {self.supervise!r}")
        self.cosine = {s: bool(self.cosine.get(s, True)) for s in STAGES}
        PriorKind(self.prior_kind)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["window"] = list(self.window)
        return d

    @classmethod
    def from_dict(cls, data) -> "TrainingConfig":
        return cls(**data)


@dataclass
class TripletRecord:
    id: str
    z0: torch.Tensor
    prompt: PromptBundle
    prior: PriorFeatureStack


@dataclass
class Batch:
    ids: List[str]
    z0: torch.Tensor
    c: torch.Tensor
    human_indices: List[List[int]]
    priors: List[PriorFeatureStack]

    @classmethod
    def from_records(cls, records: Sequence[TripletRecord]) -> "Batch":
        return cls(
            ids=[r.id for r in records],
            z0=torch.stack([r.z0 for r in records]),
            c=torch.stack([r.prompt.embeddings for r in records]),
            human_indices=[r.prompt.human_indices for r in records],
            priors=[r.prior for r in records],
        )


def param_digest(t: torch.Tensor) -> str:
    return hashlib.sha256(t.detach().contiguous().cpu().numpy().tobytes()).hexdigest()


class FreezeGuard:
    """Snapshot of base-parameter digests, verified on demand."""

    def __init__(self, backbone: nn.Module, hcp: Optional[nn.Module] = None):
        self.backbone = backbone
        self.hcp = hcp
        self.base_digests = self._digests(backbone)
        self.hcp_digests = self._digests(hcp) if hcp is not None else {}

    @staticmethod
    def _digests(module: nn.Module) -> Dict[str, str]:
        return {name: param_digest(p) for name, p in module.named_parameters()}

    def verify(self) -> None:
        current = dict(self.backbone.named_parameters())
        for name, digest in self.base_digests.items():
            p = current.get(name)
            if p is None or param_digest(p) != digest:
                raise FreezeGuardError(f"frozen base parameter block {name!r} changed", block=name)
            if p.requires_grad:
                raise FreezeGuardError(f"frozen base parameter block {name!r} is marked trainable", block=name)

    def changed_hcp(self) -> List[str]:
        if self.hcp is None:
            return []
        now = self._digests(self.hcp)
        return [k for k, v in self.hcp_digests.items() if now.get(k) != v]


def freeze_guard(backbone: nn.Module, params: Optional[nn.Module] = None) -> FreezeGuard:
    return FreezeGuard(backbone, params)


def build_hcp_layers(descriptor: BackboneDescriptor, config: TrainingConfig) -> nn.ModuleDict:
    layers = nn.ModuleDict()
    for i, spec in enumerate(descriptor.layers):
        layers[spec.id] = HcPKey(descriptor.embed_dim, spec.d, config.hidden_width, config.num_blocks,
                                 seed=config.seed * 1009 + i)
    return layers


def _step_generator(seed: int, step: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed) * 1_000_003 + int(step))


def sample_timestep(config: TrainingConfig, gen: torch.Generator) -> int:
    lo, hi = config.window
    hi = min(hi, config.T)
    if hi <= lo:
        return lo
    return int(torch.randint(lo, hi, (1,), generator=gen))


class TrainingState:
    """Everything a training run mutates or reads: backbone, HcP layers, optimiser."""

    def __init__(self, backbone: ToyBackbone, config: TrainingConfig, hcp: Optional[nn.ModuleDict] = None):
        self.backbone = backbone.freeze()
        self.config = config
        self.descriptor = backbone.descriptor
        self.hcp = hcp if hcp is not None else build_hcp_layers(self.descriptor, config)
        self.hcp.requires_grad_(True)
        self.optimizer = torch.optim.AdamW(self.hcp.parameters(), lr=config.learning_rate,
                                           weight_decay=config.weight_decay, foreach=False)
        self.noise = NoiseSchedule(config.T, beta_schedule=config.beta_schedule)
        self.weights = WeightSchedule(self.descriptor.partition(), config.T, dict(config.cosine))
        self.step = 0
        self.guard = FreezeGuard(self.backbone, self.hcp)

    def hooks(self, gamma: Optional[float] = None) -> Dict[str, HcPHook]:
        g = self.config.gamma if gamma is None else gamma
        return {layer_id: HcPHook(self.hcp[layer_id], g) for layer_id in self.descriptor.layer_ids}


def compute_losses(state: TrainingState, batch: Batch, t: int, eps: torch.Tensor) -> LossBreakdown:
    """Forward pass and loss breakdown (with graph) for one batch at timestep ``t``."""
    cfg = state.config
    z_t = forward_noise(batch.z0, t, eps, state.noise)
    eps_hat, maps = state.backbone(z_t, t, batch.c, hooks=state.hooks())
    l_ldm = denoising_loss(eps, eps_hat)
    per_layer = {}
    for spec in state.descriptor.layers:
        m = maps[spec.id]
        target = m.human_centric if cfg.supervise == "human_centric" else m.combined
        losses = [alignment_loss(prior.for_side(spec.side), target[b], idx)
                  for b, (prior, idx) in enumerate(zip(batch.priors, batch.human_indices))]
        per_layer[spec.id] = torch.stack(losses).mean()
    return total_loss(per_layer, l_ldm, t, cfg.alpha, state.weights, gamma=cfg.gamma)


def training_step(batch: Batch, state: TrainingState) -> LossBreakdown:
    """One AdamW update of the HcP parameters; returns the pre-update loss breakdown."""
    cfg = state.config
    gen = _step_generator(cfg.seed, state.step)
    t = sample_timestep(cfg, gen)
    eps = torch.randn(batch.z0.shape, generator=gen)
    breakdown = compute_losses(state, batch, t, eps)
    state.optimizer.zero_grad(set_to_none=True)
    breakdown.graph.backward()
    for name, p in state.backbone.named_parameters():
        if p.grad is not None:
            raise FreezeGuardError(f"frozen base parameter block {name!r} received a gradient", block=name)
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(state.hcp.parameters(), cfg.grad_clip)
    state.optimizer.step()
    breakdown.step = state.step
    breakdown.graph = None
    state.step += 1
    if cfg.guard_every and state.step % cfg.guard_every == 0:
        state.guard.verify()
    return breakdown


@torch.no_grad()
def evaluate_alignment(state: TrainingState, records: Sequence[TripletRecord],
                       timesteps: Optional[Iterable[int]] = None, seed: int = 12345) -> Dict[str, float]:
    """Per-layer alignment loss averaged over records and a fixed timestep grid."""
    if timesteps is None:
        timesteps = range(0, state.config.T, max(1, state.config.T // 20))
    batch = Batch.from_records(records)
    totals = {l: 0.0 for l in state.descriptor.layer_ids}
    count = 0
    for k, t in enumerate(timesteps):
        eps = torch.randn(batch.z0.shape, generator=torch.Generator().manual_seed(seed + k))
        bd = compute_losses(state, batch, int(t), eps)
        for l, v in bd.l_hca_per_layer.items():
            totals[l] += v
        count += 1
    return {l: v / count for l, v in totals.items()}


# -- checkpoints -----------------------------------------------------------

def save_checkpoint(state: TrainingState, path) -> Path:
    """Write HcP parameters, optimiser state and metadata to a single ``.npz`` archive."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state.guard.verify()
    arrays = {}
    names = [n for n, _ in state.hcp.named_parameters()]
    for name, p in state.hcp.named_parameters():
        arrays[f"hcp/{name}"] = p.detach().numpy().copy()
    opt_state = state.optimizer.state_dict()["state"]
    for i, name in enumerate(names):
        st = opt_state.get(i)
        if not st:
            continue
        arrays[f"optim/{name}/exp_avg"] = st["exp_avg"].numpy().copy()
        arrays[f"optim/{name}/exp_avg_sq"] = st["exp_avg_sq"].numpy().copy()
        arrays[f"optim/{name}/step"] = np.asarray(float(st["step"]), dtype=np.float64)
    meta = {
        "tool": f"hcplayer {__version__}",
        "step": state.step,
        "config": state.config.to_dict(),
        "descriptor": state.descriptor.to_dict(),
        "descriptor_hash": state.descriptor.digest(),
        "hcp_architecture": {k: m.architecture() for k, m in state.hcp.items()},
        "parameter_order": names,
    }
    arrays["__metadata__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)
    return path


@dataclass
class Checkpoint:
    metadata: dict
    arrays: Dict[str, np.ndarray]

    @property
    def config(self) -> TrainingConfig:
        return TrainingConfig.from_dict(self.metadata["config"])

    @property
    def descriptor(self) -> BackboneDescriptor:
        return BackboneDescriptor.from_dict(self.metadata["descriptor"])

    @property
    def step(self) -> int:
        return int(self.metadata["step"])

    def hcp_layers(self) -> nn.ModuleDict:
        layers = nn.ModuleDict()
        for layer_id, arch in self.metadata["hcp_architecture"].items():
            m = HcPKey(arch["embed_dim"], arch["key_dim"], arch["hidden_width"], arch["num_blocks"],
                       seed=None, final_std=arch.get("final_std", 1e-3))
            layers[layer_id] = m
        with torch.no_grad():
            for name, p in layers.named_parameters():
                p.copy_(torch.from_numpy(self.arrays[f"hcp/{name}"]))
        for m in layers.values():
            m.initialized = True
        return layers


def load_checkpoint(path) -> Checkpoint:
    with np.load(Path(path)) as data:
        arrays = {k: data[k] for k in data.files}
    meta = json.loads(arrays.pop("__metadata__").tobytes().decode())
    return Checkpoint(meta, arrays)


def check_compatibility(checkpoint: Checkpoint, descriptor: BackboneDescriptor,
                        layer_map: Optional[Dict[str, str]] = None) -> Dict[str, str]:
    """Map checkpoint layer ids onto ``descriptor`` layers; raise with a report on mismatch.

    ``layer_map`` aliases checkpoint ids to backbone ids.
    """
    layer_map = dict(layer_map or {})
    saved = checkpoint.descriptor
    mismatches = []
    resolved = {}
    for spec in saved.layers:
        target_id = layer_map.get(spec.id, spec.id)
        try:
            target = descriptor.layer(target_id)
        except Exception:
            mismatches.append(f"{spec.id}: no layer {target_id!r} in backbone")
            continue
        for attr in ("stage", "side", "head_count", "d"):
            if getattr(spec, attr) != getattr(target, attr):
                mismatches.append(f"{spec.id}->{target_id}: {attr} {getattr(spec, attr)} != {getattr(target, attr)}")
        resolved[spec.id] = target_id
    if saved.embed_dim != descriptor.embed_dim:
        mismatches.append(f"embed_dim {saved.embed_dim} != {descriptor.embed_dim}")
    extra = set(descriptor.layer_ids) - set(resolved.values())
    mismatches += [f"{l}: backbone layer has no checkpoint weights" for l in sorted(extra)]
    if mismatches:
        raise CompatibilityError("checkpoint incompatible with backbone:\n  " + "\n  ".join(mismatches),
                                 mismatches)
    return resolved


def restore_state(checkpoint: Checkpoint, backbone: ToyBackbone) -> TrainingState:
    check_compatibility(checkpoint, backbone.descriptor)
    state = TrainingState(backbone, checkpoint.config, hcp=checkpoint.hcp_layers())
    names = checkpoint.metadata["parameter_order"]
    opt = state.optimizer.state_dict()
    for i, name in enumerate(names):
        key = f"optim/{name}/exp_avg"
        if key in checkpoint.arrays:
            opt["state"][i] = {
                "step": torch.tensor(float(checkpoint.arrays[f"optim/{name}/step"])),
                "exp_avg": torch.from_numpy(checkpoint.arrays[key].copy()),
                "exp_avg_sq": torch.from_numpy(checkpoint.arrays[f"optim/{name}/exp_avg_sq"].copy()),
            }
    state.optimizer.load_state_dict(opt)
    state.step = checkpoint.step
    return state


# -- data ------------------------------------------------------------------

def read_manifest(path) -> List[dict]:
    path = Path(path)
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        entry = json.loads(line)
        missing = {"image", "prompt", "prior_image", "id"} - set(entry)
        if missing:
            raise ValidationError(f"{path}:{lineno}: manifest record missing fields {sorted(missing)}")
        entries.append(entry)
    if not entries:
        raise ValidationError(f"manifest {path} contains no records")
    return entries


def load_latent(path, descriptor: BackboneDescriptor) -> torch.Tensor:
    """Read a latent ``.npy`` or map an image through the identity encoder."""
    path = Path(path)
    shape = (descriptor.latent_channels, descriptor.latent_side, descriptor.latent_side)
    if path.suffix == ".npy":
        z = torch.from_numpy(np.load(path).astype(np.float32))
    else:
        from PIL import Image

        with Image.open(path) as im:
            im = im.convert("RGB").resize((descriptor.latent_side, descriptor.latent_side), Image.BILINEAR)
            rgb = np.asarray(im, dtype=np.float32) / 127.5 - 1.0
        chans = [rgb[..., i] for i in range(3)] + [rgb.mean(axis=-1)]
        z = torch.from_numpy(np.stack([chans[i % 4] for i in range(shape[0])]))
    if tuple(z.shape) != shape:
        raise ValidationError(f"latent {path} has shape {tuple(z.shape)}, expected {shape}")
    return z


def load_records(entries: Sequence[dict], root, descriptor: BackboneDescriptor, encoder: PromptEncoder,
                 cache: PriorStackCache, kind: str = "pose") -> List[TripletRecord]:
    """Load manifest entries, skipping unreadable ones; abort when more than 10% fail."""
    root = Path(root)
    records, skipped = [], []
    for entry in entries:
        try:
            z0 = load_latent(root / entry["image"], descriptor)
            bundle = encoder.encode(entry["prompt"], require_human=True)
            prior = cache.get(load_prior_image(root / entry["prior_image"], PriorKind(kind)))
        except Exception as exc:  # noqa: BLE001 - any unreadable record is skipped
            log.warning("skipping record %s: %s", entry.get("id"), exc)
            skipped.append(entry.get("id"))
            continue
        records.append(TripletRecord(entry["id"], z0, bundle, prior))
    if len(skipped) > MAX_SKIP_FRACTION * len(entries) or not records:
        raise ValidationError(f"aborting: {len(skipped)} of {len(entries)} records unreadable ({skipped})")
    return records


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([int(seed), int(epoch)]).permutation(n)


def iterate_batches(records: Sequence[TripletRecord], config: TrainingConfig, start_step: int = 0):
    """Yield ``(step, Batch)`` from ``start_step`` on, fully determined by seed and step."""
    n = len(records)
    per_epoch = math.ceil(n / config.batch_size)
    total = config.max_steps if config.max_steps is not None else config.epochs * per_epoch
    step = start_step
    while step < total:
        epoch, b = divmod(step, per_epoch)
        order = epoch_order(n, config.seed, epoch)
        idx = order[b * config.batch_size:(b + 1) * config.batch_size]
        yield step, Batch.from_records([records[i] for i in idx])
        step += 1


def run_training(config: TrainingConfig, manifest, out_dir, backbone: Optional[ToyBackbone] = None,
                 resume_from=None, encoder: Optional[PromptEncoder] = None, backbone_seed: int = 0,
                 descriptor: Optional[BackboneDescriptor] = None, stop_after: Optional[int] = None):
    """Train from a JSONL manifest; returns ``(checkpoint_path, history)``.

    Per-step loss breakdowns are appended to ``out_dir/metrics.jsonl``.
    ``stop_after`` ends the run early (used to exercise resumption).
    """
    manifest = Path(manifest)
    entries = read_manifest(manifest)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if backbone is None:
        backbone = toy_backbone(descriptor, seed=backbone_seed)
    encoder = encoder or PromptEncoder()
    cache = PriorStackCache(make_extractor(config.extractor), config.extractor)
    records = load_records(entries, manifest.parent, backbone.descriptor, encoder, cache, config.prior_kind)
    if resume_from is not None:
        state = restore_state(load_checkpoint(resume_from), backbone)
        state.config = config if config.to_dict() == state.config.to_dict() else state.config
    else:
        state = TrainingState(backbone, config)
    metrics_path = out / "metrics.jsonl"
    mode = "a" if resume_from is not None else "w"
    history = []
    with metrics_path.open(mode, encoding="utf-8") as fh:
        for step, batch in iterate_batches(records, state.config, state.step):
            if stop_after is not None and step >= stop_after:
                break
            bd = training_step(batch, state)
            history.append(bd)
            fh.write(json.dumps(bd.to_record(), sort_keys=True) + "\n")
            if state.config.checkpoint_every and state.step % state.config.checkpoint_every == 0:
                save_checkpoint(state, out / "checkpoints" / f"step_{state.step:06d}.npz")
    final = save_checkpoint(state, out / "checkpoint.npz")
    return final, history, state
