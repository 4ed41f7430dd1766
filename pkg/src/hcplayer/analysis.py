"""Recording and summarising cross-attention maps during sampling."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .archive import Archive, ArchiveWriter
from .exceptions import ValidationError

_KEY_RE = re.compile(r"^(?P<layer>.+)@(?P<t>\d+)$")


def _key(layer: str, t: int) -> str:
    return f"{layer}@{int(t)}"


@dataclass
class AttentionTrace:
    """Maps keyed by ``(layer, timestep)``, each ``[heads, P, N]``."""

    maps: Dict[Tuple[str, int], np.ndarray] = field(default_factory=dict)
    layers: Dict[str, dict] = field(default_factory=dict)
    prompt: dict = field(default_factory=dict)
    sampler: dict = field(default_factory=dict)

    def entries(self) -> Dict[Tuple[str, int, int], np.ndarray]:
        out = {}
        for (layer, t), m in self.maps.items():
            for h in range(m.shape[0]):
                out[(layer, t, h)] = m[h]
        return out

    @property
    def timesteps(self) -> List[int]:
        return sorted({t for _, t in self.maps}, reverse=True)

    @property
    def layer_ids(self) -> List[str]:
        present = {l for l, _ in self.maps}
        return [l for l in self.layers if l in present]

    def check_invariants(self, tol: float = 1e-5) -> None:
        for (layer, t), m in self.maps.items():
            if np.any(m < 0):
                raise ValidationError(f"trace map {layer}@{t} has negative entries")
            rows = m.astype(np.float64).sum(axis=-1)
            if np.max(np.abs(rows - 1.0)) > tol:
                raise ValidationError(f"trace map {layer}@{t} is not row-stochastic")

    def meta(self) -> dict:
        return {"kind": "attention-trace", "layers": self.layers, "prompt": self.prompt, "sampler": self.sampler}

    def save(self, path) -> Path:
        with ArchiveWriter(path, self.meta()) as w:
            for (layer, t), m in sorted(self.maps.items(), key=lambda kv: (kv[0][0], -kv[0][1])):
                w.add(_key(layer, t), m)
        return Path(path)

    @classmethod
    def load(cls, path) -> "AttentionTrace":
        arc = Archive(path)
        if arc.meta.get("kind") != "attention-trace":
            raise ValidationError(f"{path} is not an attention-trace archive")
        maps = {}
        for key in arc.keys():
            m = _KEY_RE.match(key)
            maps[(m.group("layer"), int(m.group("t")))] = arc[key]
        return cls(maps, arc.meta["layers"], arc.meta.get("prompt", {}), arc.meta.get("sampler", {}))


class TraceRecorder:
    """Collects maps from a sampling run.

    ``layers``/``timesteps`` select what is kept (``None`` keeps everything, an
    empty list keeps nothing).  With ``path`` every map is streamed to an
    archive as it arrives and nothing is held in memory.
    """

    def __init__(self, layers: Optional[Iterable[str]] = None, timesteps: Optional[Iterable[int]] = None,
                 path=None):
        self.layers = None if layers is None else list(layers)
        self.timesteps = None if timesteps is None else {int(t) for t in timesteps}
        self.path = None if path is None else Path(path)
        self.trace = AttentionTrace()
        self._writer: Optional[ArchiveWriter] = None

    def bind(self, descriptor, bundle=None, sampler_config=None) -> None:
        known = descriptor.layer_ids
        if self.layers is not None:
            unknown = [l for l in self.layers if l not in known]
            if unknown:
                raise ValidationError(f"trace selection names unknown layers {unknown}; known: {known}")
        self.trace.layers = {l.id: {"stage": l.stage, "side": l.side, "heads": l.head_count}
                             for l in descriptor.layers}
        if bundle is not None:
            self.trace.prompt = {"text": bundle.raw_text, "token_ids": list(bundle.token_ids),
                                 "human_indices": list(bundle.human_indices),
                                 "words": [[w, list(s)] for w, s in (bundle.words or [])]}
        if sampler_config is not None:
            self.trace.sampler = sampler_config.to_dict()
        if self.path is not None:
            self._writer = ArchiveWriter(self.path, self.trace.meta())

    def wants_layer(self, layer_id: str) -> bool:
        return self.layers is None or layer_id in self.layers

    def record(self, layer_id: str, t: int, maps) -> None:
        if not self.wants_layer(layer_id) or (self.timesteps is not None and int(t) not in self.timesteps):
            return
        arr = maps.detach().cpu().numpy() if isinstance(maps, torch.Tensor) else np.asarray(maps)
        arr = arr.astype(np.float32)
        if self._writer is not None:
            self._writer.add(_key(layer_id, t), arr)
        else:
            self.trace.maps[(layer_id, int(t))] = arr

    def close(self) -> None:
        if self._writer is not None:
            self._writer.meta = self.trace.meta()
            self._writer.close()


def record_maps(run, selection: Optional[dict] = None, path=None) -> AttentionTrace:
    """Execute ``run(recorder)`` with a recorder built from ``selection``.

    ``selection`` may hold ``"layers"`` and ``"timesteps"``.
    """
    selection = selection or {}
    rec = TraceRecorder(selection.get("layers"), selection.get("timesteps"), path)
    run(rec)
    return AttentionTrace.load(path) if path is not None else rec.trace


def _check_token(trace: AttentionTrace, token: int) -> None:
    if not trace.maps:
        raise ValidationError("trace is empty")
    n = next(iter(trace.maps.values())).shape[-1]
    if not 0 <= token < n:
        raise ValidationError(f"token index {token} out of range for {n} tokens")


def average_over_timesteps(trace: AttentionTrace, token: int) -> Dict[str, np.ndarray]:
    """Mean over timesteps and heads of column ``token``, as ``[side, side]`` per layer."""
    _check_token(trace, token)
    out = {}
    for layer in trace.layer_ids:
        cols = [m[:, :, token].astype(np.float64) for (l, _), m in trace.maps.items() if l == layer]
        mean = np.mean(np.stack(cols), axis=(0, 1))
        side = int(round(mean.size ** 0.5))
        out[layer] = mean.reshape(side, side)
    return out


def average_maps(trace: AttentionTrace) -> Dict[str, np.ndarray]:
    """Mean over timesteps and heads of the full ``[P, N]`` maps, per layer."""
    out = {}
    for layer in trace.layer_ids:
        stack = np.stack([m.astype(np.float64) for (l, _), m in trace.maps.items() if l == layer])
        out[layer] = stack.mean(axis=(0, 1))
    return out


@dataclass
class AttentionGrid:
    """``cells[i, j]`` is the map at ``timesteps[i]`` and column group ``groups[j]``."""

    cells: np.ndarray
    timesteps: List[int]
    groups: List[Tuple[str, int]]
    token: int

    def save(self, path) -> Path:
        meta = {"kind": "attention-grid", "timesteps": self.timesteps,
                "groups": [list(g) for g in self.groups], "token": self.token}
        with ArchiveWriter(path, meta) as w:
            w.add("cells", self.cells)
        return Path(path)

    @classmethod
    def load(cls, path) -> "AttentionGrid":
        arc = Archive(path)
        return cls(arc["cells"], arc.meta["timesteps"], [tuple(g) for g in arc.meta["groups"]], arc.meta["token"])


def grid_by_scale_and_step(trace: AttentionTrace, token: int, display: Optional[int] = None) -> AttentionGrid:
    """Head-mean maps of ``token`` arranged with timestep down the rows and scale stage across.

    Layers sharing a ``(stage, side)`` are averaged into one column; columns
    follow forward order.  Cells are bilinearly resized to ``display`` pixels
    (default: the largest side in the trace).
    """
    _check_token(trace, token)
    groups: List[Tuple[str, int]] = []
    members: Dict[Tuple[str, int], List[str]] = {}
    for layer in trace.layer_ids:
        info = trace.layers[layer]
        g = (info["stage"], int(info["side"]))
        if g not in members:
            groups.append(g)
            members[g] = []
        members[g].append(layer)
    steps = trace.timesteps
    if len({s for _, s in groups}) < 2 or len(steps) < 2:
        raise ValidationError(
            f"grid needs at least 2 scales and 2 timesteps, trace has scales "
            f"{sorted({s for _, s in groups})} and {len(steps)} timesteps")
    size = display or max(s for _, s in groups)
    cells = np.zeros((len(steps), len(groups), size, size), dtype=np.float64)
    for i, t in enumerate(steps):
        for j, g in enumerate(groups):
            maps = [trace.maps[(l, t)][:, :, token].astype(np.float64).mean(axis=0)
                    for l in members[g] if (l, t) in trace.maps]
            if not maps:
                raise ValidationError(f"trace lacks layer group {g} at timestep {t}")
            m = np.mean(maps, axis=0).reshape(g[1], g[1])
            if g[1] != size:
                m = F.interpolate(torch.from_numpy(m)[None, None], size=(size, size), mode="bilinear",
                                  align_corners=False)[0, 0].numpy()
            cells[i, j] = m
    return AttentionGrid(cells, steps, groups, token)


def export_heatmaps(maps: Mapping[str, np.ndarray], out_dir) -> Path:
    """Write one grayscale PNG per map, min-max normalised, plus ``heatmaps.json`` with the bounds."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for name, m in maps.items():
        m = np.asarray(m, dtype=np.float64)
        if m.ndim != 2 or not np.all(np.isfinite(m)):
            raise ValidationError(f"heatmap {name!r} must be a finite 2-D array")
        lo, hi = float(m.min()), float(m.max())
        scaled = np.zeros_like(m) if hi == lo else (m - lo) / (hi - lo)
        fname = f"{name}.png"
        Image.fromarray(np.round(scaled * 255).astype(np.uint8), mode="L").save(out / fname)
        manifest[name] = {"file": fname, "min": lo, "max": hi, "shape": list(m.shape)}
    (out / "heatmaps.json").write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return out
