"""Deterministic synthetic image-text-prior triplets for desk-scale runs.

Each record is a stick figure drawn on a 256x256 pose canvas, a 16x16 latent
whose first channels carry a downsampled copy of the figure, and a prompt
with at least one person word.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

PROMPTS = (
    "a young woman doing yoga on beach",
    "two men dancing tango",
    "a girl jumping in a park",
    "a man running on the street",
    "a boy doing a handstand on grass",
    "a dancer practicing ballet in a studio",
    "a woman stretching after a run",
    "an athlete doing a cartwheel",
)

# (parent, child) limbs over 11 joints
_LIMBS = ((0, 1), (1, 2), (2, 3), (2, 4), (3, 5), (4, 6), (1, 7), (1, 8), (7, 9), (8, 10))


def _skeleton(rng: np.random.Generator, size: int) -> np.ndarray:
    cx, cy = rng.uniform(0.35, 0.65, size=2) * size
    scale = rng.uniform(0.55, 0.8) * size / 2
    base = np.array([
        [0.0, -0.85],  # head
        [0.0, -0.55],  # neck
        [0.0, 0.05],   # hip
        [-0.2, 0.45], [0.2, 0.45],     # knees
        [-0.25, 0.9], [0.25, 0.9],     # feet
        [-0.35, -0.25], [0.35, -0.25],  # elbows
        [-0.55, -0.6], [0.55, 0.05],   # hands
    ])
    jitter = rng.normal(0.0, 0.12, size=base.shape)
    angle = rng.uniform(-0.6, 0.6)
    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    pts = (base + jitter) @ rot.T
    return pts * scale + np.array([cx, cy])


def draw_pose(rng: np.random.Generator, size: int = 256) -> np.ndarray:
    img = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(img)
    pts = _skeleton(rng, size)
    width = max(2, size // 20)
    for a, b in _LIMBS:
        draw.line([tuple(pts[a]), tuple(pts[b])], fill=255, width=width)
    hx, hy = pts[0]
    r = size / 16
    draw.ellipse([hx - r, hy - r, hx + r, hy + r], fill=255)
    return np.asarray(img, dtype=np.uint8)


def pose_to_latent(pose: np.ndarray, rng: np.random.Generator, channels: int = 4, side: int = 16) -> np.ndarray:
    """Downsample the figure and write it, with alternating sign, into every latent channel."""
    small = Image.fromarray(pose).resize((side, side), Image.BOX)
    p = np.asarray(small, dtype=np.float32) / 255.0
    figure = 2.5 * (p - p.mean())
    z = np.empty((channels, side, side), dtype=np.float32)
    for c in range(channels):
        sign = 1.0 if c % 2 == 0 else -1.0
        z[c] = sign * figure + 0.3 * rng.standard_normal((side, side))
    return z


def make_synthetic_fixture(out_dir, n_records: int = 16, seed: int = 0, latent_channels: int = 4,
                           latent_side: int = 16) -> Path:
    """Write ``n_records`` triplets and ``manifest.jsonl`` under ``out_dir``; return the manifest path."""
    out = Path(out_dir)
    (out / "priors").mkdir(parents=True, exist_ok=True)
    (out / "latents").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lines = []
    for i in range(n_records):
        pose = draw_pose(rng)
        rec_id = f"rec{i:04d}"
        Image.fromarray(pose).save(out / "priors" / f"{rec_id}.png")
        np.save(out / "latents" / f"{rec_id}.npy", pose_to_latent(pose, rng, latent_channels, latent_side))
        lines.append({
            "id": rec_id,
            "image": f"latents/{rec_id}.npy",
            "prompt": PROMPTS[i % len(PROMPTS)],
            "prior_image": f"priors/{rec_id}.png",
        })
    manifest = out / "manifest.jsonl"
    manifest.write_text("".join(json.dumps(l) + "\n" for l in lines), encoding="utf-8")
    return manifest
