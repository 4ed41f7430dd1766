"""FID, KID and CLIP-score over pluggable feature embedders."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .exceptions import DegenerateInputError, NumericalError, ShapeError, ValidationError
from .validation import check_finite_matrix, check_positive_int

EIG_CLIP_TOL = 1e-8


@dataclass
class FeatureSet:
    features: np.ndarray
    source: str = "real"
    embedder: str = "unknown"

    def __post_init__(self):
        self.features = check_finite_matrix(self.features, f"{self.source} features")


def _features(x) -> np.ndarray:
    return x.features if isinstance(x, FeatureSet) else check_finite_matrix(x, "features")


def _sqrt_psd(mat: np.ndarray, name: str) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    _check_eigs(vals, name)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def _check_eigs(vals: np.ndarray, name: str) -> None:
    if vals.size and vals.min() < -EIG_CLIP_TOL:
        cond = float(np.abs(vals).max() / max(np.abs(vals).min(), np.finfo(float).tiny))
        raise NumericalError(
            f"{name} has eigenvalue {vals.min():.3e} below -{EIG_CLIP_TOL:g} (condition ~{cond:.3e})")


def frechet_distance(mu_a, sigma_a, mu_b, sigma_b) -> float:
    """Frechet distance between two Gaussians.

    The trace of ``(S_a S_b)^{1/2}`` is computed as the trace of the symmetric
    square root of ``S_a^{1/2} S_b S_a^{1/2}``.
    """
    diff = mu_a - mu_b
    root_a = _sqrt_psd(sigma_a, "covariance A")
    middle = root_a @ sigma_b @ root_a
    vals = np.linalg.eigvalsh((middle + middle.T) / 2)
    _check_eigs(vals, "sqrt(S_A) S_B sqrt(S_A)")
    tr_cross = np.sqrt(np.clip(vals, 0.0, None)).sum()
    value = float(diff @ diff + np.trace(sigma_a) + np.trace(sigma_b) - 2.0 * tr_cross)
    return max(value, 0.0)


def fid(a, b) -> float:
    fa, fb = _features(a), _features(b)
    if fa.shape[1] != fb.shape[1]:
        raise ShapeError(f"feature widths differ: {fa.shape[1]} vs {fb.shape[1]}")
    if fa.shape[0] < 2 or fb.shape[0] < 2:
        raise ValidationError("FID needs at least 2 samples per set")
    cov_a = np.atleast_2d(np.cov(fa, rowvar=False))
    cov_b = np.atleast_2d(np.cov(fb, rowvar=False))
    return frechet_distance(fa.mean(axis=0), cov_a, fb.mean(axis=0), cov_b)


def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return (x @ y.T / x.shape[1] + 1.0) ** 3


def mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    """Unbiased MMD^2 for equal-size samples, excluding all ``i == j`` terms."""
    m = x.shape[0]
    if m < 2 or y.shape[0] != m:
        raise ValidationError("unbiased MMD needs two samples of equal size >= 2")
    k_xx = polynomial_kernel(x, x)
    k_yy = polynomial_kernel(y, y)
    k_xy = polynomial_kernel(x, y)
    off = m * (m - 1)
    return float((k_xx.sum() - np.trace(k_xx) + k_yy.sum() - np.trace(k_yy)
                  - 2.0 * (k_xy.sum() - np.trace(k_xy))) / off)


def kid(a, b, subset_size: int = 100, subsets: int = 100, seed: int = 0) -> Tuple[float, float]:
    """Mean and standard deviation of the unbiased MMD^2 over random subsets."""
    fa, fb = _features(a), _features(b)
    if fa.shape[1] != fb.shape[1]:
        raise ShapeError(f"feature widths differ: {fa.shape[1]} vs {fb.shape[1]}")
    check_positive_int(subset_size, "subset_size")
    check_positive_int(subsets, "subsets")
    if subset_size > min(fa.shape[0], fb.shape[0]):
        raise ValidationError(
            f"subset_size={subset_size} exceeds set sizes ({fa.shape[0]}, {fb.shape[0]})")
    rng = np.random.default_rng(seed)
    values = np.empty(subsets)
    for s in range(subsets):
        ia = np.sort(rng.choice(fa.shape[0], subset_size, replace=False))
        ib = np.sort(rng.choice(fb.shape[0], subset_size, replace=False))
        values[s] = mmd2_unbiased(fa[ia], fb[ib])
    return float(values.mean()), float(values.std())


def clip_score(image_embeddings, text_embeddings) -> float:
    """Mean of ``100 * max(0, cos(image_i, text_i))`` over row-aligned pairs."""
    img = check_finite_matrix(image_embeddings, "image embeddings")
    txt = check_finite_matrix(text_embeddings, "text embeddings")
    if img.shape != txt.shape:
        raise ShapeError(f"shape mismatch: images {img.shape} vs texts {txt.shape}")
    ni = np.linalg.norm(img, axis=1)
    nt = np.linalg.norm(txt, axis=1)
    if np.any(ni == 0) or np.any(nt == 0):
        raise DegenerateInputError("zero-norm embedding row in CLIP-score input")
    cos = np.einsum("ij,ij->i", img, txt) / (ni * nt)
    return float(np.mean(100.0 * np.maximum(cos, 0.0)))


class ToyEmbedder:
    """Deterministic random-projection embedder for images (``[H, W, C]`` uint8)."""

    def __init__(self, dim: int = 16, side: int = 16, seed: int = 0):
        self.dim = dim
        self.side = side
        self.seed = seed
        self.id = f"toy-proj-{dim}-{side}-{seed}"

    def __call__(self, images) -> FeatureSet:
        from PIL import Image

        rows = []
        proj = None
        for im in images:
            arr = np.asarray(Image.fromarray(np.asarray(im, dtype=np.uint8)).convert("L")
                             .resize((self.side, self.side), Image.BILINEAR), dtype=np.float64) / 255.0
            flat = arr.ravel()
            if proj is None:
                proj = np.random.default_rng(self.seed).standard_normal((flat.size, self.dim)) / np.sqrt(flat.size)
            rows.append(flat @ proj)
        return FeatureSet(np.stack(rows), "generated", self.id)
