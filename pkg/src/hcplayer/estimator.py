"""scikit-learn style wrapper around training and sampling."""
from __future__ import annotations

import tempfile
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .backbone import toy_backbone
from .exceptions import ValidationError
from .sampling import SamplerConfig, attach_hcp, detach_hcp, generate
from .training import TrainingConfig, load_checkpoint, run_training


class HcPFineTuner(BaseEstimator):
    """Fits HcP layers on a manifest of (latent, prompt, prior) triplets.

    ``fit`` takes the manifest path; ``predict`` takes prompts and returns
    sampled latents ``[n_prompts, num_images, C, H, W]``.  Priors are only
    read by ``fit``.
    """

    def __init__(self, alpha: float = 0.1, gamma: float = 0.9, learning_rate: float = 1e-4,
                 batch_size: int = 8, max_steps: Optional[int] = None, epochs: int = 10,
                 window: Tuple[int, int] = (0, 1000), hidden_width: int = 1024, seed: int = 0,
                 backbone_seed: int = 0, sampling_steps: int = 50, guidance_scale: float = 7.5,
                 out_dir: Optional[str] = None):
        self.alpha = alpha
        self.gamma = gamma
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.epochs = epochs
        self.window = window
        self.hidden_width = hidden_width
        self.seed = seed
        self.backbone_seed = backbone_seed
        self.sampling_steps = sampling_steps
        self.guidance_scale = guidance_scale
        self.out_dir = out_dir

    def _training_config(self) -> TrainingConfig:
        return TrainingConfig(alpha=self.alpha, gamma=self.gamma, learning_rate=self.learning_rate,
                              batch_size=self.batch_size, max_steps=self.max_steps, epochs=self.epochs,
                              window=tuple(self.window), hidden_width=self.hidden_width, seed=self.seed)

    def fit(self, X, y=None):
        manifest = Path(X)
        if not manifest.is_file():
            raise ValidationError(f"manifest {manifest} does not exist")
        out = Path(self.out_dir) if self.out_dir else Path(tempfile.mkdtemp(prefix="hcplayer-"))
        ckpt, history, _ = run_training(self._training_config(), manifest, out, backbone_seed=self.backbone_seed)
        self.checkpoint_ = str(ckpt)
        self.history_ = [bd.to_record() for bd in history]
        self.n_steps_ = len(history)
        return self

    def predict(self, X: Sequence[str], gamma: Optional[float] = None) -> np.ndarray:
        check_is_fitted(self, "checkpoint_")
        prompts: List[str] = [X] if isinstance(X, str) else list(X)
        if not prompts:
            raise ValidationError("predict needs at least one prompt")
        backbone = toy_backbone(seed=self.backbone_seed)
        attach_hcp(backbone, load_checkpoint(self.checkpoint_), gamma=gamma)
        cfg = SamplerConfig(steps=self.sampling_steps, guidance_scale=self.guidance_scale, seed=self.seed)
        out = np.stack([generate(p, cfg, backbone)["latents"].numpy() for p in prompts])
        detach_hcp(backbone)
        return out
