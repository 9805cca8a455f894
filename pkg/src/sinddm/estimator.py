"""Scikit-learn style front door.

``SinDDM`` wraps the train/sample pipeline in the familiar estimator
shape: hyperparameters in ``__init__`` (stored verbatim, so ``clone`` and
``get_params`` behave), ``fit(X)`` on a single image, then ``sample``
for generation. Fitted state lives in trailing-underscore attributes.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .denoiser import DenoiserSpec
from .sampler import SampleConfig, sample
from .trainer import TrainConfig, train
from .validation import check_image, check_rng

__all__ = ["SinDDM"]


class SinDDM(BaseEstimator):
    """Single-image generative model with a fit/sample interface.

    Parameters mirror the training pipeline: pyramid geometry
    (scale_factor, num_scales), schedule length (timesteps), denoiser
    size (hidden_width, blocks, convs_per_block, embed_dim,
    padding_mode), and the optimization loop (steps, batch_size, lr,
    lr_halving_steps, ema_decay). ``num_scales=None`` picks the pyramid
    depth from the image size.

    Examples
    --------
    >>> model = SinDDM(steps=200, hidden_width=16, num_scales=3)
    >>> model.fit(image)                        # (H, W, 3) floats in [-1, 1]
    >>> variants = model.sample(4, random_state=0)
    """

    def __init__(
        self,
        scale_factor: float = 1.5,
        num_scales: int | None = None,
        timesteps: int = 100,
        hidden_width: int = 88,
        blocks: int = 4,
        convs_per_block: int = 4,
        embed_dim: int = 64,
        padding_mode: str = "layer",
        steps: int = 120_000,
        batch_size: int = 32,
        lr: float = 1e-3,
        lr_halving_steps: tuple[int, ...] = (20_000, 40_000, 70_000, 80_000, 90_000, 110_000),
        ema_decay: float = 0.995,
        blur_norm: str = "rmse",
        train_without_blur: bool = False,
        random_state: int = 0,
    ):
        self.scale_factor = scale_factor
        self.num_scales = num_scales
        self.timesteps = timesteps
        self.hidden_width = hidden_width
        self.blocks = blocks
        self.convs_per_block = convs_per_block
        self.embed_dim = embed_dim
        self.padding_mode = padding_mode
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.lr_halving_steps = lr_halving_steps
        self.ema_decay = ema_decay
        self.blur_norm = blur_norm
        self.train_without_blur = train_without_blur
        self.random_state = random_state

    def _spec(self) -> DenoiserSpec:
        return DenoiserSpec(
            blocks=self.blocks,
            convs_per_block=self.convs_per_block,
            hidden_width=self.hidden_width,
            embed_dim=self.embed_dim,
            padding_mode=self.padding_mode,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.steps,
            batch_size=self.batch_size,
            lr=self.lr,
            lr_halving_steps=tuple(self.lr_halving_steps),
            ema_decay=self.ema_decay,
            seed=self.random_state,
            train_without_blur=self.train_without_blur,
        )

    def fit(self, X, y=None):
        """Train the denoiser on one image.

        X is a single (H, W, 3) array in [-1, 1]. y is ignored (present
        for pipeline compatibility).
        """
        img = check_image(X, "X")
        history: list[dict] = []
        self.checkpoint_ = train(
            img,
            self._spec(),
            self._train_config(),
            scale_factor=self.scale_factor,
            num_scales=self.num_scales,
            timesteps=self.timesteps,
            blur_norm=self.blur_norm,
            history=history,
        )
        self.history_ = history
        self.num_scales_ = self.checkpoint_.num_scales
        self.dims_ = self.checkpoint_.dims
        return self

    def sample(
        self,
        n_samples: int = 1,
        random_state=None,
        out_dims: tuple[int, int] | None = None,
        init_dims_scale: int | None = None,
    ) -> np.ndarray:
        """Draw ``n_samples`` images; returns (n, H, W, 3) in [-1, 1]."""
        check_is_fitted(self, "checkpoint_")
        rng = check_rng(random_state)
        cfg = SampleConfig(out_dims=out_dims, init_dims_scale=init_dims_scale)
        model = self.checkpoint_.build_model(use_ema=True)
        return np.stack(
            [sample(self.checkpoint_, cfg, rng, model=model) for _ in range(n_samples)]
        )

    def save(self, path) -> None:
        """Write the fitted checkpoint to ``path``."""
        check_is_fitted(self, "checkpoint_")
        from .checkpoint import save_checkpoint

        save_checkpoint(self.checkpoint_, path)

    @classmethod
    def load(cls, path) -> "SinDDM":
        """Rebuild a fitted estimator from a checkpoint file."""
        from .checkpoint import load_checkpoint

        ckpt = load_checkpoint(path)
        cfg, spec = ckpt.train_config, ckpt.spec
        est = cls(
            scale_factor=ckpt.scale_factor,
            num_scales=ckpt.num_scales,
            timesteps=ckpt.timesteps,
            hidden_width=spec.hidden_width,
            blocks=spec.blocks,
            convs_per_block=spec.convs_per_block,
            embed_dim=spec.embed_dim,
            padding_mode=spec.padding_mode,
            steps=cfg.steps,
            batch_size=cfg.batch_size,
            lr=cfg.lr,
            lr_halving_steps=cfg.lr_halving_steps,
            ema_decay=cfg.ema_decay,
            blur_norm=ckpt.plan.norm,
            train_without_blur=cfg.train_without_blur,
            random_state=cfg.seed,
        )
        est.checkpoint_ = ckpt
        est.history_ = []
        est.num_scales_ = ckpt.num_scales
        est.dims_ = ckpt.dims
        return est
