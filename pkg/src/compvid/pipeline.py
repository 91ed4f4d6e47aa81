"""Sampling helpers and the scikit-learn style estimator tying the parts together."""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .codec import decode, encode, from_model_space, to_model_space
from .conditions import ConditionSet
from .corpus import Sample
from .denoiser import Denoiser, ModelConfig, collate
from .diffusion import GuidancePair, NoiseSchedule, ddim_sample
from .trainer import TrainConfig, Trainer, load_checkpoint, prepare_clips, save_checkpoint

log = logging.getLogger(__name__)


class BatchedConditionModel:
    """Adapter so DDIM can call a Denoiser with lists of ConditionSets."""

    def __init__(self, model: Denoiser):
        self.model = model

    def __call__(self, z_t, t, conds):
        cb = collate(list(conds), np.shape(z_t)[1], self.model.config.search_range, self.model.stc)
        return self.model(z_t, t, cb).data


def sample_latents(model: Denoiser, schedule: NoiseSchedule, c2: list[ConditionSet],
                   c1: list[ConditionSet] | None = None, frames: int = 8, steps: int = 25,
                   omega: float = 3.0, seeds=None) -> np.ndarray:
    """Guided DDIM latents (codec space) for a batch of condition sets.

    Every clip gets its own starting noise from its seed, so a clip's sample
    does not depend on what else is in the batch.
    """
    cfg = model.config
    b = len(c2)
    c1 = c1 if c1 is not None else [ConditionSet() for _ in range(b)]
    seeds = list(range(b)) if seeds is None else list(seeds)
    h, w = cfg.height // cfg.factor, cfg.width // cfg.factor
    noise = np.stack([np.random.default_rng(s).standard_normal((frames, h, w, cfg.latent_channels))
                      for s in seeds]).astype(np.float32)
    pair = GuidancePair(c1=c1, c2=c2, omega=omega)
    z = ddim_sample(BatchedConditionModel(model), schedule, pair, steps, noise.shape, z_T=noise,
                    clip=(-1.0, 1.0))
    return from_model_space(z)


def sample_videos(model: Denoiser, schedule: NoiseSchedule, c2, c1=None, frames: int = 8,
                  steps: int = 25, omega: float = 3.0, seeds=None, batch: int = 16) -> np.ndarray:
    """Decoded videos clipped to [0, 1]; the batch is processed in chunks."""
    out = []
    seeds = list(range(len(c2))) if seeds is None else list(seeds)
    for i in range(0, len(c2), batch):
        sl = slice(i, i + batch)
        z = sample_latents(model, schedule, c2[sl], None if c1 is None else c1[sl], frames, steps,
                           omega, seeds[sl])
        out.extend(np.clip(decode(zz, model.config.factor), 0.0, 1.0) for zz in z)
    return np.stack(out)


class CompositionalVideoLDM(BaseEstimator):
    """Conditional video latent diffusion model with a fit/predict interface.

    ``fit`` runs both training stages on a list of corpus samples;
    ``predict`` turns condition sets into videos.

    Parameters
    ----------
    height, width : int
        Frame size in pixels.
    factor : int
        Codec downsampling factor.
    base_width, stc_width : int
        Channel widths of the UNet and of each condition encoder.
    stc_temporal : bool
        Keep the temporal transformer inside condition encoders.
    conditions : tuple of str
        Sequential condition types the model accepts.
    stage1_steps, stage2_steps : int
        Optimizer steps per training stage.
    learning_rate, batch_size : float, int
    sample_steps : int
        DDIM steps at prediction time.
    guidance_scale : float
        Extrapolation weight between the two condition sets.
    random_state : int
    """

    def __init__(self, height=64, width=64, factor=4, base_width=64, stc_width=32, stc_temporal=True,
                 conditions=("motion", "depth", "sketch_seq", "mask", "single_image", "single_sketch"),
                 use_style=True, stage1_steps=3000, stage2_steps=5000, learning_rate=5e-5, batch_size=8,
                 block=8, search_range=4, sample_steps=50, guidance_scale=3.0, random_state=0):
        self.height = height
        self.width = width
        self.factor = factor
        self.base_width = base_width
        self.stc_width = stc_width
        self.stc_temporal = stc_temporal
        self.conditions = conditions
        self.use_style = use_style
        self.stage1_steps = stage1_steps
        self.stage2_steps = stage2_steps
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.block = block
        self.search_range = search_range
        self.sample_steps = sample_steps
        self.guidance_scale = guidance_scale
        self.random_state = random_state

    def _model_config(self) -> ModelConfig:
        return ModelConfig(factor=self.factor, height=self.height, width=self.width,
                           base_width=self.base_width, stc_width=self.stc_width,
                           stc_temporal=self.stc_temporal, conditions=tuple(self.conditions),
                           use_style=self.use_style, search_range=self.search_range,
                           seed=self.random_state)

    def fit(self, X: list[Sample], y=None, stage1_checkpoint=None):
        if not X:
            raise ValueError("fit needs at least one sample")
        clips = prepare_clips(X, self.factor, self.block, self.search_range)
        if stage1_checkpoint is not None:
            model, schedule, _, _ = load_checkpoint(stage1_checkpoint, {"stc_temporal": self.stc_temporal})
        else:
            model = Denoiser(self._model_config())
            schedule = NoiseSchedule(model.config.timesteps)
            cfg1 = TrainConfig(stage=1, lr=self.learning_rate, steps=self.stage1_steps,
                               batch_size=self.batch_size, seed=self.random_state)
            Trainer(model, cfg1, schedule).fit(clips)
        cfg2 = TrainConfig(stage=2, lr=self.learning_rate, steps=self.stage2_steps,
                           batch_size=self.batch_size, seed=self.random_state,
                           train_conditions=tuple(self.conditions) + (("style",) if self.use_style else ()))
        Trainer(model, cfg2, schedule).fit(clips)
        self.model_ = model
        self.schedule_ = schedule
        return self

    def predict(self, X: list[ConditionSet], frames: int = 8, seeds=None, c1=None) -> np.ndarray:
        check_is_fitted(self, "model_")
        return sample_videos(self.model_, self.schedule_, list(X), c1, frames, self.sample_steps,
                             self.guidance_scale, seeds)

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_checkpoint(path, self.model_, self.schedule_)

    @classmethod
    def load(cls, path, **params) -> "CompositionalVideoLDM":
        model, schedule, _, meta = load_checkpoint(path)
        mc = meta["model"]
        est = cls(height=mc["height"], width=mc["width"], factor=mc["factor"], base_width=mc["base_width"],
                  stc_width=mc["stc_width"], stc_temporal=mc["stc_temporal"],
                  conditions=tuple(mc["conditions"]), use_style=mc["use_style"],
                  search_range=mc["search_range"], random_state=mc["seed"], **params)
        est.model_ = model
        est.schedule_ = schedule
        return est


def encode_video(video, factor: int) -> np.ndarray:
    return to_model_space(encode(video, factor))
