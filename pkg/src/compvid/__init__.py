"""Compositional video latent diffusion at desk scale."""
from .codec import SpaceToDepthCodec, decode, encode
from .conditions import BlockMotionEstimator, ConditionSet, extract_conditions
from .corpus import generate_dataset, make_corpus
from .denoiser import Denoiser, ModelConfig
from .diffusion import GuidancePair, NoiseSchedule, ddim_sample
from .pipeline import CompositionalVideoLDM
from .trainer import TrainConfig, Trainer

__version__ = "0.1.0"

__all__ = [
    "BlockMotionEstimator", "CompositionalVideoLDM", "ConditionSet", "Denoiser", "GuidancePair",
    "ModelConfig", "NoiseSchedule", "SpaceToDepthCodec", "TrainConfig", "Trainer", "ddim_sample",
    "decode", "encode", "extract_conditions", "generate_dataset", "make_corpus",
]
