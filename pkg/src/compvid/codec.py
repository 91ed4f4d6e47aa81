"""Lossless space-to-depth latent codec."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .validation import check_divisible, check_video


def encode(x, factor: int = 4) -> np.ndarray:
    """Map an F x H x W x 3 clip to an F x H/f x W/f x 3f^2 latent.

    Channel order within a latent cell is (row offset, column offset, rgb).
    """
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ValueError(f"encode: expected (F, H, W, 3), got {x.shape}")
    f, h, w, _ = x.shape
    check_divisible(h, factor, "height")
    check_divisible(w, factor, "width")
    z = x.reshape(f, h // factor, factor, w // factor, factor, 3)
    return np.ascontiguousarray(z.transpose(0, 1, 3, 2, 4, 5).reshape(f, h // factor, w // factor, -1))


def decode(z, factor: int = 4) -> np.ndarray:
    """Exact inverse of :func:`encode`."""
    z = np.asarray(z)
    if z.ndim != 4:
        raise ValueError(f"decode: expected (F, h, w, c), got {z.shape}")
    f, h, w, c = z.shape
    if c != 3 * factor * factor:
        raise ValueError(f"decode: {c} latent channels, expected {3 * factor * factor} for factor {factor}")
    x = z.reshape(f, h, w, factor, factor, 3).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(f, h * factor, w * factor, 3))


def to_model_space(z) -> np.ndarray:
    """Codec latents live in [0, 1]; diffusion runs on [-1, 1]."""
    return 2.0 * np.asarray(z) - 1.0


def from_model_space(z) -> np.ndarray:
    return (np.asarray(z) + 1.0) / 2.0


def latent_channels(factor: int) -> int:
    return 3 * factor * factor


class SpaceToDepthCodec(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``transform`` encodes, ``inverse_transform`` decodes.

    ``fit`` only validates the clip geometry; the codec has no learned state
    in lossless mode.

    Parameters
    ----------
    factor : int, default=4
        Spatial downsampling factor.  Latent channels are ``3 * factor**2``.
    """

    def __init__(self, factor: int = 4):
        self.factor = factor

    def fit(self, X, y=None):
        X = check_video(X)
        check_divisible(X.shape[1], self.factor, "height")
        check_divisible(X.shape[2], self.factor, "width")
        self.n_channels_ = latent_channels(self.factor)
        return self

    def transform(self, X):
        return encode(X, self.factor)

    def inverse_transform(self, Z):
        return decode(Z, self.factor)
