"""Spatio-temporal condition encoder and additive fusion."""
from __future__ import annotations

import math

import numpy as np

from . import nn
from . import tensor as T
from .conditions import SEQUENCE_CHANNELS
from .tensor import Tensor


class StcEncoder(nn.Module):
    """Per-condition encoder: conv (stride 2) -> conv -> average pool -> temporal layer -> projection.

    Maps a [B, F, H, W, C_in] pixel-resolution sequence to
    [B, F, C_fuse, H/f, W/f] features.  The projection starts at zero, so a
    fresh encoder contributes nothing.  ``temporal=False`` drops the temporal
    transformer and leaves a purely per-frame encoder.
    """

    def __init__(self, kind: str, factor: int, width: int, out_channels: int, rng,
                 dtype=np.float32, head_dim: int = 32, temporal: bool = True):
        if kind not in SEQUENCE_CHANNELS:
            raise ValueError(f"unknown condition type {kind!r}")
        if factor < 2 or factor & (factor - 1):
            raise ValueError(f"codec factor must be a power of two >= 2, got {factor}")
        self._kind = kind
        self._in = SEQUENCE_CHANNELS[kind]
        self._pools = int(math.log2(factor)) - 1
        self.conv1 = nn.Conv2d(self._in, width, 3, rng, dtype, stride=2)
        self.conv1._pad = 0
        self.conv2 = nn.Conv2d(width, width, 3, rng, dtype)
        self.temporal = nn.TemporalTransformer(width, min(head_dim, width), rng, dtype) if temporal else None
        self.proj = nn.Linear(width, out_channels, rng, dtype, zero=True)
        self._dtype = dtype

    def spatial(self, seq) -> Tensor:
        x = np.asarray(seq)
        if x.ndim != 5 or x.shape[-1] != self._in:
            raise ValueError(f"{self._kind}: expected [B, F, H, W, {self._in}] input, got {x.shape}")
        b, f, h, w, c = x.shape
        frames = x.reshape(b * f, h, w, c).transpose(0, 3, 1, 2)
        # one leading row/column of zeros: stride 2 then halves H and W exactly
        frames = Tensor(np.pad(frames, ((0, 0), (0, 0), (1, 0), (1, 0))), dtype=self._dtype)
        y = T.silu(self.conv1(frames))
        y = T.silu(self.conv2(y))
        for _ in range(self._pools):
            y = T.avg_pool2x(y)
        _, cw, hh, ww = y.shape
        return T.reshape(y, (b, f, cw, hh, ww))

    def __call__(self, seq) -> Tensor:
        y = self.spatial(seq)
        if self.temporal is not None:
            y = self.temporal(y)
        y = T.transpose(y, (0, 1, 3, 4, 2))
        y = self.proj(y)
        return T.transpose(y, (0, 1, 4, 2, 3))


def encode_condition(seq, encoder: StcEncoder) -> np.ndarray:
    """Single-clip convenience: F x H x W x C in, F x h x w x C_fuse out."""
    a = np.asarray(seq)
    if a.ndim == 3:
        a = a[..., None]
    out = encoder(a[None])
    return out.data[0].transpose(0, 2, 3, 1)


def fuse(features, z_t, keep=None) -> Tensor:
    """Sum condition features and append them after the latent channels.

    ``features`` are [B, F, C_fuse, h, w] tensors, ``z_t`` is [B, F, c, h, w].
    ``keep`` optionally holds one 0/1 weight per sample for each feature, which
    is how a dropped condition contributes exactly its zero feature.  An empty
    list fuses to zeros with ``C_fuse = c``.
    """
    z = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
    if not features:
        return T.concat([z, Tensor(np.zeros(z.shape, dtype=z.dtype))], axis=2)
    shape = features[0].shape
    total = None
    for i, feat in enumerate(features):
        if feat.shape != shape:
            raise ValueError(f"fuse: feature {i} has shape {feat.shape}, expected {shape}")
        if keep is not None:
            w = np.asarray(keep[i], dtype=feat.dtype).reshape(-1, 1, 1, 1, 1)
            feat = T.mul(feat, Tensor(w))
        total = feat if total is None else T.add(total, feat)
    if (shape[0], shape[1]) + shape[3:] != (z.shape[0], z.shape[1]) + z.shape[3:]:
        raise ValueError(f"fuse: features {shape} do not match latent {z.shape}")
    return T.concat([z, total], axis=2)
