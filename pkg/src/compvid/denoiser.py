"""3D UNet-lite noise predictor with condition routing."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .codec import latent_channels
from .conditions import (SEQUENCE_CHANNELS, TEXT_DIM, TEXT_LEN, ConditionSet, StyleEmbedder,
                         TextEmbedder, tokenize)
from .stc import StcEncoder, fuse
from .tensor import Tensor


@dataclass
class ModelConfig:
    """Architecture description; stored in every checkpoint."""

    factor: int = 4
    height: int = 64
    width: int = 64
    base_width: int = 64
    head_dim: int = 32
    time_dim: int = 128
    stc_width: int = 32
    stc_temporal: bool = True
    conditions: tuple = ("motion", "depth", "sketch_seq", "mask", "single_image", "single_sketch")
    use_style: bool = True
    groups: int = 8
    search_range: int = 4
    timesteps: int = 1000
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.conditions = tuple(self.conditions)
        unknown = [c for c in self.conditions if c not in SEQUENCE_CHANNELS]
        if unknown:
            raise ValueError(f"unknown condition types {unknown}")

    @property
    def latent_channels(self) -> int:
        return latent_channels(self.factor)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conditions"] = list(self.conditions)
        return d


@dataclass
class CondBatch:
    """Collated conditions for a batch: arrays plus per-sample keep weights."""

    text_ids: np.ndarray                                   # [B, TEXT_LEN], -1 = null
    style: np.ndarray | None = None                        # [B, H, W, 3]
    style_keep: np.ndarray | None = None                   # [B]
    sequences: dict = field(default_factory=dict)          # name -> [B, F, H, W, C]
    keep: dict = field(default_factory=dict)               # name -> [B]

    @property
    def batch(self) -> int:
        return self.text_ids.shape[0]


def collate(conds: list[ConditionSet], frames: int, search_range: int = 4,
            kinds=None) -> CondBatch:
    """Stack per-clip condition sets; absent entries become zeros with keep 0."""
    b = len(conds)
    ids = np.stack([tokenize(c.text) for c in conds]) if b else np.zeros((0, TEXT_LEN), np.int64)
    batch = CondBatch(text_ids=ids)
    styles = [c.style for c in conds]
    if any(s is not None for s in styles):
        ref = next(s for s in styles if s is not None)
        batch.style = np.stack([np.zeros_like(ref) if s is None else s for s in styles])
        batch.style_keep = np.array([s is not None for s in styles], dtype=np.float64)
    per = [c.sequence_inputs(frames, search_range) for c in conds]
    names = sorted({n for p in per for n in p}, key=list(SEQUENCE_CHANNELS).index)
    for name in names:
        if kinds is not None and name not in kinds:
            raise ValueError(f"model has no encoder for condition {name!r}")
        ref = next(p[name] for p in per if name in p)
        batch.sequences[name] = np.stack([p.get(name, np.zeros_like(ref)) for p in per])
        batch.keep[name] = np.array([name in p for p in per], dtype=np.float64)
    return batch


class ResBlock(nn.Module):
    def __init__(self, cin, cout, time_dim, groups, rng, dtype):
        self.norm1 = nn.GroupNorm(cin, groups, dtype)
        self.conv1 = nn.Conv2d(cin, cout, 3, rng, dtype)
        self.time = nn.Linear(time_dim, cout, rng, dtype)
        self.norm2 = nn.GroupNorm(cout, groups, dtype)
        self.conv2 = nn.Conv2d(cout, cout, 3, rng, dtype)
        self.skip = nn.Conv2d(cin, cout, 1, rng, dtype) if cin != cout else None

    def __call__(self, x: Tensor, temb: Tensor, frames: int) -> Tensor:
        h = self.conv1(T.silu(self.norm1(x)))
        bf, c, hh, ww = h.shape
        t = T.reshape(self.time(temb), (bf // frames, 1, c, 1, 1))
        h = T.reshape(T.reshape(h, (bf // frames, frames, c, hh, ww)) + t, (bf, c, hh, ww))
        h = self.conv2(T.silu(self.norm2(h)))
        return (x if self.skip is None else self.skip(x)) + h


class TemporalConvBlock(nn.Module):
    """Four stacked 1x1x3 convolutions with a residual connection."""

    def __init__(self, channels, groups, rng, dtype):
        self.norms = [nn.GroupNorm(channels, groups, dtype) for _ in range(4)]
        self.convs = [nn.TemporalConv(channels, channels, rng, dtype) for _ in range(4)]

    def __call__(self, x: Tensor, frames: int) -> Tensor:
        bf, c, hh, ww = x.shape
        h = x
        for norm, conv in zip(self.norms, self.convs):
            h = T.silu(norm(h))
            h = T.reshape(conv(T.reshape(h, (bf // frames, frames, c, hh, ww))), (bf, c, hh, ww))
        return x + h


class SpatialTransformer(nn.Module):
    """Per-frame self-attention, cross-attention to text/style tokens, feed-forward."""

    def __init__(self, channels, head_dim, context_dim, groups, rng, dtype):
        self.norm = nn.GroupNorm(channels, groups, dtype)
        self.ln1 = nn.LayerNorm(channels, dtype)
        self.self_attn = nn.Attention(channels, head_dim, rng, dtype)
        self.ln2 = nn.LayerNorm(channels, dtype)
        self.cross_attn = nn.Attention(channels, head_dim, rng, dtype, context_dim=context_dim)
        self.ln3 = nn.LayerNorm(channels, dtype)
        self.ff = nn.FeedForward(channels, rng, dtype)

    def __call__(self, x: Tensor, context: Tensor, frames: int) -> Tensor:
        bf, c, hh, ww = x.shape
        b = bf // frames
        tok = T.reshape(T.transpose(self.norm(x), (0, 2, 3, 1)), (b, frames, hh * ww, c))
        tok = tok + self.self_attn(self.ln1(tok))
        tok = tok + self.cross_attn(self.ln2(tok), context=context)
        tok = tok + self.ff(self.ln3(tok))
        out = T.transpose(T.reshape(tok, (bf, hh, ww, c)), (0, 3, 1, 2))
        return x + out


class UNetBlock(nn.Module):
    """Spatial conv, temporal conv, spatial transformer, temporal transformer."""

    def __init__(self, cin, cout, cfg: ModelConfig, rng, dtype):
        self.res = ResBlock(cin, cout, cfg.time_dim, cfg.groups, rng, dtype)
        self.tconv = TemporalConvBlock(cout, cfg.groups, rng, dtype)
        self.spatial = SpatialTransformer(cout, cfg.head_dim, TEXT_DIM, cfg.groups, rng, dtype)
        self.temporal = nn.TemporalTransformer(cout, cfg.head_dim, rng, dtype)

    def __call__(self, x, temb, context, frames):
        x = self.res(x, temb, frames)
        x = self.tconv(x, frames)
        x = self.spatial(x, context, frames)
        bf, c, hh, ww = x.shape
        y = self.temporal(T.reshape(x, (bf // frames, frames, c, hh, ww)))
        return T.reshape(y, (bf, c, hh, ww))


class UNet3D(nn.Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        c = cfg.latent_channels
        b = cfg.base_width
        self.time1 = nn.Linear(cfg.time_dim, cfg.time_dim, rng, dtype)
        self.time2 = nn.Linear(cfg.time_dim, cfg.time_dim, rng, dtype)
        self.conv_in = nn.Conv2d(2 * c, b, 3, rng, dtype)
        self.down0 = UNetBlock(b, b, cfg, rng, dtype)
        self.down1 = UNetBlock(b, 2 * b, cfg, rng, dtype)
        self.mid = ResBlock(2 * b, 2 * b, cfg.time_dim, cfg.groups, rng, dtype)
        self.up1 = UNetBlock(4 * b, 2 * b, cfg, rng, dtype)
        self.up0 = UNetBlock(3 * b, b, cfg, rng, dtype)
        self.norm_out = nn.GroupNorm(b, cfg.groups, dtype)
        self.conv_out = nn.Conv2d(b, c, 3, rng, dtype)
        self._time_dim = cfg.time_dim

    def __call__(self, x: Tensor, t, context: Tensor, frames: int) -> Tensor:
        """``x`` is [B*F, 2c, h, w]; returns [B*F, c, h, w]."""
        temb = T.sinusoidal_embed(np.asarray(t), self._time_dim, dtype=x.dtype)
        temb = self.time2(T.silu(self.time1(temb)))
        h = self.conv_in(x)
        s0 = self.down0(h, temb, context, frames)
        h = T.avg_pool2x(s0)
        s1 = self.down1(h, temb, context, frames)
        h = self.mid(s1, temb, frames)
        h = self.up1(T.concat([h, s1], axis=1), temb, context, frames)
        h = T.upsample2x(h)
        h = self.up0(T.concat([h, s0], axis=1), temb, context, frames)
        return self.conv_out(T.silu(self.norm_out(h)))


class Denoiser(nn.Module):
    """Noise predictor eps(z_t, c, t) with its condition encoders.

    Sequential conditions go through one :class:`StcEncoder` each and are
    fused into the UNet input; text and style become cross-attention tokens.
    """

    def __init__(self, cfg: ModelConfig | None = None):
        cfg = cfg or ModelConfig()
        self.config = cfg
        dtype = np.dtype(cfg.dtype).type
        rng = np.random.default_rng(cfg.seed)
        self.unet = UNet3D(cfg, rng, dtype)
        self.text = TextEmbedder(rng, dtype)
        self.style = StyleEmbedder(rng, dtype) if cfg.use_style else None
        self.stc = {kind: StcEncoder(kind, cfg.factor, cfg.stc_width, cfg.latent_channels, rng, dtype,
                                     head_dim=cfg.head_dim, temporal=cfg.stc_temporal)
                    for kind in cfg.conditions}
        self._dtype = dtype

    # checkpoint paths use "/" between the top-level namespaces
    def named_parameters(self, prefix: str = ""):
        yield from self.unet.named_parameters(f"{prefix}unet/")
        yield from self.text.named_parameters(f"{prefix}text/")
        if self.style is not None:
            yield from self.style.named_parameters(f"{prefix}style/")
        for kind, enc in self.stc.items():
            yield from enc.named_parameters(f"{prefix}stc/{kind}/")

    def stc_parameters(self) -> list[Tensor]:
        return [p for k, p in self.named_parameters() if k.startswith("stc/")]

    def context(self, cb: CondBatch) -> Tensor:
        tokens = self.text(cb.text_ids)
        if self.style is not None:
            if cb.style is not None:
                st = self.style(cb.style)
                st = T.mul(st, Tensor(cb.style_keep.astype(self._dtype).reshape(-1, 1, 1)))
            else:
                st = Tensor(np.zeros((cb.batch, 1, TEXT_DIM), dtype=self._dtype))
            tokens = T.concat([tokens, st], axis=1)
        b, m, d = tokens.shape
        return T.reshape(tokens, (b, 1, m, d))

    def condition_features(self, cb: CondBatch) -> tuple[list[Tensor], list[np.ndarray]]:
        feats, keeps = [], []
        for name, seq in cb.sequences.items():
            if name not in self.stc:
                raise ValueError(f"model has no encoder for condition {name!r}")
            if not np.any(cb.keep[name]):
                continue
            feats.append(self.stc[name](seq.astype(self._dtype)))
            keeps.append(cb.keep[name])
        return feats, keeps

    def __call__(self, z_t, t, cb: CondBatch) -> Tensor:
        """``z_t`` is [B, F, h, w, c] (array or Tensor); returns a Tensor of the same shape."""
        z = z_t if isinstance(z_t, Tensor) else Tensor(np.asarray(z_t, dtype=self._dtype))
        if z.ndim != 5:
            raise ValueError(f"denoise: expected latent [B, F, h, w, c], got {z.shape}")
        b, f, h, w, c = z.shape
        if c != self.config.latent_channels:
            raise ValueError(f"denoise: {c} latent channels, expected {self.config.latent_channels}")
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (b,))
        if np.any(t < 1) or np.any(t > self.config.timesteps):
            raise ValueError(f"denoise: timestep out of range [1, {self.config.timesteps}]")
        if cb.batch != b:
            raise ValueError(f"denoise: condition batch {cb.batch} != latent batch {b}")
        zc = T.transpose(z, (0, 1, 4, 2, 3))
        feats, keeps = self.condition_features(cb)
        x = fuse(feats, zc, keeps)
        x = T.reshape(x, (b * f, 2 * c, h, w))
        eps = self.unet(x, t, self.context(cb), f)
        return T.transpose(T.reshape(eps, (b, f, c, h, w)), (0, 1, 3, 4, 2))

    def denoise(self, z_t, t: int, cond: ConditionSet) -> np.ndarray:
        """Single-clip prediction: F x h x w x c latent in, same shape out."""
        z = np.asarray(z_t)
        cb = collate([cond], z.shape[0], self.config.search_range, self.stc)
        return self(z[None], t, cb).data[0]
