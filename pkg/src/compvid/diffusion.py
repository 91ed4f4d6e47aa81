"""Noise schedule, forward corruption, the epsilon-regression loss, guidance and DDIM."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule; arrays are indexed by ``t - 1`` for t in 1..T."""

    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2

    def __post_init__(self):
        if self.timesteps < 1:
            raise ValueError("timesteps must be >= 1")
        if not 0 < self.beta_start < self.beta_end < 1:
            raise ValueError("need 0 < beta_start < beta_end < 1")
        betas = np.linspace(self.beta_start, self.beta_end, self.timesteps, dtype=np.float64)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", 1.0 - betas)
        object.__setattr__(self, "alpha_bars", np.cumprod(1.0 - betas))

    def alpha_bar(self, t) -> np.ndarray:
        """alpha_bar at timestep(s) t, with alpha_bar(0) = 1."""
        t = np.asarray(t, dtype=np.int64)
        if np.any(t < 0) or np.any(t > self.timesteps):
            raise ValueError(f"timestep out of range [0, {self.timesteps}]")
        ab = np.concatenate([[1.0], self.alpha_bars])
        return ab[t]

    def to_dict(self) -> dict:
        return {"timesteps": self.timesteps, "beta_start": self.beta_start, "beta_end": self.beta_end}


def _check_t(schedule: NoiseSchedule, t) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    if np.any(t < 1) or np.any(t > schedule.timesteps):
        raise ValueError(f"timestep out of range [1, {schedule.timesteps}]")
    return t


def _bcast(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape(v.shape + (1,) * (ndim - v.ndim))


def q_sample(schedule: NoiseSchedule, z0, t, eps) -> np.ndarray:
    """z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps; ``t`` may be per-sample along axis 0."""
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if eps.shape != z0.shape:
        raise ValueError(f"noise shape {eps.shape} != latent shape {z0.shape}")
    t = _check_t(schedule, t)
    ab = _bcast(schedule.alpha_bar(t), z0.ndim)
    return (np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps).astype(z0.dtype)


def predict_z0(schedule: NoiseSchedule, z_t, t, eps) -> np.ndarray:
    ab = _bcast(schedule.alpha_bar(t), np.ndim(z_t))
    return (z_t - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)


def diffusion_loss(model: Callable, schedule: NoiseSchedule, z0: np.ndarray, cond, rng) -> Tensor:
    """Mean squared error between injected and predicted noise.

    ``model(z_t, t, cond)`` returns a Tensor; ``z0`` is a batch [B, ...].
    One timestep per sample is drawn uniformly from 1..T.
    """
    z0 = np.asarray(z0)
    if z0.shape[0] == 0:
        raise ValueError("diffusion_loss: empty batch")
    rng = np.random.default_rng(rng)
    t = rng.integers(1, schedule.timesteps + 1, size=z0.shape[0])
    eps = rng.standard_normal(z0.shape).astype(z0.dtype)
    z_t = q_sample(schedule, z0, t, eps)
    pred = model(z_t, t, cond)
    return T.mse(pred, Tensor(eps))


@dataclass
class GuidancePair:
    """Two condition sets and the scale that extrapolates from the first to the second."""

    c1: object
    c2: object
    omega: float = 3.0

    def __post_init__(self):
        if self.omega < 0:
            raise ValueError("guidance scale must be >= 0")


def cfg_epsilon(model: Callable, z_t, t, pair: GuidancePair) -> np.ndarray:
    """eps(c1) + omega * (eps(c2) - eps(c1)); exactly two model evaluations.

    The extrapolation form is already exact for omega = 0 and for c1 = c2;
    omega = 1 returns eps(c2) as is, since e1 + (e2 - e1) can differ from e2
    in the last bit.
    """
    e1 = np.asarray(_eval(model, z_t, t, pair.c1))
    e2 = np.asarray(_eval(model, z_t, t, pair.c2))
    if pair.omega == 1.0:
        return e2.copy()
    return e1 + pair.omega * (e2 - e1)


def _eval(model, z_t, t, cond):
    out = model(z_t, t, cond)
    return out.data if isinstance(out, Tensor) else out


def ddim_timesteps(timesteps: int, steps: int) -> list[int]:
    """Uniform-stride subsequence T, T - s, ... with ``steps`` entries."""
    if steps < 1 or steps > timesteps:
        raise ValueError(f"steps must be in [1, {timesteps}], got {steps}")
    stride = timesteps // steps
    return [timesteps - i * stride for i in range(steps)]


def ddim_sample(model: Callable, schedule: NoiseSchedule, pair: GuidancePair, steps: int, shape,
                seed=None, z_T: np.ndarray | None = None, dtype=np.float32,
                clip: tuple[float, float] | None = None) -> np.ndarray:
    """Deterministic (eta = 0) DDIM with guidance from ``pair``.

    Starts from ``z_T`` or standard normal noise drawn from ``seed``; the
    final update lands on t = 0 and returns the predicted clean latent.
    ``clip`` bounds each predicted clean latent to the data range; at large t
    the division by sqrt(alpha_bar) otherwise amplifies small epsilon errors
    a hundredfold.
    """
    ts = ddim_timesteps(schedule.timesteps, steps)
    if z_T is None:
        z = np.random.default_rng(seed).standard_normal(shape).astype(dtype)
    else:
        z = np.array(z_T, dtype=dtype)
    batch = z.shape[0]
    for i, t in enumerate(ts):
        t_next = ts[i + 1] if i + 1 < len(ts) else 0
        tb = np.full(batch, t)
        eps = cfg_epsilon(model, z, tb, pair).astype(np.float64)
        ab, ab_next = schedule.alpha_bar(t), schedule.alpha_bar(t_next)
        z0_hat = (z - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
        if clip is not None:
            z0_hat = np.clip(z0_hat, *clip)
        z = (np.sqrt(ab_next) * z0_hat + np.sqrt(1.0 - ab_next) * eps).astype(dtype)
    return z
