"""Two-stage training with compositional condition dropout and AdamW."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .codec import encode, to_model_space
from .conditions import ConditionSet, extract_conditions, make_tube_mask
from .corpus import Sample
from .denoiser import Denoiser, ModelConfig, collate
from .diffusion import NoiseSchedule, diffusion_loss
from .validation import check_probability

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    stage: int = 1
    lr: float = 5e-5
    steps: int = 3000
    batch_size: int = 8
    image_batch_prob: float = 0.25
    p_keep_all: float = 0.1
    p_drop_all: float = 0.1
    p_keep_each: float = 0.5
    text_dropout: bool = True
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0
    mask_ratio_range: tuple = (0.25, 0.75)
    train_conditions: tuple | None = None

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        for name in ("image_batch_prob", "p_keep_all", "p_drop_all", "p_keep_each"):
            check_probability(getattr(self, name), name)
        if self.p_keep_all + self.p_drop_all > 1:
            raise ValueError("p_keep_all + p_drop_all must not exceed 1")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        self.betas = tuple(self.betas)
        self.mask_ratio_range = tuple(self.mask_ratio_range)
        if self.train_conditions is not None:
            self.train_conditions = tuple(self.train_conditions)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- optimizer

class AdamW:
    """Adam with bias correction and decoupled weight decay.

    State lives in plain dicts keyed by parameter path so it round-trips
    through the checkpoint archive.
    """

    def __init__(self, lr: float = 5e-5, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, T.Tensor]) -> bool:
        """Update every parameter that has a gradient; False if the step was rejected."""
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
        if any(not np.all(np.isfinite(g)) for g in grads.values()):
            log.warning("non-finite gradient at optimizer step %d; update skipped", self.step_count + 1)
            return False
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for k, g in grads.items():
            p = params[k]
            if g.shape != p.shape:
                raise ValueError(f"{k}: gradient shape {g.shape} != parameter shape {p.shape}")
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(p.data)
                self.v[k] = np.zeros_like(p.data)
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            data = p.data * (1.0 - self.lr * self.weight_decay) - self.lr * update
            p.data = data.astype(p.data.dtype)
        return True

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"optim/m/{k}": v for k, v in self.m.items()}
        out.update({f"optim/v/{k}": v for k, v in self.v.items()})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        self.step_count = step_count
        self.m = {k[len("optim/m/"):]: v.copy() for k, v in arrays.items() if k.startswith("optim/m/")}
        self.v = {k[len("optim/v/"):]: v.copy() for k, v in arrays.items() if k.startswith("optim/v/")}


def optimizer_step(params: dict[str, T.Tensor], state: AdamW, lr: float | None = None,
                   wd: float | None = None) -> bool:
    if lr is not None:
        state.lr = lr
    if wd is not None:
        state.weight_decay = wd
    return state.step(params)


# ---------------------------------------------------------------- condition dropout

def sample_dropout_mask(available, rng, p_keep_all: float = 0.1, p_drop_all: float = 0.1,
                        p_keep_each: float = 0.5) -> dict[str, bool]:
    """Keep/drop flag per available condition.

    With ``p_keep_all`` everything is kept, with ``p_drop_all`` everything
    is dropped, otherwise each condition is kept independently with
    ``p_keep_each``.
    """
    available = list(available)
    if not available:
        return {}
    u = rng.random()
    if u < p_keep_all:
        return {c: True for c in available}
    if u < p_keep_all + p_drop_all:
        return {c: False for c in available}
    draws = rng.random(len(available))
    return {c: bool(d < p_keep_each) for c, d in zip(available, draws)}


# ---------------------------------------------------------------- data

@dataclass
class Clip:
    """A corpus clip prepared for training: model-space latent plus every extractable condition."""

    latent: np.ndarray
    frames: np.ndarray
    conditions: ConditionSet


def prepare_clips(samples: list[Sample], factor: int, block: int = 8, search_range: int = 4) -> list[Clip]:
    clips = []
    for s in samples:
        cond = extract_conditions(s.frames, s.caption, depth=s.depth, block=block, search_range=search_range)
        z = to_model_space(encode(s.frames, factor)).astype(np.float32)
        clips.append(Clip(latent=z, frames=s.frames, conditions=cond))
    return clips


def _frame_slice(cond: ConditionSet, idx: int) -> ConditionSet:
    """Single-frame view of a condition set (image batches)."""
    kw = {}
    for name in ("motion", "depth", "mask", "masked_video", "sketch_seq"):
        a = getattr(cond, name)
        kw[name] = None if a is None else a[idx:idx + 1]
    return ConditionSet(text=cond.text, style=cond.style, single_image=cond.single_image,
                        single_sketch=cond.single_sketch, **kw)


def build_batch(clips: list[Clip], model_cfg: ModelConfig, cfg: TrainConfig, rng,
                histogram: dict | None = None):
    """Draw one training batch: latents [B, F, h, w, c] and collated conditions."""
    idx = rng.choice(len(clips), size=min(cfg.batch_size, len(clips)), replace=False)
    image_batch = rng.random() < cfg.image_batch_prob
    frames = clips[0].latent.shape[0]
    fidx = rng.integers(0, frames, size=len(idx))
    kinds = cfg.train_conditions or model_cfg.conditions
    use_style = model_cfg.use_style and (cfg.train_conditions is None or "style" in cfg.train_conditions)
    latents, conds = [], []
    for j, i in enumerate(idx):
        clip = clips[i]
        full = clip.conditions
        if cfg.stage == 1:
            available = ["text"] if cfg.text_dropout else []
            mask = {"text": rng.random() >= cfg.p_drop_all} if available else {}
            cond = ConditionSet(text=full.text)
        else:
            f_, h_, w_ = clip.frames.shape[:3]
            lo, hi = cfg.mask_ratio_range
            tube = make_tube_mask(f_, h_, w_, rng.uniform(lo, hi), rng) if "mask" in kinds else None
            cond = ConditionSet(
                text=full.text,
                style=full.style if use_style else None,
                single_image=full.single_image if "single_image" in kinds else None,
                single_sketch=full.single_sketch if "single_sketch" in kinds else None,
                motion=full.motion if "motion" in kinds else None,
                depth=full.depth if "depth" in kinds and full.depth is not None else None,
                sketch_seq=full.sketch_seq if "sketch_seq" in kinds else None,
                mask=tube, masked_video=clip.frames if tube is not None else None,
            )
            available = [n for n in cond.present() if n != "text" or cfg.text_dropout]
            mask = sample_dropout_mask(available, rng, cfg.p_keep_all, cfg.p_drop_all, cfg.p_keep_each)
        dropped = [n for n, keep in mask.items() if not keep]
        if histogram is not None:
            for n, keep in mask.items():
                histogram.setdefault(n, 0)
                histogram[n] += int(keep)
        cond = cond.without(*dropped)
        z = clip.latent
        if image_batch:
            z = z[fidx[j]:fidx[j] + 1]
            cond = _frame_slice(cond, fidx[j])
        latents.append(z)
        conds.append(cond)
    f = latents[0].shape[0]
    return np.stack(latents), collate(conds, f, model_cfg.search_range, kinds=None)


# ---------------------------------------------------------------- training

class Trainer:
    """Runs one training stage and writes checkpoints.

    Every step draws its randomness from ``default_rng([seed, stage, step])``
    so a run resumed from a checkpoint replays exactly what an uninterrupted
    run would have done.
    """

    def __init__(self, model: Denoiser, cfg: TrainConfig, schedule: NoiseSchedule | None = None,
                 optimizer: AdamW | None = None, log_path=None, start_step: int = 0):
        self.model = model
        self.cfg = cfg
        self.schedule = schedule or NoiseSchedule(model.config.timesteps)
        self.opt = optimizer or AdamW(cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
        self.step = start_step
        self.log_path = Path(log_path) if log_path else None
        self.history: list[dict] = []

    def trainable(self) -> dict[str, T.Tensor]:
        params = dict(self.model.named_parameters())
        if self.cfg.stage == 1:
            return {k: p for k, p in params.items() if not k.startswith(("stc/", "style/"))}
        return params

    def loss_on(self, latents, cb, rng) -> T.Tensor:
        return diffusion_loss(self.model, self.schedule, latents, cb, rng)

    def train_step(self, clips: list[Clip]) -> float:
        rng = np.random.default_rng([self.cfg.seed, self.cfg.stage, self.step])
        hist: dict = {}
        latents, cb = build_batch(clips, self.model.config, self.cfg, rng, hist)
        params = self.trainable()
        for p in self.model.parameters():
            p.requires_grad = False
            p.grad = None
        for p in params.values():
            p.requires_grad = True
        with T.Tape() as tape:
            loss = self.loss_on(latents, cb, rng)
            T.backward(loss, tape)
        self._accumulate_grad_norms(params)
        accepted = self.opt.step(params)
        value = float(loss.data)
        self.step += 1
        rec = {"stage": self.cfg.stage, "step": self.step, "loss": value, "lr": self.opt.lr,
               "frames": int(latents.shape[1]), "kept": hist, "accepted": accepted}
        self.history.append(rec)
        if self.log_path is not None:
            with open(self.log_path, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return value

    def _accumulate_grad_norms(self, params):
        acc = getattr(self, "grad_abs_sum", None)
        if acc is None:
            acc = self.grad_abs_sum = {}
        for k, p in params.items():
            if p.grad is not None:
                acc[k] = acc.get(k, 0.0) + float(np.abs(p.grad).sum())

    def fit(self, clips: list[Clip], steps: int | None = None, checkpoint_path=None) -> "Trainer":
        if not clips:
            raise ValueError("training corpus is empty")
        target = self.step + (self.cfg.steps if steps is None else steps)
        while self.step < target:
            loss = self.train_step(clips)
            if self.step % 50 == 0:
                log.info("stage %d step %d loss %.5f", self.cfg.stage, self.step, loss)
            if checkpoint_path and self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                self.save(checkpoint_path)
        if checkpoint_path:
            self.save(checkpoint_path)
        return self

    def save(self, path) -> None:
        save_checkpoint(path, self.model, self.schedule, self.opt, self.cfg, self.step)


def save_checkpoint(path, model: Denoiser, schedule: NoiseSchedule, opt: AdamW | None = None,
                    cfg: TrainConfig | None = None, step: int | None = None) -> None:
    arrays = dict(model.state_dict())
    meta = {"model": model.config.to_dict(), "schedule": schedule.to_dict(), "kind": "compvid-denoiser"}
    if opt is not None:
        arrays.update(opt.state_arrays())
        meta["optimizer"] = {"step": opt.step_count, "lr": opt.lr, "betas": list(opt.betas),
                             "eps": opt.eps, "weight_decay": opt.weight_decay}
    if cfg is not None:
        meta["train"] = cfg.to_dict()
    if step is not None:
        meta["step"] = step
    ckpt.save(path, arrays, meta)


def load_checkpoint(path, model_overrides: dict | None = None):
    """Rebuild (model, schedule, optimizer-or-None, meta) from an archive."""
    arrays, meta = ckpt.load(path)
    mcfg = dict(meta["model"])
    mcfg.update(model_overrides or {})
    model = Denoiser(ModelConfig(**mcfg))
    params = {k: v for k, v in arrays.items() if not k.startswith("optim/")}
    model.load_state_dict(params, strict=not model_overrides)
    schedule = NoiseSchedule(**meta["schedule"])
    opt = None
    if "optimizer" in meta:
        o = meta["optimizer"]
        opt = AdamW(o["lr"], o["betas"], o["eps"], o["weight_decay"])
        opt.load_state_arrays(arrays, o["step"])
    return model, schedule, opt, meta


def train_stage1(cfg: TrainConfig, clips: list[Clip], model: Denoiser, checkpoint_path=None,
                 log_path=None) -> Trainer:
    if cfg.stage != 1:
        raise ValueError("train_stage1 needs a stage-1 config")
    return Trainer(model, cfg, log_path=log_path).fit(clips, checkpoint_path=checkpoint_path)


def train_stage2(cfg: TrainConfig, clips: list[Clip], stage1_checkpoint, checkpoint_path=None,
                 log_path=None, model_overrides: dict | None = None) -> Trainer:
    """Compositional training initialized from a stage-1 archive.

    ``model_overrides`` can change condition-encoder settings (for example
    ``{"stc_temporal": False}``); parameters absent from the stage-1 archive
    keep their fresh initialization.
    """
    if cfg.stage != 2:
        raise ValueError("train_stage2 needs a stage-2 config")
    if stage1_checkpoint is None or not Path(stage1_checkpoint).exists():
        raise FileNotFoundError(f"stage-1 checkpoint not found: {stage1_checkpoint}")
    model, schedule, _, meta = load_checkpoint(stage1_checkpoint, model_overrides)
    trainer = Trainer(model, cfg, schedule, log_path=log_path)
    return trainer.fit(clips, checkpoint_path=checkpoint_path)


def resume(checkpoint_path, clips: list[Clip], steps: int, out_path=None, log_path=None) -> Trainer:
    """Continue a run from its archive, optimizer state included."""
    model, schedule, opt, meta = load_checkpoint(checkpoint_path)
    if opt is None or "train" not in meta:
        raise ValueError(f"{checkpoint_path} carries no optimizer state to resume from")
    start = meta.get("step", opt.step_count)
    # the recorded budget is the run total, so a resumed archive matches an uninterrupted one
    d = meta["train"]
    d["steps"] = start + steps
    cfg = TrainConfig.from_dict(d)
    trainer = Trainer(model, cfg, schedule, optimizer=opt, log_path=log_path, start_step=start)
    return trainer.fit(clips, steps=steps, checkpoint_path=out_path)
