"""Ablation protocol: train with and without temporal condition encoding, then evaluate."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .conditions import extract_conditions
from .corpus import make_corpus
from .denoiser import Denoiser, ModelConfig
from .metrics import RowResult, end_point_error, flow_from_video, frame_consistency, summarize
from .pipeline import sample_videos
from .trainer import TrainConfig, Trainer, load_checkpoint, prepare_clips

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Profile:
    """Everything that determines an ablation run."""

    name: str = "desk"
    frames: int = 8
    height: int = 64
    width: int = 64
    factor: int = 4
    base_width: int = 64
    stc_width: int = 32
    conditions: tuple = ("motion", "depth", "sketch_seq")
    max_sprites: int = 3
    max_speed: int = 3
    n_train: int = 512
    n_eval: int = 64
    eval_prompts: int = 32
    stage1_steps: int = 3000
    stage2_steps: int = 5000
    batch_size: int = 8
    lr: float = 5e-5
    sample_steps: int = 25
    guidance_scale: float = 3.0
    block: int = 8
    search_range: int = 4
    train_seed: int = 1000
    eval_seed: int = 2000

    def model_config(self, seed: int, stc_temporal: bool = True) -> ModelConfig:
        return ModelConfig(factor=self.factor, height=self.height, width=self.width,
                           base_width=self.base_width, stc_width=self.stc_width,
                           stc_temporal=stc_temporal, conditions=self.conditions, use_style=False,
                           search_range=self.search_range, seed=seed)

    def corpus_kwargs(self) -> dict:
        return dict(frames=self.frames, height=self.height, width=self.width,
                    max_sprites=self.max_sprites, max_speed=self.max_speed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conditions"] = list(self.conditions)
        return d


PROFILES = {
    "desk": Profile(),
    # single-core budget for the automated acceptance run
    "quick": Profile(name="quick", frames=4, height=32, width=32, factor=2, base_width=32, stc_width=16,
                     n_train=512, n_eval=32, stage1_steps=800, stage2_steps=500, lr=1e-3,
                     sample_steps=20, max_sprites=1),
    # smoke-test scale: exercises the code paths only
    "smoke": Profile(name="smoke", height=32, width=32, base_width=16, stc_width=8, n_train=8, n_eval=4,
                     eval_prompts=4, stage1_steps=2, stage2_steps=2, lr=1e-3, sample_steps=2, max_sprites=1),
}

TABLE1 = [
    {"name": "text", "checkpoint": "no_stc", "conditions": ["text"]},
    {"name": "text+motion/no-stc", "checkpoint": "no_stc", "conditions": ["text", "motion"]},
    {"name": "text+motion/stc", "checkpoint": "stc", "conditions": ["text", "motion"]},
]
TABLE2 = [
    {"name": "text+sketch_seq/no-stc", "checkpoint": "no_stc", "conditions": ["text", "sketch_seq"]},
    {"name": "text+sketch_seq/stc", "checkpoint": "stc", "conditions": ["text", "sketch_seq"]},
    {"name": "text+depth/no-stc", "checkpoint": "no_stc", "conditions": ["text", "depth"]},
    {"name": "text+depth/stc", "checkpoint": "stc", "conditions": ["text", "depth"]},
    {"name": "text+motion/no-stc", "checkpoint": "no_stc", "conditions": ["text", "motion"]},
    {"name": "text+motion/stc", "checkpoint": "stc", "conditions": ["text", "motion"]},
]
MENUS = {
    "table1": TABLE1,
    "table2": TABLE2,
    "ablation": TABLE1 + [r for r in TABLE2 if r not in TABLE1],
}


def eval_set(profile: Profile):
    """Held-out clips; the eval master seed differs from the training one."""
    samples = make_corpus(profile.n_eval, profile.eval_seed, **profile.corpus_kwargs())
    samples = samples[:profile.eval_prompts]
    conds = [extract_conditions(s.frames, s.caption, depth=s.depth, block=profile.block,
                                search_range=profile.search_range) for s in samples]
    return samples, conds


def reference_flows(samples, profile: Profile, target: str = "reference") -> list[np.ndarray]:
    """Flow each generated clip is scored against.

    ``"reference"`` runs the same block matcher on the source clip, so both
    sides of the comparison share one estimator; ``"corpus"`` uses the exact
    per-pixel flow from the renderer.
    """
    if target == "corpus":
        return [s.flow for s in samples]
    if target == "reference":
        return [flow_from_video(s.frames, profile.block, profile.search_range) for s in samples]
    raise ValueError(f"unknown flow target {target!r}")


def run_ablation(checkpoints: dict, samples, conds, menu, profile: Profile, seed: int = 0,
                 target: str = "reference") -> list[RowResult]:
    """Sample every configured row with fixed seeds and score it.

    A row whose checkpoint is missing reports an error; the others still run.
    """
    gt = reference_flows(samples, profile, target)
    rows = []
    loaded: dict = {}
    noise_seeds = [seed * 100_000 + i for i in range(len(samples))]
    for spec in menu:
        row = RowResult(name=spec["name"])
        key = spec["checkpoint"]
        path = checkpoints.get(key)
        try:
            if path is None or not Path(path).exists():
                raise FileNotFoundError(f"checkpoint {key!r} not found: {path}")
            if key not in loaded:
                loaded[key] = load_checkpoint(path)[:2]
            model, schedule = loaded[key]
            c2 = [c.only(*spec["conditions"]) for c in conds]
            videos = sample_videos(model, schedule, c2, None, profile.frames, profile.sample_steps,
                                   profile.guidance_scale, noise_seeds)
            for g, v in zip(gt, videos):
                row.consistency.append(frame_consistency(v))
                pred = flow_from_video(v, profile.block, profile.search_range)
                row.epe.append(end_point_error(pred, g))
                row.seeds.append(seed)
        except (FileNotFoundError, ValueError, KeyError) as exc:
            row.error = str(exc)
            log.warning("row %s failed: %s", spec["name"], exc)
        rows.append(row)
    return rows


def train_seed(profile: Profile, seed: int, workdir) -> dict:
    """Stage 1 once, then stage 2 with and without the temporal condition layer."""
    work = Path(workdir)
    work.mkdir(parents=True, exist_ok=True)
    samples = make_corpus(profile.n_train, profile.train_seed + seed, **profile.corpus_kwargs())
    clips = prepare_clips(samples, profile.factor, profile.block, profile.search_range)
    paths = {"stage1": work / "stage1.ckpt", "stc": work / "stage2_stc.ckpt", "no_stc": work / "stage2_no_stc.ckpt"}
    common = dict(lr=profile.lr, batch_size=profile.batch_size, seed=seed,
                  train_conditions=profile.conditions)
    t0 = time.time()
    model = Denoiser(profile.model_config(seed))
    log.info("seed %d: %d parameters", seed, model.num_parameters())
    Trainer(model, TrainConfig(stage=1, steps=profile.stage1_steps, **common),
            log_path=work / "stage1.log").fit(clips, checkpoint_path=paths["stage1"])
    for key, temporal in (("stc", True), ("no_stc", False)):
        m, schedule, _, _ = load_checkpoint(paths["stage1"], {"stc_temporal": temporal})
        Trainer(m, TrainConfig(stage=2, steps=profile.stage2_steps, **common), schedule,
                log_path=work / f"stage2_{key}.log").fit(clips, checkpoint_path=paths[key])
    log.info("seed %d trained in %.0fs", seed, time.time() - t0)
    return {k: str(v) for k, v in paths.items()}


def run_experiment(profile: Profile, seeds=(0, 1, 2), workdir="runs", menu="ablation",
                   reuse: bool = True) -> dict:
    """Train (or reuse) per-seed checkpoints and evaluate every menu row.

    Returns per-seed reports and a pooled report.  Outputs are written under
    ``workdir/<profile>/``.
    """
    root = Path(workdir) / profile.name
    rows_menu = MENUS[menu] if isinstance(menu, str) else menu
    samples, conds = eval_set(profile)
    per_seed, pooled = {}, {}
    for seed in seeds:
        sd = root / f"seed{seed}"
        marker = sd / "profile.json"
        if not (reuse and marker.exists() and json.loads(marker.read_text()) == profile.to_dict()):
            ckpts = train_seed(profile, seed, sd)
            marker.write_text(json.dumps(profile.to_dict(), sort_keys=True))
        else:
            ckpts = {k: str(sd / f) for k, f in (("stage1", "stage1.ckpt"), ("stc", "stage2_stc.ckpt"),
                                                  ("no_stc", "stage2_no_stc.ckpt"))}
        rows = run_ablation(ckpts, samples, conds, rows_menu, profile, seed)
        report = summarize(rows, {"profile": profile.to_dict(), "seed": seed, "menu": rows_menu})
        report.save(sd / "eval")
        per_seed[seed] = report
        for r in rows:
            acc = pooled.setdefault(r.name, RowResult(name=r.name))
            acc.consistency += r.consistency
            acc.epe += r.epe
            acc.seeds += r.seeds
            acc.error = acc.error or r.error
    total = summarize(list(pooled.values()), {"profile": profile.to_dict(), "seeds": list(seeds),
                                              "menu": rows_menu})
    total.save(root / "eval")
    return {"per_seed": per_seed, "pooled": total}
