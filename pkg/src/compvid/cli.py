"""Command line entry point: ``compvid <subcommand> ...``.

Failures print one JSON line on stderr, ``{"error": ..., "type": ...}``, and
exit with status 1.  Bad usage exits with status 2.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import corpus
from .conditions import (ConditionSet, compile_strokes, extract_conditions, load_strokes, repeat_spatial,
                         sketch_sequence)
from .corpus import load_frames, load_sample, read_field, read_manifest, write_field
from .denoiser import Denoiser, ModelConfig
from .experiment import MENUS, PROFILES, eval_set, run_ablation, run_experiment
from .metrics import summarize
from .pipeline import sample_videos
from .trainer import TrainConfig, Trainer, load_checkpoint, prepare_clips, resume

log = logging.getLogger("compvid")


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _names(text: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in text.split(",") if x.strip())


def _image(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def _gray(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0


def _load_video(path) -> tuple[np.ndarray, str | None, np.ndarray | None]:
    """Frames plus caption and depth if ``path`` is a corpus sample directory."""
    p = Path(path)
    if (p / "spec.txt").exists():
        s = load_sample(p)
        return s.frames, s.caption, s.depth
    if (p / "frames").is_dir():
        return load_frames(p / "frames"), None, None
    return load_frames(p), None, None


def _write_video(video: np.ndarray, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for t, fr in enumerate(video):
        Image.fromarray(np.round(np.clip(fr, 0, 1) * 255).astype(np.uint8)).save(out / f"{t:03d}.png")


def _load_clips(data_dir, model_cfg: ModelConfig, block: int):
    root = Path(data_dir)
    samples = [load_sample(root / r["path"]) for r in read_manifest(root)]
    return prepare_clips(samples, model_cfg.factor, block, model_cfg.search_range)


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(a) -> dict:
    recs = corpus.generate_dataset(a.n, a.seed, a.out, frames=a.frames, height=a.height, width=a.width,
                                   max_sprites=a.max_sprites, max_speed=a.max_speed)
    return {"samples": len(recs), "out": str(a.out)}


def cmd_train(a) -> dict:
    if a.resume:
        _, _, _, meta = load_checkpoint(a.resume)
        clips = _load_clips(a.data, ModelConfig(**meta["model"]), a.block)
        tr = resume(a.resume, clips, a.steps if a.steps is not None else 0, a.out, a.log)
        return {"checkpoint": str(a.out), "step": tr.step}
    cfg = TrainConfig.from_file(a.config) if a.config else TrainConfig()
    over = {"stage": a.stage, "lr": a.lr, "steps": a.steps, "batch_size": a.batch_size, "seed": a.seed}
    d = cfg.to_dict()
    d.update({k: v for k, v in over.items() if v is not None})
    if a.conditions:
        d["train_conditions"] = list(_names(a.conditions))
    cfg = TrainConfig.from_dict(d)
    if cfg.stage == 2:
        if not a.init:
            raise ValueError("stage 2 needs --init <stage-1 checkpoint>")
        model, schedule, _, _ = load_checkpoint(a.init, {"stc_temporal": not a.no_stc})
    else:
        mc = ModelConfig(height=a.height, width=a.width, factor=a.factor, base_width=a.base_width,
                         stc_width=a.stc_width, stc_temporal=not a.no_stc,
                         conditions=_names(a.model_conditions), use_style=not a.no_style, seed=cfg.seed)
        model, schedule = Denoiser(mc), None
    clips = _load_clips(a.data, model.config, a.block)
    tr = Trainer(model, cfg, schedule, log_path=a.log).fit(clips, checkpoint_path=a.out)
    return {"checkpoint": str(a.out), "step": tr.step, "loss": tr.history[-1]["loss"] if tr.history else None}


def _conditions_from_args(a, frames: int, h: int, w: int) -> ConditionSet:
    cond = ConditionSet(text=a.text or None)
    if a.reference:
        video, caption, depth = _load_video(a.reference)
        if video.shape[1:3] != (h, w):
            raise ValueError(f"reference video is {video.shape[1]}x{video.shape[2]}, model expects {h}x{w}")
        video = video[:frames]
        if video.shape[0] != frames:
            raise ValueError(f"reference video has {video.shape[0]} frames, need {frames}")
        full = extract_conditions(video, caption, depth=None if depth is None else depth[:frames],
                                  block=a.block, search_range=a.search_range)
        use = _names(a.use) if a.use else ()
        picked = full.only(*use) if use else ConditionSet()
        cond = replace(picked, text=cond.text or picked.text)
        if a.mask:
            cond.masked_video = video
    if a.motion:
        cond.motion = compile_strokes(load_strokes(a.motion), frames, h, w)
    if a.image:
        cond.single_image = _image(a.image)
    if a.sketch:
        cond.single_sketch = _gray(a.sketch)
    if a.style:
        cond.style = _image(a.style)
    if a.depth:
        d = read_field(a.depth)[..., 0]
        cond.depth = d if d.shape[0] == frames else repeat_spatial(d[0], frames)
    if a.mask:
        if cond.masked_video is None:
            raise ValueError("--mask needs --reference to supply the video being inpainted")
        m = (_gray(a.mask) > 0.5).astype(np.float64)
        cond.mask = repeat_spatial(m, frames)
    cond.geometry()
    return cond


def cmd_sample(a) -> dict:
    model, schedule, _, _ = load_checkpoint(a.checkpoint)
    cfg = model.config
    cond = _conditions_from_args(a, a.frames, cfg.height, cfg.width)
    missing = [n for n in cond.sequential() if n not in model.stc]
    if missing:
        raise ValueError(f"checkpoint has no encoder for condition(s): {', '.join(missing)}")
    video = sample_videos(model, schedule, [cond], None, a.frames, a.steps, a.guidance_scale, [a.seed])[0]
    _write_video(video, a.out)
    return {"out": str(a.out), "frames": int(video.shape[0]), "conditions": cond.present()}


def cmd_compose(a) -> dict:
    field_ = compile_strokes(load_strokes(a.strokes), a.frames, a.height, a.width)
    write_field(a.out, field_)
    return {"out": str(a.out), "shape": list(field_.shape)}


def cmd_extract(a) -> dict:
    video, caption, depth = _load_video(a.input)
    cond = extract_conditions(video, caption, depth=depth, block=a.block, search_range=a.search_range,
                              sketch_threshold=a.threshold)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    write_field(out / "motion.bin", cond.motion)
    write_field(out / "sketch.bin", sketch_sequence(video, a.threshold))
    Image.fromarray(np.round(cond.single_sketch * 255).astype(np.uint8)).save(out / "sketch0.png")
    Image.fromarray(np.round(cond.single_image * 255).astype(np.uint8)).save(out / "image0.png")
    written = ["motion.bin", "sketch.bin", "sketch0.png", "image0.png"]
    if cond.depth is not None:
        write_field(out / "depth.bin", cond.depth)
        written.append("depth.bin")
    if caption:
        (out / "caption.txt").write_text(caption + "\n")
        written.append("caption.txt")
    return {"out": str(out), "files": written}


def cmd_evaluate(a) -> dict:
    profile = PROFILES[a.profile]
    if a.eval_prompts:
        profile = replace(profile, eval_prompts=a.eval_prompts)
    if a.stc or a.no_stc_checkpoint:
        samples, conds = eval_set(profile)
        ckpts = {"stc": a.stc, "no_stc": a.no_stc_checkpoint}
        rows = run_ablation(ckpts, samples, conds, MENUS[a.config], profile, a.seed)
        report = summarize(rows, {"profile": profile.to_dict(), "seed": a.seed, "menu": a.config,
                                  "checkpoints": ckpts})
    else:
        report = run_experiment(profile, _ints(a.seeds), a.workdir, a.config)["pooled"]
    if a.out:
        report.save(a.out)
    sys.stdout.write(report.to_table())
    return {"config_hash": report.config_hash, "revision": report.revision,
            "failed_rows": [r["name"] for r in report.rows if r.get("error")]}


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="compvid", description="Compositional video diffusion toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic moving-shapes corpus")
    g.add_argument("--n", type=int, default=512)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--frames", type=int, default=8)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--max-sprites", type=int, default=3)
    g.add_argument("--max-speed", type=int, default=3)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run one training stage, or resume one")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--stage", type=int, choices=(1, 2))
    t.add_argument("--config", type=Path, help="JSON training config")
    t.add_argument("--init", type=Path, help="stage-1 checkpoint for stage 2")
    t.add_argument("--resume", type=Path, help="checkpoint to continue; --steps adds steps")
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--conditions", help="comma list of conditions trained in stage 2")
    t.add_argument("--log", type=Path)
    t.add_argument("--no-stc", action="store_true", help="drop the temporal layer of condition encoders")
    t.add_argument("--no-style", action="store_true")
    t.add_argument("--height", type=int, default=64)
    t.add_argument("--width", type=int, default=64)
    t.add_argument("--factor", type=int, default=4)
    t.add_argument("--base-width", type=int, default=64)
    t.add_argument("--stc-width", type=int, default=32)
    t.add_argument("--model-conditions", default="motion,depth,sketch_seq,mask,single_image,single_sketch")
    t.add_argument("--block", type=int, default=8)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate a clip from any subset of conditions")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--text")
    s.add_argument("--motion", type=Path, help="stroke file")
    s.add_argument("--image", type=Path, help="first-frame image")
    s.add_argument("--sketch", type=Path, help="single sketch image")
    s.add_argument("--style", type=Path, help="style image")
    s.add_argument("--depth", type=Path, help="depth field file")
    s.add_argument("--mask", type=Path, help="inpainting mask image, white = regenerate")
    s.add_argument("--reference", type=Path, help="video directory to extract conditions from")
    s.add_argument("--use", help="comma list of conditions taken from --reference")
    s.add_argument("--frames", type=int, default=8)
    s.add_argument("--steps", type=int, default=50)
    s.add_argument("--guidance-scale", type=float, default=3.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--block", type=int, default=8)
    s.add_argument("--search-range", type=int, default=4)
    s.set_defaults(func=cmd_sample)

    c = sub.add_parser("compose", help="compile a stroke file to a motion field")
    c.add_argument("--strokes", type=Path, required=True)
    c.add_argument("--out", type=Path, required=True)
    c.add_argument("--frames", type=int, default=8)
    c.add_argument("--height", type=int, default=64)
    c.add_argument("--width", type=int, default=64)
    c.set_defaults(func=cmd_compose)

    e = sub.add_parser("extract", help="dump the conditions of a video")
    e.add_argument("--input", type=Path, required=True)
    e.add_argument("--out", type=Path, required=True)
    e.add_argument("--block", type=int, default=8)
    e.add_argument("--search-range", type=int, default=4)
    e.add_argument("--threshold", type=float, default=0.1)
    e.set_defaults(func=cmd_extract)

    v = sub.add_parser("evaluate", help="run the ablation and report metrics")
    v.add_argument("--config", choices=sorted(MENUS), default="ablation")
    v.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    v.add_argument("--seeds", default="0,1,2")
    v.add_argument("--seed", type=int, default=0, help="sampling seed with explicit checkpoints")
    v.add_argument("--workdir", type=Path, default=Path("runs"))
    v.add_argument("--stc", type=Path, help="checkpoint trained with temporal condition encoding")
    v.add_argument("--no-stc", dest="no_stc_checkpoint", type=Path, help="checkpoint trained without it")
    v.add_argument("--eval-prompts", type=int)
    v.add_argument("--out", type=Path)
    v.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 with usage on bad flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parsable line
        sys.stderr.write(json.dumps({"error": str(exc).replace("\n", " "), "type": type(exc).__name__}) + "\n")
        return 1
    sys.stdout.write(json.dumps({"status": "ok", "command": args.command, **result}, default=str) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
