"""Frame consistency, end-point error, bootstrap intervals and the ablation runner."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .conditions import luminance, motion_sequence

log = logging.getLogger(__name__)

FEATURE_GRID = 16
FEATURE_DIM = 128
PROJECTION_SEED = 20230604


def _projection() -> np.ndarray:
    rng = np.random.default_rng(PROJECTION_SEED)
    return rng.standard_normal((FEATURE_DIM, FEATURE_GRID * FEATURE_GRID)) / FEATURE_GRID


def frame_features(video) -> np.ndarray:
    """F x 128 features: 16x16 area-averaged luminance, mean-removed, randomly projected."""
    v = np.asarray(video, dtype=np.float64)
    f, h, w = v.shape[:3]
    if h % FEATURE_GRID or w % FEATURE_GRID:
        raise ValueError(f"frame size {h}x{w} must be a multiple of {FEATURE_GRID}")
    y = np.stack([luminance(fr) for fr in v])
    small = y.reshape(f, FEATURE_GRID, h // FEATURE_GRID, FEATURE_GRID, w // FEATURE_GRID).mean(axis=(2, 4))
    flat = small.reshape(f, -1)
    flat = flat - flat.mean(axis=1, keepdims=True)
    return flat @ _projection().T


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    if np.array_equal(a, b):
        return 1.0
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def consistency_from_features(feats: np.ndarray) -> float:
    if len(feats) < 2:
        raise ValueError("frame consistency needs at least two frames")
    return float(np.mean([cosine(feats[i], feats[i + 1]) for i in range(len(feats) - 1)]))


def frame_consistency(video) -> float:
    """Mean cosine similarity of features of adjacent frames, in [-1, 1]."""
    v = np.asarray(video)
    if v.ndim != 4 or v.shape[0] < 2:
        raise ValueError(f"frame consistency needs an (F>=2, H, W, 3) video, got {v.shape}")
    return consistency_from_features(frame_features(v))


def end_point_error(pred_flow, gt_flow) -> float:
    """Mean per-pixel Euclidean distance between two (..., 2) flow fields."""
    p = np.asarray(pred_flow, dtype=np.float64)
    g = np.asarray(gt_flow, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"flow shapes differ: {p.shape} vs {g.shape}")
    if p.shape[-1] != 2:
        raise ValueError(f"flow fields need a trailing (dx, dy) axis, got {p.shape}")
    d = p - g
    return float(np.mean(np.sqrt(d[..., 0] ** 2 + d[..., 1] ** 2)))


def flow_from_video(video, block: int = 8, search_range: int = 4) -> np.ndarray:
    """F-1 dense block-matching fields between adjacent frames, (dx, dy) last."""
    v = np.asarray(video)
    if v.ndim != 4 or v.shape[0] < 2:
        raise ValueError("flow_from_video needs at least two frames")
    return motion_sequence(v, block, search_range)[1:]


def bootstrap_ci(values, resamples: int = 1000, level: float = 0.90, seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval of the mean."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ValueError("bootstrap of an empty sample")
    rng = np.random.default_rng(seed)
    means = x[rng.integers(0, x.size, size=(resamples, x.size))].mean(axis=1)
    lo, hi = np.quantile(means, [(1 - level) / 2, 1 - (1 - level) / 2])
    return float(lo), float(hi)


@dataclass
class RowResult:
    name: str
    consistency: list = field(default_factory=list)
    epe: list = field(default_factory=list)
    seeds: list = field(default_factory=list)
    error: str | None = None

    def summary(self, resamples: int = 1000) -> dict:
        out = {"name": self.name, "samples": len(self.consistency), "seeds": sorted(set(self.seeds)),
               "error": self.error}
        for key in ("consistency", "epe"):
            vals = getattr(self, key)
            if vals:
                lo, hi = bootstrap_ci(vals, resamples)
                out[key] = float(np.mean(vals))
                out[f"{key}_ci"] = [lo, hi]
                out[f"{key}_halfwidth"] = (hi - lo) / 2
        return out


@dataclass
class EvalReport:
    rows: list[dict]
    config_hash: str
    revision: str

    def to_records(self) -> str:
        lines = [json.dumps({"config_hash": self.config_hash, "revision": self.revision, **r}, sort_keys=True)
                 for r in self.rows]
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        head = f"{'config':<28} {'n':>4} {'consistency':>22} {'EPE':>22}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            if r.get("error"):
                lines.append(f"{r['name']:<28} {'-':>4} error: {r['error']}")
                continue
            c = f"{r['consistency']:.4f} ±{r['consistency_halfwidth']:.4f}"
            e = f"{r['epe']:.4f} ±{r['epe_halfwidth']:.4f}"
            lines.append(f"{r['name']:<28} {r['samples']:>4} {c:>22} {e:>22}")
        return "\n".join(lines) + "\n"

    def row(self, name: str) -> dict:
        for r in self.rows:
            if r["name"] == name:
                return r
        raise KeyError(name)

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.jsonl").write_text(self.to_records())
        (out / "report.txt").write_text(self.to_table())


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def source_revision() -> str:
    """Content hash of the package sources, standing in for a VCS revision."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return "src-" + h.hexdigest()[:12]


def summarize(rows: list[RowResult], cfg: dict, resamples: int = 1000) -> EvalReport:
    return EvalReport(rows=[r.summary(resamples) for r in rows], config_hash=config_hash(cfg),
                      revision=source_revision())
