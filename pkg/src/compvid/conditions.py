"""Condition extraction: motion vectors, sketches, masks, strokes, text and style."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import nn
from . import tensor as T
from .corpus import VOCABULARY
from .validation import check_divisible, check_probability, check_video

# channels each sequential condition contributes at pixel resolution
SEQUENCE_CHANNELS = {
    "motion": 2,
    "depth": 1,
    "sketch_seq": 1,
    "mask": 4,
    "single_image": 3,
    "single_sketch": 1,
}
TEXT_LEN = 8
TEXT_DIM = 64
_LUMA = np.array([0.299, 0.587, 0.114])


# ---------------------------------------------------------------- motion vectors

def _gray(frame) -> np.ndarray:
    a = np.asarray(frame, dtype=np.float64)
    return a if a.ndim == 2 else a.reshape(a.shape[0], a.shape[1], -1)


def _candidates(search_range: int) -> list[tuple[int, int]]:
    """All (dx, dy) in the window, ordered by the tie-break rule."""
    r = search_range
    cands = [(dx, dy) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]
    return sorted(cands, key=lambda d: (d[0] ** 2 + d[1] ** 2, d[1], d[0]))


def estimate_motion(prev, next_, block: int = 8, search_range: int = 4) -> np.ndarray:
    """Exhaustive macroblock matching.

    Returns an (H/block) x (W/block) x 2 array of integer (dx, dy): the
    content of each block of ``next_`` is found in ``prev`` displaced by
    ``-(dx, dy)``, i.e. it moved by (dx, dy).  Cost is the sum of absolute
    differences; candidates reaching outside ``prev`` are skipped.  Ties go
    to the smallest squared length, then smallest dy, then smallest dx.
    """
    p, n = _gray(prev), _gray(next_)
    if p.shape != n.shape:
        raise ValueError(f"estimate_motion: frame shapes differ, {p.shape} vs {n.shape}")
    if search_range < 1:
        raise ValueError("estimate_motion: search range must be >= 1")
    h, w = p.shape[:2]
    check_divisible(h, block, "height")
    check_divisible(w, block, "width")
    if p.ndim == 2:
        p, n = p[..., None], n[..., None]
    r = search_range
    padded = np.pad(p, ((r, r), (r, r), (0, 0)), constant_values=np.inf)
    cands = _candidates(r)
    bh, bw = h // block, w // block
    sad = np.empty((len(cands), bh, bw))
    for i, (dx, dy) in enumerate(cands):
        ref = padded[r - dy:r - dy + h, r - dx:r - dx + w]
        diff = np.abs(n - ref).sum(axis=2)
        sad[i] = diff.reshape(bh, block, bw, block).sum(axis=(1, 3))
    best = np.argmin(sad, axis=0)
    return np.asarray(cands, dtype=np.int64)[best]


def densify_motion(block_vectors, block: int) -> np.ndarray:
    """Spread per-block vectors to a 2 x H x W per-pixel field."""
    v = np.asarray(block_vectors)
    if v.ndim != 3 or v.shape[-1] != 2:
        raise ValueError(f"densify_motion: expected (bh, bw, 2), got {v.shape}")
    dense = np.repeat(np.repeat(v, block, axis=0), block, axis=1)
    return np.ascontiguousarray(dense.transpose(2, 0, 1))


def block_average(field_, block: int) -> np.ndarray:
    """Inverse of :func:`densify_motion` for block-constant fields."""
    f = np.asarray(field_, dtype=np.float64)
    c, h, w = f.shape
    return f.reshape(c, h // block, block, w // block, block).mean(axis=(2, 4)).transpose(1, 2, 0)


def motion_sequence(video, block: int = 8, search_range: int = 4) -> np.ndarray:
    """F x H x W x 2 motion field; frame 0 is the zero field."""
    v = np.asarray(video, dtype=np.float64)
    f, h, w = v.shape[:3]
    out = np.zeros((f, h, w, 2))
    for t in range(1, f):
        vec = estimate_motion(v[t - 1], v[t], block, search_range)
        out[t] = densify_motion(vec, block).transpose(1, 2, 0)
    return out


class BlockMotionEstimator(TransformerMixin, BaseEstimator):
    """Video -> dense motion-vector sequence (front-padded with a zero field).

    Parameters
    ----------
    block : int, default=8
        Macroblock edge in pixels.
    search_range : int, default=4
        Largest displacement searched along each axis.
    """

    def __init__(self, block: int = 8, search_range: int = 4):
        self.block = block
        self.search_range = search_range

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        X = check_video(X)
        return motion_sequence(X, self.block, self.search_range)


# ---------------------------------------------------------------- sketches and masks

def luminance(frame) -> np.ndarray:
    a = np.asarray(frame, dtype=np.float64)
    return a @ _LUMA if a.ndim == 3 else a


def extract_sketch(frame, threshold: float = 0.1) -> np.ndarray:
    """Binary edge map from forward-difference gradient magnitude.

    The 3x3 kernels are [[0,0,0],[0,-1,1],[0,0,0]] and its transpose, with
    edge replication at the border.  The magnitude is divided by sqrt(2),
    its largest possible value for luminance in [0, 1].
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"extract_sketch: threshold must be in (0, 1), got {threshold}")
    y = luminance(frame)
    p = np.pad(y, ((0, 1), (0, 1)), mode="edge")
    gx = p[:-1, 1:] - p[:-1, :-1]
    gy = p[1:, :-1] - p[:-1, :-1]
    mag = np.sqrt(gx * gx + gy * gy) / math.sqrt(2.0)
    return (mag > threshold).astype(np.float64)


def sketch_sequence(video, threshold: float = 0.1) -> np.ndarray:
    return np.stack([extract_sketch(fr, threshold) for fr in np.asarray(video)])


def make_tube_mask(frames: int, height: int, width: int, ratio: float, rng, grid: int = 8) -> np.ndarray:
    """F x H x W mask (1 = hidden) whose hidden cells are the same in every frame."""
    check_probability(ratio, "mask ratio")
    check_divisible(height, grid, "height")
    check_divisible(width, grid, "width")
    rng = np.random.default_rng(rng)
    n_cells = grid * grid
    k = int(round(ratio * n_cells))
    cells = np.zeros(n_cells)
    cells[rng.permutation(n_cells)[:k]] = 1.0
    spatial = np.kron(cells.reshape(grid, grid), np.ones((height // grid, width // grid)))
    return np.broadcast_to(spatial, (frames, height, width)).copy()


def repeat_spatial(x, frames: int) -> np.ndarray:
    """Stack ``frames`` identical copies of a single frame or sketch."""
    if frames < 1:
        raise ValueError("repeat_spatial: frames must be >= 1")
    a = np.asarray(x)
    return np.repeat(a[None], frames, axis=0)


# ---------------------------------------------------------------- strokes

@dataclass
class Stroke:
    points: list[tuple[float, float]]
    radius: float
    start: int
    end: int


@dataclass
class StrokeSpec:
    strokes: list[Stroke] = field(default_factory=list)


_STROKE_RE = re.compile(r"^stroke\s+(.*)$")


def parse_strokes(text: str) -> StrokeSpec:
    """Parse the stroke file format.

    One stroke per line; ``#`` starts a comment::

        stroke radius=3 frames=0-7 points=10,10 30,10 30,40
    """
    strokes = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _STROKE_RE.match(line)
        if not m:
            raise ValueError(f"stroke file line {lineno}: expected 'stroke ...'")
        opts, pts = {}, []
        for tok in m.group(1).split():
            if "=" in tok:
                key, val = tok.split("=", 1)
                opts[key] = val
                if key == "points":
                    pts.append(val)
            else:
                pts.append(tok)
        try:
            points = [tuple(float(c) for c in p.split(",")) for p in pts]
            start, end = (int(v) for v in opts.get("frames", "0-0").split("-"))
            radius = float(opts.get("radius", 1))
        except ValueError as exc:
            raise ValueError(f"stroke file line {lineno}: {exc}") from exc
        if any(len(p) != 2 for p in points):
            raise ValueError(f"stroke file line {lineno}: points must be x,y pairs")
        strokes.append(Stroke(points=points, radius=radius, start=start, end=end))
    return StrokeSpec(strokes)


def load_strokes(path) -> StrokeSpec:
    return parse_strokes(Path(path).read_text())


def _arc_position(points: np.ndarray, s: float) -> np.ndarray:
    seg = np.diff(points, axis=0)
    lens = np.hypot(seg[:, 0], seg[:, 1])
    total = lens.sum()
    if total == 0:
        return points[0].copy()
    target = s * total
    acc = 0.0
    for a, d, length in zip(points[:-1], seg, lens):
        if length > 0 and target <= acc + length:
            return a + d * ((target - acc) / length)
        acc += length
    return points[-1].copy()


def compile_strokes(spec: StrokeSpec, frames: int, height: int, width: int) -> np.ndarray:
    """Render strokes to an F x H x W x 2 motion sequence.

    Along each stroke the position at frame f is taken at uniform arc length
    over the stroke's frame span.  The step from f to f+1 is written to
    field f+1 (field 0 stays zero) over the disk around the frame-f position.
    Later strokes overwrite earlier ones.
    """
    out = np.zeros((frames, height, width, 2))
    yy, xx = np.mgrid[0:height, 0:width]
    for k, st in enumerate(spec.strokes):
        if not st.points:
            raise ValueError(f"stroke {k}: empty polyline")
        pts = np.asarray(st.points, dtype=np.float64)
        if np.any(pts[:, 0] < 0) or np.any(pts[:, 0] > width - 1) or \
                np.any(pts[:, 1] < 0) or np.any(pts[:, 1] > height - 1):
            raise ValueError(f"stroke {k}: points outside the {width}x{height} frame")
        if not 0 <= st.start <= st.end < frames:
            raise ValueError(f"stroke {k}: frame span {st.start}-{st.end} outside [0, {frames})")
        span = st.end - st.start
        for f in range(st.start, st.end):
            a = _arc_position(pts, (f - st.start) / span)
            b = _arc_position(pts, (f + 1 - st.start) / span)
            disk = (xx - a[0]) ** 2 + (yy - a[1]) ** 2 <= st.radius ** 2
            out[f + 1][disk] = b - a
    return out


# ---------------------------------------------------------------- text and style

def tokenize(caption: str | None, vocabulary=VOCABULARY, length: int = TEXT_LEN) -> np.ndarray:
    """Word ids padded with -1 (the all-zero null token) to ``length``."""
    ids = np.full(length, -1, dtype=np.int64)
    if not caption:
        return ids
    index = {w: i for i, w in enumerate(vocabulary)}
    words = caption.lower().split()
    for w in words:
        if w not in index:
            raise ValueError(f"out-of-vocabulary token {w!r}")
    for i, w in enumerate(words[:length]):
        ids[i] = index[w]
    return ids


class TextEmbedder(nn.Module):
    """Learned lookup table; padding and the empty caption map to zero rows."""

    def __init__(self, rng, dtype=np.float32, vocab_size: int = len(VOCABULARY), dim: int = TEXT_DIM):
        self.table = nn.param(rng.standard_normal((vocab_size, dim)) * 0.5, dtype)

    def __call__(self, ids) -> T.Tensor:
        return T.embedding(self.table, ids)

    def embed(self, caption: str | None) -> np.ndarray:
        return self(tokenize(caption)).data


class StyleEmbedder(nn.Module):
    """Mean over 8x8 patches of a linear patch embedding."""

    def __init__(self, rng, dtype=np.float32, patch: int = 8, dim: int = TEXT_DIM):
        self.proj = nn.Linear(patch * patch * 3, dim, rng, dtype)
        self._patch = patch

    def patches(self, images) -> np.ndarray:
        x = np.asarray(images)
        if x.ndim == 3:
            x = x[None]
        b, h, w, c = x.shape
        p = self._patch
        check_divisible(h, p, "style image height")
        check_divisible(w, p, "style image width")
        x = x.reshape(b, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(b, (h // p) * (w // p), p * p * c)

    def __call__(self, images) -> T.Tensor:
        pt = T.Tensor(self.patches(images).astype(self.proj.weight.dtype))
        return T.mean(self.proj(pt), axis=1, keepdims=True)


# ---------------------------------------------------------------- condition bundle

@dataclass
class ConditionSet:
    """Any subset of the composable conditions for one clip.

    Sequences are F x H x W (x C) arrays at pixel resolution; ``mask`` marks
    hidden pixels with 1 and travels with ``masked_video``.
    """

    text: str | None = None
    style: np.ndarray | None = None
    single_image: np.ndarray | None = None
    single_sketch: np.ndarray | None = None
    motion: np.ndarray | None = None
    depth: np.ndarray | None = None
    mask: np.ndarray | None = None
    masked_video: np.ndarray | None = None
    sketch_seq: np.ndarray | None = None

    def present(self) -> list[str]:
        names = [f.name for f in fields(self) if getattr(self, f.name) is not None]
        names = [n for n in names if n not in ("text", "masked_video")]
        if self.text:
            names.insert(0, "text")
        return names

    def sequential(self) -> list[str]:
        return [n for n in self.present() if n in SEQUENCE_CHANNELS]

    def without(self, *names: str) -> "ConditionSet":
        kw = {n: None for n in names}
        if "mask" in names:
            kw["masked_video"] = None
        return replace(self, **kw)

    def only(self, *names: str) -> "ConditionSet":
        drop = [n for n in self.present() if n not in names]
        return self.without(*drop)

    def geometry(self) -> tuple[int | None, int | None, int | None]:
        """Common (F, H, W) of the present sequences; raises on disagreement."""
        f = h = w = None
        for name in ("motion", "depth", "mask", "masked_video", "sketch_seq"):
            a = getattr(self, name)
            if a is None:
                continue
            shape = np.shape(a)[:3]
            if f is None:
                f, h, w = shape
            elif shape != (f, h, w):
                raise ValueError(f"condition {name} has geometry {shape}, expected {(f, h, w)}")
        for name in ("single_image", "single_sketch"):
            a = getattr(self, name)
            if a is None:
                continue
            shape = np.shape(a)[:2]
            if h is None:
                h, w = shape
            elif shape != (h, w):
                raise ValueError(f"condition {name} has size {shape}, expected {(h, w)}")
        if self.mask is not None and self.masked_video is None:
            raise ValueError("mask condition needs the masked video")
        return f, h, w

    def sequence_inputs(self, frames: int, search_range: int = 4) -> dict[str, np.ndarray]:
        """Model-ready F x H x W x C arrays for every present sequential condition."""
        self.geometry()
        out = {}
        for name in self.sequential():
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if name == "motion":
                a = np.clip(a / search_range, -1.0, 1.0)
            elif name == "mask":
                m = a[..., None]
                a = np.concatenate([np.asarray(self.masked_video) * (1.0 - m), m], axis=-1)
            elif name in ("single_image", "single_sketch"):
                a = repeat_spatial(a, frames)
            if a.ndim == 3:
                a = a[..., None]
            if a.shape[0] != frames:
                raise ValueError(f"condition {name} has {a.shape[0]} frames, expected {frames}")
            if a.shape[-1] != SEQUENCE_CHANNELS[name]:
                raise ValueError(f"condition {name} has {a.shape[-1]} channels, "
                                 f"expected {SEQUENCE_CHANNELS[name]}")
            out[name] = a
        return out


def extract_conditions(video, caption: str | None = None, depth=None, mask_ratio: float | None = None,
                       rng=None, block: int = 8, search_range: int = 4,
                       sketch_threshold: float = 0.1) -> ConditionSet:
    """Decompose a clip into every condition it can supply."""
    v = check_video(video)
    f, h, w = v.shape[:3]
    cond = ConditionSet(
        text=caption or None,
        style=v[0].copy(),
        single_image=v[0].copy(),
        single_sketch=extract_sketch(v[0], sketch_threshold),
        motion=motion_sequence(v, block, search_range),
        sketch_seq=sketch_sequence(v, sketch_threshold),
        depth=None if depth is None else np.asarray(depth, dtype=np.float64),
    )
    if mask_ratio is not None:
        cond.mask = make_tube_mask(f, h, w, mask_ratio, rng)
        cond.masked_video = v.copy()
    cond.geometry()
    return cond
