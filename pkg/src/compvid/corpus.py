"""Deterministic "moving shapes" video corpus with captions, depth and flow."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

PALETTE = {
    "red": (230, 40, 40),
    "green": (40, 200, 60),
    "blue": (50, 80, 240),
    "yellow": (240, 220, 40),
    "cyan": (40, 220, 230),
    "magenta": (220, 50, 210),
    "white": (250, 250, 250),
    "orange": (250, 140, 20),
}
SHAPES = ("circle", "square", "triangle")
LAYERS = {"far": 1 / 3, "mid": 2 / 3, "near": 1.0}
BACKGROUNDS = ("plain", "gradient")
DIRECTIONS = ("right", "up-right", "up", "up-left", "left", "down-left", "down", "down-right")
STILL = "nowhere"
VOCABULARY = ("a", "and", "moving", "over", "gradient") + tuple(PALETTE) + SHAPES + DIRECTIONS + (STILL,)

_PLAIN_LEVEL = 24
_GRADIENT = (16, 96)
_FLOW_MAGIC = b"MVF1"


@dataclass
class Sprite:
    shape: str
    color: str
    size: int
    layer: str
    velocity: tuple[int, int]
    start: tuple[int, int]

    def __post_init__(self):
        if self.color not in PALETTE:
            raise ValueError(f"color {self.color!r} is not in the palette")
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.layer not in LAYERS:
            raise ValueError(f"unknown depth layer {self.layer!r}")
        self.velocity = (int(self.velocity[0]), int(self.velocity[1]))
        self.start = (int(self.start[0]), int(self.start[1]))


@dataclass
class SceneSpec:
    sprites: list[Sprite]
    background: str = "plain"
    frames: int = 8
    height: int = 64
    width: int = 64
    seed: int = 0

    def __post_init__(self):
        self.sprites = [s if isinstance(s, Sprite) else Sprite(**s) for s in self.sprites]
        if not 1 <= len(self.sprites) <= 3:
            raise ValueError("a scene holds 1 to 3 sprites")
        if self.background not in BACKGROUNDS:
            raise ValueError(f"unknown background {self.background!r}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        d = json.loads(text)
        d["sprites"] = [Sprite(**{**s, "velocity": tuple(s["velocity"]), "start": tuple(s["start"])})
                        for s in d["sprites"]]
        return cls(**d)


@dataclass
class Sample:
    frames: np.ndarray          # F x H x W x 3 in [0, 1]
    caption: str
    depth: np.ndarray           # F x H x W
    flow: np.ndarray            # F-1 x H x W x 2, (dx, dy) pixels/frame
    spec: SceneSpec
    fps: int = 4
    masks: list = field(default_factory=list, repr=False)   # per-frame per-sprite visible masks


def direction_word(v) -> str:
    dx, dy = v
    if dx == 0 and dy == 0:
        return STILL
    ang = math.atan2(-dy, dx)
    return DIRECTIONS[int(round(ang / (math.pi / 4))) % 8]


def caption_for(spec: SceneSpec) -> str:
    parts = [f"a {s.color} {s.shape} moving {direction_word(s.velocity)}" for s in spec.sprites]
    text = " and ".join(parts)
    if spec.background == "gradient":
        text += " over a gradient"
    return text


def parse_caption(caption: str) -> dict:
    """Recover (color, shape, direction) per sprite and the background."""
    words = caption.split()
    background = "plain"
    if words[-3:] == ["over", "a", "gradient"]:
        background = "gradient"
        words = words[:-3]
    sprites = []
    for chunk in " ".join(words).split(" and "):
        a, color, shape, moving, direction = chunk.split()
        if a != "a" or moving != "moving":
            raise ValueError(f"malformed caption chunk {chunk!r}")
        sprites.append({"color": color, "shape": shape, "direction": direction})
    return {"sprites": sprites, "background": background}


def _shape_mask(shape: str, size: int, h: int, w: int, cx: int, cy: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    dx, dy = xx - cx, yy - cy
    if shape == "circle":
        return dx * dx + dy * dy <= size * size
    if shape == "square":
        return (np.abs(dx) <= size) & (np.abs(dy) <= size)
    # upward triangle: apex at (cx, cy - size), base at cy + size
    return (dy >= -size) & (dy <= size) & (2 * np.abs(dx) <= dy + size)


def _background(spec: SceneSpec) -> np.ndarray:
    h, w = spec.height, spec.width
    if spec.background == "plain":
        levels = np.full(w, _PLAIN_LEVEL)
    else:
        levels = np.round(np.linspace(_GRADIENT[0], _GRADIENT[1], w)).astype(int)
    img = np.broadcast_to(levels[None, :, None], (h, w, 3))
    return img.astype(np.uint8)


def render(spec: SceneSpec) -> Sample:
    """Rasterize the scene; sprites are drawn far-to-near."""
    f, h, w = spec.frames, spec.height, spec.width
    order = sorted(range(len(spec.sprites)), key=lambda i: LAYERS[spec.sprites[i].layer])
    bg = _background(spec)
    frames = np.empty((f, h, w, 3), dtype=np.uint8)
    depth = np.zeros((f, h, w))
    owner = np.full((f, h, w), -1)
    for t in range(f):
        img = bg.copy()
        for i in order:
            s = spec.sprites[i]
            cx = s.start[0] + s.velocity[0] * t
            cy = s.start[1] + s.velocity[1] * t
            m = _shape_mask(s.shape, s.size, h, w, cx, cy)
            img[m] = PALETTE[s.color]
            depth[t][m] = LAYERS[s.layer]
            owner[t][m] = i
        frames[t] = img
    flow = np.zeros((max(f - 1, 0), h, w, 2))
    for t in range(f - 1):
        for i, s in enumerate(spec.sprites):
            flow[t][owner[t] == i] = s.velocity
    masks = [[owner[t] == i for i in range(len(spec.sprites))] for t in range(f)]
    return Sample(frames=frames.astype(np.float64) / 255.0, caption=caption_for(spec),
                  depth=depth, flow=flow, spec=spec, masks=masks)


def random_spec(seed: int, frames: int = 8, height: int = 64, width: int = 64,
                max_sprites: int = 3, max_speed: int = 3) -> SceneSpec:
    """Draw a scene whose sprites stay inside the frame for the whole clip."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, max_sprites + 1))
    colors = rng.permutation(list(PALETTE))[:n]
    lo, hi = max(2, height // 16), max(3, height // 8)
    sprites = []
    for i in range(n):
        size = int(rng.integers(lo, hi + 1))
        vel = [int(v) for v in rng.integers(-max_speed, max_speed + 1, size=2)]
        start = []
        for axis, extent in enumerate((width, height)):
            # clip velocity so the sprite never leaves the frame
            room = extent - 1 - 2 * size
            limit = room // max(frames - 1, 1)
            vel[axis] = int(np.clip(vel[axis], -limit, limit))
            travel = vel[axis] * (frames - 1)
            smin = size + max(0, -travel)
            smax = extent - 1 - size - max(0, travel)
            start.append(int(rng.integers(smin, smax + 1)))
        sprites.append(Sprite(shape=str(rng.choice(SHAPES)), color=str(colors[i]), size=size,
                              layer=str(rng.choice(list(LAYERS))), velocity=tuple(vel),
                              start=tuple(start)))
    return SceneSpec(sprites=sprites, background=str(rng.choice(BACKGROUNDS)), frames=frames,
                     height=height, width=width, seed=int(seed))


def sample_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def write_field(path, field_: np.ndarray) -> None:
    """Write an F x H x W x C field: magic, (F, H, W, C) as u32, float32 payload.

    For motion fields C = 2 and the payload interleaves (dx, dy) per pixel.
    """
    arr = np.asarray(field_, dtype="<f4")
    if arr.ndim == 3:
        arr = arr[..., None]
    header = _FLOW_MAGIC + struct.pack("<4I", *arr.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(arr).tobytes())


def read_field(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != _FLOW_MAGIC:
        raise ValueError(f"{path}: not a field file")
    shape = struct.unpack_from("<4I", blob, 4)
    return np.frombuffer(blob, dtype="<f4", offset=20).reshape(shape).astype(np.float64)


def save_sample(sample: Sample, root, sample_id: str) -> Path:
    d = Path(root) / sample_id
    for sub in ("frames", "depth", "flow"):
        (d / sub).mkdir(parents=True, exist_ok=True)
    for t, fr in enumerate(sample.frames):
        Image.fromarray(np.round(fr * 255).astype(np.uint8)).save(d / "frames" / f"{t:03d}.png", optimize=False)
        write_field(d / "depth" / f"{t:03d}.bin", sample.depth[t][None])
    for t, fl in enumerate(sample.flow):
        write_field(d / "flow" / f"{t:03d}.bin", fl[None])
    (d / "caption.txt").write_text(sample.caption + "\n")
    (d / "spec.txt").write_text(sample.spec.to_json() + "\n")
    return d


def load_frames(directory) -> np.ndarray:
    files = sorted(Path(directory).glob("*.png"))
    if not files:
        raise FileNotFoundError(f"no frames in {directory}")
    return np.stack([np.asarray(Image.open(p).convert("RGB"), dtype=np.float64) / 255.0 for p in files])


def load_sample(directory) -> Sample:
    d = Path(directory)
    spec = SceneSpec.from_json((d / "spec.txt").read_text())
    frames = load_frames(d / "frames")
    depth = np.stack([read_field(p)[0, ..., 0] for p in sorted((d / "depth").glob("*.bin"))])
    flows = [read_field(p)[0] for p in sorted((d / "flow").glob("*.bin"))]
    flow = np.stack(flows) if flows else np.zeros((0,) + frames.shape[1:3] + (2,))
    return Sample(frames=frames, caption=(d / "caption.txt").read_text().strip(), depth=depth,
                  flow=flow, spec=spec)


def generate_dataset(n: int, seed: int, out_dir, frames: int = 8, height: int = 64,
                     width: int = 64, max_sprites: int = 3, max_speed: int = 3) -> list[dict]:
    """Render ``n`` samples under ``out_dir`` and write ``manifest.jsonl``."""
    if n < 1:
        raise ValueError("generate_dataset needs n >= 1")
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
        probe = root / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"cannot write dataset to {root}: {exc}") from exc
    records = []
    for i in range(n):
        s = sample_seed(seed, i)
        spec = random_spec(s, frames, height, width, max_sprites, max_speed)
        sample = render(spec)
        sid = f"{i:05d}"
        save_sample(sample, root, sid)
        records.append({"id": sid, "path": sid, "caption": sample.caption, "seed": s,
                        "spec": json.loads(spec.to_json())})
    with open(root / "manifest.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    return records


def read_manifest(root) -> list[dict]:
    path = Path(root) / "manifest.jsonl"
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def make_corpus(n: int, seed: int, **kwargs) -> list[Sample]:
    """In-memory equivalent of :func:`generate_dataset`."""
    return [render(random_spec(sample_seed(seed, i), **kwargs)) for i in range(n)]
