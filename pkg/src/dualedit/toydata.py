"""Procedural toy scenes, captions and the five-task edit benchmark."""
from __future__ import annotations

import itertools
import json
import re
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .errors import InvalidArgument

SHAPES = ("square", "circle", "triangle")
COLORS = ("red", "green", "blue", "yellow")
SIZES = ("small", "large")
POSITIONS = ("left", "center", "right")
BACKGROUNDS = ("plain", "textured")

FIELDS = ("size", "color", "shape", "position", "background")
VOCAB = {
    "size": SIZES,
    "color": COLORS,
    "shape": SHAPES,
    "position": POSITIONS,
    "background": BACKGROUNDS,
}
_STOPWORDS = {"a", "an", "at", "the", "on", "in", "with", "background"}

# uint8 palette so renders survive an 8-bit lossless round trip exactly
PALETTE = {
    "red": (230, 26, 26),
    "green": (26, 204, 51),
    "blue": (38, 64, 242),
    "yellow": (242, 230, 26),
}
BG_LIGHT = (150, 150, 150)
BG_DARK = (90, 90, 90)

IMAGE_SIZE = 16
SIDE = {"small": 4, "large": 7}
CENTER_X = {"left": 4, "center": 8, "right": 12}

# benchmark task order; the first three are structure-preserved.
TASKS = ("replacement", "attribute", "style", "pose", "shape")
TASK_FIELDS = {
    "replacement": ("shape", "color"),
    "attribute": ("color",),
    "style": ("background",),
    "pose": ("position",),
    "shape": ("shape",),
}
TASK_MODE = {
    "replacement": "structure",
    "attribute": "structure",
    "style": "structure",
    "pose": "nonrigid",
    "shape": "nonrigid",
}


@dataclass(frozen=True)
class ToyScene:
    shape: str = "square"
    color: str = "red"
    size: str = "large"
    position: str = "center"
    background: str = "plain"

    def __post_init__(self):
        for f in FIELDS:
            if getattr(self, f) not in VOCAB[f]:
                raise InvalidArgument(f"unknown {f} {getattr(self, f)!r}")

    @property
    def caption(self) -> str:
        return f"a {self.size} {self.color} {self.shape} at {self.position}, {self.background} background"

    def tokens(self) -> tuple[int, ...]:
        """Per-field vocabulary indices, in FIELDS order."""
        return tuple(VOCAB[f].index(getattr(self, f)) for f in FIELDS)


def all_scenes() -> list[ToyScene]:
    return [ToyScene(shape=sh, color=c, size=sz, position=p, background=b)
            for sz, c, sh, p, b in itertools.product(SIZES, COLORS, SHAPES, POSITIONS, BACKGROUNDS)]


def parse_caption(text: str) -> ToyScene:
    words = [w for w in re.split(r"[^a-z]+", text.lower()) if w and w not in _STOPWORDS]
    found = {}
    for w in words:
        for f, vocab in VOCAB.items():
            if w in vocab:
                if f in found:
                    raise InvalidArgument(f"caption names two values for {f}: {found[f]!r}, {w!r}")
                found[f] = w
                break
        else:
            raise InvalidArgument(f"unknown caption token {w!r}")
    missing = [f for f in FIELDS if f not in found]
    if missing:
        raise InvalidArgument(f"caption is missing {', '.join(missing)}")
    return ToyScene(**found)


def shape_mask(scene: ToyScene, dy: int = 0) -> np.ndarray:
    s = SIDE[scene.size]
    x0 = CENTER_X[scene.position] - s // 2
    y0 = IMAGE_SIZE // 2 - s // 2 + dy
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE] + 0.5
    inside_box = (xx >= x0) & (xx < x0 + s) & (yy >= y0) & (yy < y0 + s)
    if scene.shape == "square":
        return inside_box
    cx, cy = x0 + s / 2, y0 + s / 2
    if scene.shape == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= (s / 2) ** 2
    # upward triangle, apex at the top row, base filling the bottom row
    return inside_box & (np.abs(xx - cx) <= (yy - y0) / 2 + 0.25)


def render(scene: ToyScene, seed: int = 0) -> np.ndarray:
    """Float32 image [3, 16, 16] in [0, 1]; ``seed`` picks vertical jitter and texture phase."""
    rng = np.random.default_rng(seed)
    dy = int(rng.integers(-1, 2))
    phase = int(rng.integers(0, 4))
    img = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
    if scene.background == "plain":
        img[:] = BG_LIGHT
    else:
        yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
        stripes = ((xx + yy + phase) // 2) % 2 == 0
        img[stripes] = BG_LIGHT
        img[~stripes] = BG_DARK
    img[shape_mask(scene, dy)] = PALETTE[scene.color]
    return (img.astype(np.float32) / 255.0).transpose(2, 0, 1).copy()


@dataclass(frozen=True)
class EditTriplet:
    index: int
    category: str
    source: ToyScene
    target: ToyScene
    seed: int

    @property
    def source_caption(self) -> str:
        return self.source.caption

    @property
    def target_caption(self) -> str:
        return self.target.caption

    @property
    def mode(self) -> str:
        return TASK_MODE[self.category]

    def image(self) -> np.ndarray:
        return render(self.source, self.seed)

    def validate(self) -> None:
        changed = {f for f in FIELDS if getattr(self.source, f) != getattr(self.target, f)}
        if changed != set(TASK_FIELDS[self.category]):
            raise InvalidArgument(f"triplet {self.index}: {self.category} edit changes {sorted(changed)}")

    def to_record(self, image_path: str | None = None) -> dict:
        return {
            "index": self.index,
            "category": self.category,
            "seed": self.seed,
            "source": asdict(self.source),
            "target": asdict(self.target),
            "source_caption": self.source_caption,
            "target_caption": self.target_caption,
            "image": image_path,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "EditTriplet":
        return cls(int(rec["index"]), rec["category"], ToyScene(**rec["source"]),
                   ToyScene(**rec["target"]), int(rec["seed"]))


def make_edit(source: ToyScene, category: str, rng: np.random.Generator) -> ToyScene:
    changes = {}
    for f in TASK_FIELDS[category]:
        options = [v for v in VOCAB[f] if v != getattr(source, f)]
        changes[f] = options[int(rng.integers(len(options)))]
    return replace(source, **changes)


def generate_benchmark(n_per_task: int = 20, seed: int = 0) -> list[EditTriplet]:
    if n_per_task < 1:
        raise InvalidArgument("n_per_task must be at least 1")
    rng = np.random.default_rng(seed)
    scenes = all_scenes()
    out = []
    for category in TASKS:
        for _ in range(n_per_task):
            src = scenes[int(rng.integers(len(scenes)))]
            tgt = make_edit(src, category, rng)
            trip = EditTriplet(len(out), category, src, tgt, int(rng.integers(2**31)))
            trip.validate()
            out.append(trip)
    return out


def attribute_triplets(n: int, seed: int = 0) -> list[EditTriplet]:
    """Color-change triplets only (the "red square -> blue square" family)."""
    rng = np.random.default_rng(seed)
    scenes = all_scenes()
    out = []
    for i in range(n):
        src = scenes[int(rng.integers(len(scenes)))]
        out.append(EditTriplet(i, "attribute", src, make_edit(src, "attribute", rng), int(rng.integers(2**31))))
    return out


def save_benchmark(triplets: list[EditTriplet], out_dir: str | Path) -> Path:
    from .imageio import save_image

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "benchmark.jsonl"
    with open(manifest, "w") as fh:
        for t in triplets:
            rel = f"images/{t.index:04d}_{t.category}.ppm"
            save_image(out_dir / rel, t.image())
            fh.write(json.dumps(t.to_record(rel)) + "\n")
    return manifest


def load_benchmark(manifest: str | Path) -> list[dict]:
    with open(manifest) as fh:
        return [json.loads(line) for line in fh if line.strip()]
