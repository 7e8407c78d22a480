"""Synthetic grounding benchmark: colored shapes, two-word queries.

Every example is a square image holding a few non-overlapping solid shapes
on a dark noisy background.  Each shape is a (color, shape-kind) pair unique
within its image, so a two-word query names exactly one of them; the label
is that shape's tight normalised box in center format.

Generation is deterministic in (seed, split, index): each example owns a
substream, and the order of draws inside an example is pinned (count,
combo shuffle, target slot, then size and position per shape, then the
noise seed).  Regenerating a dataset therefore reproduces files byte for
byte, and any single example can be rebuilt without the rest.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .autodiff import ContractViolation
from .objectives import BBox
from .rng import Xoshiro256StarStar, derive_seed, normal_field

PAD_TOKEN = "<pad>"
COLOR_NAMES = ("red", "green", "blue", "yellow")
SHAPE_NAMES = ("circle", "square", "triangle")
VOCAB = (PAD_TOKEN,) + COLOR_NAMES + SHAPE_NAMES

COLOR_VALUES = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.80, 0.20),
    "blue": (0.20, 0.30, 0.90),
    "yellow": (0.95, 0.85, 0.20),
}

# All (color, shape) combos in one fixed order; shuffles index into this.
COMBOS = tuple((c, s) for c in COLOR_NAMES for s in SHAPE_NAMES)

_SPLIT_INDEX = {"train": 0, "val": 1}


class DatasetError(ValueError):
    """Generation or file-format failure, carrying the offending id/path."""


@dataclass(frozen=True)
class DatasetSpec:
    image_size: int = 64
    min_shapes: int = 2
    max_shapes: int = 4
    min_size: int = 16  # twice the default patch size
    max_size: int = 20
    background: float = 0.1
    noise_std: float = 0.02
    train_count: int = 2000
    val_count: int = 200
    seed: int = 0
    max_place_attempts: int = 500

    def __post_init__(self):
        if self.image_size < 8:
            raise ContractViolation("image too small")
        if not (1 <= self.min_shapes <= self.max_shapes <= len(COMBOS)):
            raise ContractViolation("bad shape-count range")
        if not (2 <= self.min_size <= self.max_size <= self.image_size):
            raise ContractViolation("bad size range")
        if self.train_count < 0 or self.val_count < 0:
            raise ContractViolation("negative split size")

    def count_for(self, split: str) -> int:
        if split not in _SPLIT_INDEX:
            raise ContractViolation(f"unknown split {split!r}")
        return self.train_count if split == "train" else self.val_count


@dataclass
class PlacedShape:
    color: str
    kind: str
    x0: int  # top-left pixel of the bounding square
    y0: int
    size: int


@dataclass
class Layout:
    """Everything the renderer needs, fixed before any pixel is drawn."""

    shapes: list[PlacedShape]
    target_slot: int
    noise_seed: int

    @property
    def target(self) -> PlacedShape:
        return self.shapes[self.target_slot]


@dataclass
class GroundingExample:
    id: str
    image: np.ndarray  # (S, S, 3) float32 in [0, 1]
    text: str
    token_ids: list[int]
    bbox: BBox


def _rects_overlap(a: PlacedShape, x0: int, y0: int, size: int, gap: int) -> bool:
    return not (
        x0 >= a.x0 + a.size + gap
        or a.x0 >= x0 + size + gap
        or y0 >= a.y0 + a.size + gap
        or a.y0 >= y0 + size + gap
    )


def example_layout(spec: DatasetSpec, split: str, index: int) -> Layout:
    """Sample the layout of one example from its dedicated substream.

    Draw order is pinned: shape count, combo shuffle, target slot, one size
    per slot, then positions.  Positions are sampled largest shape first
    (ties by slot), which keeps rejection placement from painting itself
    into a corner; the returned shape list is back in slot order.
    """
    split_seed = derive_seed(spec.seed, _SPLIT_INDEX[split])
    gen = Xoshiro256StarStar(derive_seed(split_seed, index))
    count = gen.randint(spec.min_shapes, spec.max_shapes)
    combo_order = list(range(len(COMBOS)))
    gen.shuffle(combo_order)
    chosen = combo_order[:count]
    target_slot = gen.below(count)
    sizes = [gen.randint(spec.min_size, spec.max_size) for _ in chosen]
    placed: dict[int, PlacedShape] = {}
    for slot in sorted(range(count), key=lambda i: (-sizes[i], i)):
        color, kind = COMBOS[chosen[slot]]
        size = sizes[slot]
        span = spec.image_size - size + 1
        for attempt in range(spec.max_place_attempts):
            x0 = gen.below(span)
            y0 = gen.below(span)
            if not any(
                _rects_overlap(s, x0, y0, size, gap=1) for s in placed.values()
            ):
                placed[slot] = PlacedShape(color, kind, x0, y0, size)
                break
        else:
            raise DatasetError(
                f"example {split}-{index}: could not place {color} {kind} "
                f"of size {size} after {spec.max_place_attempts} attempts"
            )
    shapes = [placed[slot] for slot in range(count)]
    return Layout(shapes=shapes, target_slot=target_slot, noise_seed=gen.next_u64())


def shape_mask(kind: str, size: int) -> np.ndarray:
    """Boolean (size, size) raster of one shape kind, tight on all sides."""
    yy, xx = np.mgrid[0:size, 0:size]
    cy = cx = size / 2.0
    px = xx + 0.5
    py = yy + 0.5
    if kind == "square":
        return np.ones((size, size), dtype=bool)
    if kind == "circle":
        r = size / 2.0
        return (px - cx) ** 2 + (py - cy) ** 2 <= r * r
    if kind == "triangle":
        # Apex at top center, base along the bottom; half-width grows by
        # rows so the top row and the full base are both non-empty.
        halfw = (yy + 1) * (size / 2.0) / size
        return np.abs(px - cx) <= halfw
    raise ContractViolation(f"unknown shape kind {kind!r}")


def render_layout(spec: DatasetSpec, layout: Layout) -> tuple[np.ndarray, BBox]:
    """Rasterise a layout; returns the image and the target's tight box."""
    s = spec.image_size
    noise = normal_field(layout.noise_seed, s * s * 3).reshape(s, s, 3)
    image = np.clip(spec.background + spec.noise_std * noise, 0.0, 1.0)
    target_box = None
    for slot, shape in enumerate(layout.shapes):
        mask = shape_mask(shape.kind, shape.size)
        color = np.array(COLOR_VALUES[shape.color])
        region = image[
            shape.y0 : shape.y0 + shape.size, shape.x0 : shape.x0 + shape.size
        ]
        region[mask] = color
        if slot == layout.target_slot:
            ys, xs = np.nonzero(mask)
            x_lo = shape.x0 + xs.min()
            x_hi = shape.x0 + xs.max() + 1
            y_lo = shape.y0 + ys.min()
            y_hi = shape.y0 + ys.max() + 1
            target_box = BBox.from_corners(x_lo / s, y_lo / s, x_hi / s, y_hi / s)
    assert target_box is not None
    return image.astype(np.float32), target_box


def tokenize(text: str, vocab: tuple[str, ...] = VOCAB) -> list[int]:
    ids = []
    lookup = {word: i for i, word in enumerate(vocab)}
    for word in text.split():
        if word not in lookup:
            raise DatasetError(f"word {word!r} not in vocabulary")
        ids.append(lookup[word])
    if not ids:
        raise DatasetError("empty query text")
    return ids


def generate_example(spec: DatasetSpec, split: str, index: int) -> GroundingExample:
    layout = example_layout(spec, split, index)
    image, bbox = render_layout(spec, layout)
    target = layout.target
    text = f"{target.color} {target.kind}"
    return GroundingExample(
        id=f"{split}-{index:05d}",
        image=image,
        text=text,
        token_ids=tokenize(text),
        bbox=bbox,
    )


def generate_dataset(spec: DatasetSpec, split: str) -> list[GroundingExample]:
    return [
        generate_example(spec, split, i) for i in range(spec.count_for(split))
    ]


# ------------------------------------------------------------------ file io


def write_ppm(path: str, image: np.ndarray) -> None:
    """Binary PPM (P6, maxval 255) from a float image in [0, 1]."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ContractViolation(f"image must be (H, W, 3), got {image.shape}")
    h, w, _ = image.shape
    data = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path: str) -> np.ndarray:
    """Parse a binary PPM into a float32 (H, W, 3) array in [0, 1]."""
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"P6"):
        raise DatasetError(f"{path}: not a binary PPM")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated header")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace byte after maxval
    try:
        w, h, maxval = (int(v) for v in fields)
    except ValueError as e:
        raise DatasetError(f"{path}: bad header field") from e
    if maxval != 255 or w < 1 or h < 1:
        raise DatasetError(f"{path}: unsupported PPM header ({w}x{h}, {maxval})")
    body = raw[pos : pos + w * h * 3]
    if len(body) != w * h * 3:
        raise DatasetError(
            f"{path}: expected {w * h * 3} pixel bytes, found {len(body)}"
        )
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return (pixels.astype(np.float32) / 255.0).astype(np.float32)


def _manifest_line(example: GroundingExample) -> str:
    row = {
        "id": example.id,
        "image": f"images/{example.id}.ppm",
        "text": example.text,
        "bbox": [example.bbox.cx, example.bbox.cy, example.bbox.w, example.bbox.h],
    }
    return json.dumps(row, separators=(",", ":"))


def save_dataset(root: str, split: str, examples: list[GroundingExample]) -> None:
    """Write images/, <split>.jsonl and vocab.json under root."""
    if not examples:
        raise ContractViolation("refusing to save an empty split")
    images_dir = os.path.join(root, "images")
    os.makedirs(images_dir, exist_ok=True)
    for ex in examples:
        write_ppm(os.path.join(images_dir, f"{ex.id}.ppm"), ex.image)
    with open(os.path.join(root, f"{split}.jsonl"), "w", encoding="ascii") as f:
        for ex in examples:
            f.write(_manifest_line(ex) + "\n")
    with open(os.path.join(root, "vocab.json"), "w", encoding="ascii") as f:
        json.dump(list(VOCAB), f)


def load_dataset(root: str, split: str) -> tuple[list[GroundingExample], tuple[str, ...]]:
    vocab_path = os.path.join(root, "vocab.json")
    try:
        with open(vocab_path, "r", encoding="ascii") as f:
            vocab = tuple(json.load(f))
    except OSError as e:
        raise DatasetError(f"cannot read vocabulary at {vocab_path}: {e}") from e
    if not vocab or vocab[0] != PAD_TOKEN:
        raise DatasetError(f"{vocab_path}: first vocabulary entry must be padding")
    manifest = os.path.join(root, f"{split}.jsonl")
    examples = []
    try:
        with open(manifest, "r", encoding="ascii") as f:
            lines = f.readlines()
    except OSError as e:
        raise DatasetError(f"cannot read manifest at {manifest}: {e}") from e
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        try:
            row = json.loads(line)
            image = read_ppm(os.path.join(root, row["image"]))
            bbox = BBox(*(float(v) for v in row["bbox"]))
            examples.append(
                GroundingExample(
                    id=row["id"],
                    image=image,
                    text=row["text"],
                    token_ids=tokenize(row["text"], vocab),
                    bbox=bbox,
                )
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetError(f"{manifest}:{lineno}: bad row ({e})") from e
    if not examples:
        raise DatasetError(f"{manifest}: no examples")
    return examples, vocab
