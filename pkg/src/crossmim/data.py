"""Synthetic image-caption corpus, tokenizer, and two-view augmentation.

Scenes are procedurally drawn colored shapes on plain backgrounds with
compositional templated captions, so caption words correspond exactly to
rendered content and every patch carries a ground-truth shape/background
label for purity evaluation.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .config import ModelConfig
from .mim import ViewPair
from .model import CLS_ID, NUM_SPECIAL_TOKENS, PAD_ID, ImageBatch, TokenBatch

SHAPE_NAMES = ("circle", "square", "triangle", "cross")

COLORS = {
    "red": (0.90, 0.12, 0.10),
    "green": (0.10, 0.75, 0.20),
    "blue": (0.12, 0.25, 0.90),
    "yellow": (0.95, 0.90, 0.10),
    "purple": (0.60, 0.15, 0.80),
    "orange": (0.95, 0.55, 0.10),
}

BACKGROUNDS = {
    "white": (0.92, 0.92, 0.92),
    "black": (0.08, 0.08, 0.08),
    "gray": (0.50, 0.50, 0.50),
}

RELATIONS = ("above", "below", "left", "right")

# label 0 is background; shapes are 1-based in SHAPE_NAMES order
SHAPE_LABELS = {name: i + 1 for i, name in enumerate(SHAPE_NAMES)}


class Vocabulary:
    """Fixed word list over the caption templates, behind the special ids."""

    def __init__(self, words: tuple[str, ...] | None = None):
        if words is None:
            words = tuple(sorted(
                {"a", "on", "background", "of"}
                | set(COLORS) | set(BACKGROUNDS) | set(SHAPE_NAMES)
                | {"above", "below", "left", "right"}
            ))
        self.words = words
        self.word_to_id = {w: NUM_SPECIAL_TOKENS + i for i, w in enumerate(words)}

    def __len__(self) -> int:
        return NUM_SPECIAL_TOKENS + len(self.words)

    def encode(self, caption: str, max_text_len: int) -> tuple[list[int], int]:
        """Return (ids of width 1+L, true length including CLS)."""
        words = caption.split()
        if len(words) > max_text_len:
            raise ValueError(
                f"caption '{caption}' has {len(words)} tokens > max {max_text_len}"
            )
        ids = [CLS_ID] + [self.word_to_id[w] for w in words]
        length = len(ids)
        ids += [PAD_ID] * (1 + max_text_len - length)
        return ids, length


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cx: int
    cy: int
    size: int


@dataclass(frozen=True)
class SceneSpec:
    """Procedural description of one image; rendering is deterministic."""

    objects: tuple[SceneObject, ...]
    relation: str | None
    background: str

    def caption(self) -> str:
        a, rest = self.objects[0], self.objects[1:]
        if not rest:
            return f"a {a.color} {a.shape} on a {self.background} background"
        b = rest[0]
        rel = self.relation if self.relation in ("above", "below") else f"{self.relation} of"
        return f"a {a.color} {a.shape} {rel} a {b.color} {b.shape}"


@dataclass
class SceneRecord:
    scene: SceneSpec
    caption: str
    split: str


@dataclass
class DatasetManifest:
    records: list[SceneRecord]
    image_size: int
    seed: int

    def split_indices(self, split: str) -> list[int]:
        return [i for i, r in enumerate(self.records) if r.split == split]

    def to_jsonable(self) -> dict:
        return {
            "image_size": self.image_size,
            "seed": self.seed,
            "records": [
                {
                    "scene": dataclasses.asdict(r.scene),
                    "caption": r.caption,
                    "split": r.split,
                }
                for r in self.records
            ],
        }

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_jsonable(), fh, indent=1)


def _shape_mask(shape: str, cx: int, cy: int, size: int, image_size: int) -> np.ndarray:
    yy, xx = np.ogrid[:image_size, :image_size]
    dx, dy = xx - cx, yy - cy
    if shape == "circle":
        return dx * dx + dy * dy <= size * size
    if shape == "square":
        return (np.abs(dx) <= size) & (np.abs(dy) <= size)
    if shape == "triangle":
        inside_y = (dy >= -size) & (dy <= size)
        return inside_y & (np.abs(dx) <= (dy + size) / 2.0)
    if shape == "cross":
        w = max(1, size // 3)
        arm = np.abs(dx) <= size
        bar = np.abs(dy) <= size
        return ((np.abs(dy) <= w) & arm) | ((np.abs(dx) <= w) & bar)
    raise ValueError(f"unknown shape {shape!r}")


def render_scene(scene: SceneSpec, image_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Render to (3, H, W) float32 pixels in [0,1] plus an (H, W) label map."""
    bg = np.array(BACKGROUNDS[scene.background], dtype=np.float32)
    img = np.tile(bg[:, None, None], (1, image_size, image_size))
    labels = np.zeros((image_size, image_size), dtype=np.int64)
    for obj in scene.objects:
        mask = _shape_mask(obj.shape, obj.cx, obj.cy, obj.size, image_size)
        color = np.array(COLORS[obj.color], dtype=np.float32)
        img[:, mask] = color[:, None]
        labels[mask] = SHAPE_LABELS[obj.shape]
    return img, labels


def patch_labels_from_map(label_map: np.ndarray, patch_size: int, min_pixels: int = 16) -> np.ndarray:
    """Per-patch ground truth: majority shape if it covers >= min_pixels, else 0."""
    h = label_map.shape[0]
    g = h // patch_size
    out = np.zeros(g * g, dtype=np.int64)
    for r in range(g):
        for c in range(g):
            tile = label_map[
                r * patch_size : (r + 1) * patch_size, c * patch_size : (c + 1) * patch_size
            ]
            counts = np.bincount(tile.reshape(-1), minlength=len(SHAPE_NAMES) + 1)
            counts[0] = 0
            best = int(counts.argmax())
            if counts[best] >= min_pixels:
                out[r * g + c] = best
    return out


def _sample_scene(rng: np.random.Generator, image_size: int) -> SceneSpec:
    colors = list(COLORS)
    shapes = list(SHAPE_NAMES)
    half = image_size // 2
    quarter = image_size // 4

    def jitter(lo=-2, hi=2):
        return int(rng.integers(lo, hi + 1))

    if rng.random() < 1.0 / 3.0:
        obj = SceneObject(
            shape=shapes[rng.integers(len(shapes))],
            color=colors[rng.integers(len(colors))],
            cx=half + jitter(-3, 3),
            cy=half + jitter(-3, 3),
            size=int(rng.integers(8, 12)),
        )
        bg = list(BACKGROUNDS)[rng.integers(len(BACKGROUNDS))]
        return SceneSpec(objects=(obj,), relation=None, background=bg)

    relation = RELATIONS[rng.integers(len(RELATIONS))]
    while True:
        c1, c2 = colors[rng.integers(len(colors))], colors[rng.integers(len(colors))]
        s1, s2 = shapes[rng.integers(len(shapes))], shapes[rng.integers(len(shapes))]
        if (c1, s1) != (c2, s2):
            break
    centers = {
        "above": ((half, quarter), (half, image_size - quarter)),
        "below": ((half, image_size - quarter), (half, quarter)),
        "left": ((quarter, half), (image_size - quarter, half)),
        "right": ((image_size - quarter, half), (quarter, half)),
    }[relation]
    objs = tuple(
        SceneObject(
            shape=s, color=c,
            cx=cx + jitter(), cy=cy + jitter(),
            size=int(rng.integers(5, 8)),
        )
        for (s, c), (cx, cy) in zip(((s1, c1), (s2, c2)), centers)
    )
    bg = list(BACKGROUNDS)[rng.integers(len(BACKGROUNDS))]
    return SceneSpec(objects=objs, relation=relation, background=bg)


def generate_synthetic_corpus(
    n: int,
    rng: "int | np.random.Generator",
    image_size: int = 32,
    val_size: int | None = None,
) -> DatasetManifest:
    """Generate n unique (image, caption) records; the tail val_size are 'val'."""
    if n < 8:
        raise ValueError(f"corpus needs at least 8 records, got {n}")
    seed = rng if isinstance(rng, int) else -1
    if isinstance(rng, int):
        rng = np.random.default_rng(rng)
    if val_size is None:
        val_size = n // 9
    if val_size >= n:
        raise ValueError("val_size must be smaller than the corpus")
    seen: set[SceneSpec] = set()
    records = []
    while len(records) < n:
        scene = _sample_scene(rng, image_size)
        if scene in seen:
            continue
        seen.add(scene)
        split = "val" if len(records) >= n - val_size else "train"
        records.append(SceneRecord(scene=scene, caption=scene.caption(), split=split))
    return DatasetManifest(records=records, image_size=image_size, seed=seed)


def corpus_from_config(cfg: ModelConfig) -> DatasetManifest:
    return generate_synthetic_corpus(
        cfg.corpus_size, cfg.data_seed, image_size=cfg.image_size, val_size=cfg.val_size
    )


@dataclass
class CorpusTensors:
    """The whole corpus rendered and tokenized up front (it is tiny)."""

    images: torch.Tensor        # (n, 3, H, W)
    token_ids: torch.Tensor     # (n, 1 + L)
    token_lengths: torch.Tensor  # (n,)
    patch_labels: torch.Tensor  # (n, N)
    train_idx: torch.Tensor
    val_idx: torch.Tensor

    def image_batch(self, idx: torch.Tensor) -> ImageBatch:
        return ImageBatch(self.images[idx])

    def token_batch(self, idx: torch.Tensor) -> TokenBatch:
        return TokenBatch(ids=self.token_ids[idx], lengths=self.token_lengths[idx])


def prepare_tensors(
    manifest: DatasetManifest, vocab: Vocabulary, cfg: ModelConfig
) -> CorpusTensors:
    images, ids, lengths, labels = [], [], [], []
    for rec in manifest.records:
        img, label_map = render_scene(rec.scene, manifest.image_size)
        images.append(torch.from_numpy(img))
        row, length = vocab.encode(rec.caption, cfg.max_text_len)
        ids.append(row)
        lengths.append(length)
        labels.append(torch.from_numpy(patch_labels_from_map(label_map, cfg.patch_size)))
    return CorpusTensors(
        images=torch.stack(images),
        token_ids=torch.tensor(ids, dtype=torch.long),
        token_lengths=torch.tensor(lengths, dtype=torch.long),
        patch_labels=torch.stack(labels),
        train_idx=torch.tensor(manifest.split_indices("train"), dtype=torch.long),
        val_idx=torch.tensor(manifest.split_indices("val"), dtype=torch.long),
    )


def _augment_one(img: torch.Tensor, rng: torch.Generator) -> torch.Tensor:
    """Random crop-resize, horizontal flip, and mild color jitter for one image."""
    c, h, w = img.shape
    frac = 0.8 + 0.2 * torch.rand((), generator=rng).item()
    crop = max(8, round(frac * h))
    top = int(torch.randint(0, h - crop + 1, (), generator=rng))
    left = int(torch.randint(0, w - crop + 1, (), generator=rng))
    out = img[:, top : top + crop, left : left + crop]
    out = F.interpolate(
        out.unsqueeze(0), size=(h, w), mode="bilinear", align_corners=False
    ).squeeze(0)
    if torch.rand((), generator=rng) < 0.5:
        out = out.flip(-1)
    brightness = 0.85 + 0.3 * torch.rand((), generator=rng)
    gains = 0.95 + 0.1 * torch.rand(3, 1, 1, generator=rng)
    return (out * brightness * gains).clamp(0.0, 1.0)


def augment_two_views(
    image: ImageBatch, rng: torch.Generator, mode: str = "full"
) -> ViewPair:
    """Two independently distorted views per image; identity mode for tests."""
    if mode == "identity":
        return ViewPair(view1=ImageBatch(image.pixels), view2=ImageBatch(image.pixels))
    view1 = torch.stack([_augment_one(img, rng) for img in image.pixels])
    view2 = torch.stack([_augment_one(img, rng) for img in image.pixels])
    return ViewPair(view1=ImageBatch(view1), view2=ImageBatch(view2))
