"""Procedural two-object scenes with captions that fully describe them."""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import FIRST_WORD_ID

SHAPES = ("square", "cross", "disk")
COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "orange": (1.0, 0.5, 0.0),
}
ROWS = ("top", "upper", "lower", "bottom")
COLS = ("left", "inner-left", "inner-right", "right")
DETERMINERS = ("a", "one", "the", "some")
PREPOSITIONS = ("at", "in", "near", "by")
CONNECTIVES = ("and", "with", "beside", "plus", "while", "then", "also", "next")

GRID = 4
CELL = 4
IMAGE_SIZE = (GRID * CELL, GRID * CELL)
CAPTION_LEN = 13

WORDS = (
    DETERMINERS
    + tuple(COLORS)
    + SHAPES
    + PREPOSITIONS
    + ROWS
    + COLS
    + CONNECTIVES
)
WORD_TO_ID = {w: FIRST_WORD_ID + i for i, w in enumerate(WORDS)}
ID_TO_WORD = {i: w for w, i in WORD_TO_ID.items()}
VOCAB_SIZE = FIRST_WORD_ID + len(WORDS)

_SPRITES = {
    "square": np.ones((CELL, CELL)),
    "cross": np.eye(CELL) + np.fliplr(np.eye(CELL)),
    "disk": np.array([[0, 1, 1, 0], [1, 1, 1, 1], [1, 1, 1, 1], [0, 1, 1, 0]], dtype=float),
}


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cell: int  # row-major index on the 4x4 grid


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, SceneObject]

    @property
    def descriptor(self) -> tuple:
        return tuple((o.shape, o.color, o.cell) for o in self.objects)

    def render(self) -> np.ndarray:
        img = np.zeros(IMAGE_SIZE + (3,))
        for obj in self.objects:
            r, c = divmod(obj.cell, GRID)
            sprite = _SPRITES[obj.shape][:, :, None] * np.array(COLORS[obj.color])
            img[r * CELL : (r + 1) * CELL, c * CELL : (c + 1) * CELL] = sprite
        return img

    def caption_words(self) -> list[str]:
        h = _digest(self.descriptor)
        words = []
        for j, obj in enumerate(self.objects):
            r, c = divmod(obj.cell, GRID)
            det = DETERMINERS[(h >> (2 * j)) % len(DETERMINERS)]
            prep = PREPOSITIONS[(h >> (4 + 2 * j)) % len(PREPOSITIONS)]
            words += [det, obj.color, obj.shape, prep, ROWS[r], COLS[c]]
            if j == 0:
                words.append(CONNECTIVES[(h >> 8) % len(CONNECTIVES)])
        return words

    def caption(self) -> list[int]:
        return [WORD_TO_ID[w] for w in self.caption_words()]


def _digest(descriptor) -> int:
    return zlib.crc32(repr(descriptor).encode())


def is_validation(descriptor) -> bool:
    """Deterministic split: roughly one scene in eight is reserved for validation."""
    return _digest(("split",) + tuple(descriptor)) % 8 == 0


_SPLIT_OFFSET = {"train": 0, "val": 1_000_003}


def random_scene(rng: np.random.Generator) -> Scene:
    cells = rng.choice(GRID * GRID, size=2, replace=False)
    objs = tuple(
        SceneObject(SHAPES[rng.integers(len(SHAPES))], tuple(COLORS)[rng.integers(len(COLORS))], int(cell))
        for cell in cells
    )
    return Scene(objs)


def generate_scenes(split: str, count: int, seed: int) -> list[Scene]:
    if split not in _SPLIT_OFFSET:
        raise ValueError(f"split must be 'train' or 'val', got {split!r}")
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed + _SPLIT_OFFSET[split])
    want_val = split == "val"
    out = []
    while len(out) < count:
        scene = random_scene(rng)
        if is_validation(scene.descriptor) == want_val:
            out.append(scene)
    return out


@dataclass
class Corpus:
    """Every scene contributes a mono-image, a mono-text and a paired view."""

    scenes: list[Scene]
    pixels: np.ndarray  # [n, H, W, 3]
    captions: np.ndarray  # [n, CAPTION_LEN]

    def __len__(self) -> int:
        return len(self.scenes)

    def views(self, index: int) -> dict:
        return {
            "image": self.pixels[index],
            "text": self.captions[index],
            "pair": (self.pixels[index], self.captions[index]),
        }


def generate(split: str, count: int, seed: int) -> Corpus:
    scenes = generate_scenes(split, count, seed)
    pixels = np.stack([s.render() for s in scenes])
    captions = np.array([s.caption() for s in scenes], dtype=np.int64)
    return Corpus(scenes, pixels, captions)


def caption_lookup(corpus: Corpus) -> dict[tuple, tuple]:
    """Caption -> scene descriptor map; the caption is injective so this never collides."""
    table: dict[tuple, tuple] = {}
    for scene, cap in zip(corpus.scenes, corpus.captions):
        key = tuple(int(i) for i in cap)
        if key in table and table[key] != scene.descriptor:
            raise AssertionError(f"caption collision for {key}")
        table[key] = scene.descriptor
    return table


def dump_corpus(corpus: Corpus, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    np.save(d / "pixels.npy", corpus.pixels)
    with open(d / "captions.jsonl", "w") as fh:
        for scene, cap in zip(corpus.scenes, corpus.captions):
            fh.write(json.dumps({"ids": [int(i) for i in cap], "words": scene.caption_words(),
                                 "objects": [list(o) for o in scene.descriptor]}) + "\n")
