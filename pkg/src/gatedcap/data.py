"""Synthetic captioning scenes and caption preprocessing.

A scene is a 4x4 grid of feature vectors holding one to three coloured shapes.
Each object writes its attribute code (colour, shape, size, presence) and the
grid coordinates of its cell into one position; every position also carries
its coordinates so attention can resolve spatial relations.  The attribute
code is mixed by a fixed random orthogonal matrix and Gaussian noise
(sigma 0.1) is added.  Captions come from a small template grammar.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, START, END, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<start>", "<end>", "<unk>")

COLORS = ("red", "blue", "green", "yellow", "purple", "orange", "black", "white", "pink", "gray", "brown")
SHAPES = ("circle", "square", "triangle", "star", "heart", "diamond", "cross", "oval")
SIZES = ("small", "large")
# rare modifiers; each appears only a handful of times so the frequency filter fires
RARE_WORDS = ("lonely", "shiny", "vivid", "tiny", "glossy", "faded")
RARE_RATE = 0.0004

GRID = 4
N_POS = GRID * GRID
FEATURE_DIM = 32
NOISE_SIGMA = 0.1
MIX_SEED = 7919
_CODE_DIM = len(COLORS) + len(SHAPES) + 1 + 1 + 2

TEMPLATES = {
    1: (
        "a {z1} {c1} {s1}",
        "there is a {z1} {c1} {s1} in the picture",
        "a {c1} {s1} on a plain background",
        "one {z1} {c1} {s1}",
        "the image shows a {c1} {s1}",
    ),
    2: (
        "a {z1} {c1} {s1} {rel} a {z2} {c2} {s2}",
        "a {c1} {s1} and a {c2} {s2}",
        "there are two shapes a {c1} {s1} and a {c2} {s2}",
        "a {c2} {s2} {inv} a {c1} {s1}",
        "two objects a {c1} {s1} {rel} a {c2} {s2}",
    ),
    3: (
        "a {c1} {s1} a {c2} {s2} and a {c3} {s3}",
        "there are three shapes in the picture",
        "three objects including a {z1} {c1} {s1}",
        "a {c1} {s1} {rel} a {c2} {s2} and a {c3} {s3}",
        "a {z1} {c1} {s1} and two other shapes",
    ),
}


@dataclass
class Scene:
    id: int
    features: np.ndarray  # (N_POS, FEATURE_DIM)
    captions: list[str]
    split: str

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "features": self.features.tolist(),
            "captions": list(self.captions),
            "split": self.split,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Scene":
        return cls(int(obj["id"]), np.asarray(obj["features"], dtype=np.float64), list(obj["captions"]), obj["split"])


@dataclass
class Dataset:
    scenes: list[Scene]

    def split(self, name: str) -> list[Scene]:
        return [s for s in self.scenes if s.split == name]

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for s in self.scenes:
                fh.write(json.dumps(s.to_json(), separators=(",", ":")) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "Dataset":
        with open(path, encoding="utf-8") as fh:
            return cls([Scene.from_json(json.loads(line)) for line in fh if line.strip()])


def _mixing_matrix() -> np.ndarray:
    rng = np.random.default_rng(MIX_SEED)
    q, _ = np.linalg.qr(rng.standard_normal((FEATURE_DIM, FEATURE_DIM)))
    return q[:, :_CODE_DIM]


def _coords(pos: int) -> tuple[float, float]:
    row, col = divmod(pos, GRID)
    return (row / (GRID - 1)) * 2 - 1, (col / (GRID - 1)) * 2 - 1


def _relation(p1: int, p2: int) -> tuple[str, str]:
    # objects are listed in raster order, so the first is above or left of the second
    if p1 // GRID == p2 // GRID:
        return "left of", "right of"
    return "above", "below"


def _render(objects: Sequence[tuple[int, int, int, int]], mix: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    codes = np.zeros((N_POS, _CODE_DIM))
    for pos in range(N_POS):
        codes[pos, -2:] = _coords(pos)
    for color, shape, size, pos in objects:
        codes[pos, color] = 1.0
        codes[pos, len(COLORS) + shape] = 1.0
        codes[pos, len(COLORS) + len(SHAPES)] = 1.0 if size else -1.0
        codes[pos, len(COLORS) + len(SHAPES) + 1] = 1.0
    feats = codes @ mix.T * 2.0 + rng.normal(0.0, NOISE_SIGMA, (N_POS, FEATURE_DIM))
    return np.round(feats, 6)


def _captions(objects, rng: np.random.Generator) -> list[str]:
    slots: dict[str, str] = {}
    for i, (color, shape, size, _) in enumerate(objects, start=1):
        slots[f"c{i}"] = COLORS[color]
        slots[f"s{i}"] = SHAPES[shape]
        slots[f"z{i}"] = SIZES[size]
    if len(objects) >= 2:
        slots["rel"], slots["inv"] = _relation(objects[0][3], objects[1][3])
    templates = TEMPLATES[len(objects)]
    k = int(rng.integers(2, 6))
    chosen = sorted(rng.choice(len(templates), size=k, replace=False))
    out = []
    for t in chosen:
        words = templates[t].format(**slots).split()
        shape_at = [j for j, w in enumerate(words) if w in SHAPES]
        if shape_at and rng.random() < RARE_RATE * len(RARE_WORDS):
            # a rare modifier before the first shape word
            words.insert(shape_at[0], RARE_WORDS[int(rng.integers(len(RARE_WORDS)))])
        out.append(" ".join(words))
    return out


def generate(seed: int, n_scenes: int = 2400) -> Dataset:
    """Deterministic scene set split train/val/test in the ratio 10:1:1."""
    if n_scenes < 100:
        raise ValueError("n_scenes must be >= 100")
    rng = np.random.default_rng(seed)
    mix = _mixing_matrix()
    n_val = n_test = n_scenes // 12
    n_train = n_scenes - n_val - n_test
    scenes = []
    for i in range(n_scenes):
        n_obj = int(rng.integers(1, 4))
        positions = sorted(rng.choice(N_POS, size=n_obj, replace=False).tolist())
        objects = [
            (int(rng.integers(len(COLORS))), int(rng.integers(len(SHAPES))), int(rng.integers(2)), p)
            for p in positions
        ]
        feats = _render(objects, mix, rng)
        caps = _captions(objects, rng)
        split = "train" if i < n_train else "val" if i < n_train + n_val else "test"
        scenes.append(Scene(i, feats, caps, split))
    return Dataset(scenes)


# -- preprocessing ---------------------------------------------------------------


@dataclass
class Vocabulary:
    tokens: list[str]
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != SPECIALS:
            raise ValueError("reserved tokens must occupy ids 0..3")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, words: Iterable[str]) -> list[int]:
        return [self.index.get(w, UNK) for w in words]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids if i not in (PAD, START, END)]

    @classmethod
    def build(cls, captions: Iterable[str], min_freq: int = 5) -> "Vocabulary":
        counts = Counter(w for c in captions for w in tokenize(c))
        kept = sorted((w for w, n in counts.items() if n >= min_freq), key=lambda w: (-counts[w], w))
        return cls(list(SPECIALS) + kept)


def tokenize(caption: str) -> list[str]:
    return caption.lower().split()


def encode_caption(caption: str, vocab: Vocabulary, max_len: int = 20) -> list[int]:
    """[START] + up to max_len token ids + [END]."""
    return [START] + vocab.encode(tokenize(caption)[:max_len]) + [END]


@dataclass
class Prepared:
    vocab: Vocabulary
    features: dict[str, np.ndarray]  # split -> (n, N_POS, FEATURE_DIM)
    captions: dict[str, list[list[list[int]]]]  # split -> per scene -> encoded captions
    references: dict[str, list[list[list[str]]]]  # split -> per scene -> tokenized references


def preprocess(dataset: Dataset, min_freq: int = 5, max_len: int = 20) -> Prepared:
    """Build the vocabulary from the train split and encode every split."""
    vocab = Vocabulary.build((c for s in dataset.split("train") for c in s.captions), min_freq)
    feats, caps, refs = {}, {}, {}
    for name in ("train", "val", "test"):
        scenes = dataset.split(name)
        feats[name] = np.stack([s.features for s in scenes]) if scenes else np.zeros((0, N_POS, FEATURE_DIM))
        caps[name] = [[encode_caption(c, vocab, max_len) for c in s.captions] for s in scenes]
        refs[name] = [[tokenize(c)[:max_len] for c in s.captions] for s in scenes]
    return Prepared(vocab, feats, caps, refs)


def training_pairs(prep: Prepared, split: str = "train") -> list[tuple[int, list[int]]]:
    """(scene index, encoded caption) for every caption of the split."""
    return [(i, c) for i, caps in enumerate(prep.captions[split]) for c in caps]


def pad_batch(seqs: Sequence[Sequence[int]]) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out
