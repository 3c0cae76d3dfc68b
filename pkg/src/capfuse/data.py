"""Synthetic scene dataset, tokenizer, vocabulary, and JSONL persistence.

Scenes contain 1-3 colored shape groups plus a spatial relation between
the first two groups when there are at least two. Each scene renders into a
noisy one-hot feature vector (the image stand-in) and 3-5 template paraphrase
captions that all describe the true attributes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError, ParseError

PAD, START, EOS, UNK, MASK = "<pad>", "<start>", "<eos>", "<unk>", "[MASK]"
SPECIALS = [PAD, START, EOS, UNK, MASK]
PAD_ID, START_ID, EOS_ID, UNK_ID, MASK_ID = range(5)

SHAPES = ["circle", "square", "triangle", "star"]
COLORS = ["red", "blue", "green", "yellow", "purple", "black", "white"]
SIZES = ["small", "large"]
RELATIONS = ["left of", "right of", "above", "below", "next to"]
COUNT_WORDS = {1: "one", 2: "two", 3: "three"}

# feature layout: 3 object slots x (present + shape + color + size + count)
# followed by the relation type one-hot
SLOT_DIM = 1 + len(SHAPES) + len(COLORS) + len(SIZES) + 3
BASE_FEATURE_DIM = 3 * SLOT_DIM + len(RELATIONS)


@dataclass
class SceneObject:
    shape: str
    color: str
    size: str
    count: int

    def phrase(self, style: str = "a") -> str:
        """Render as a noun phrase; style picks the singular determiner."""
        if self.count == 1:
            det = "one" if style == "one" else "a"
            return f"{det} {self.size} {self.color} {self.shape}"
        return f"{COUNT_WORDS[self.count]} {self.size} {self.color} {self.shape}s"


@dataclass
class Scene:
    index: int
    objects: list[SceneObject]
    relation: str | None  # between objects[0] and objects[1] when present


@dataclass
class CaptionExample:
    id: str
    split: str
    features: np.ndarray
    references: list[str]
    scene: Scene | None = None


@dataclass
class Vocab:
    """Token <-> id bijection with fixed special tokens in front."""

    tokens: list[str]
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        if self.tokens[: len(SPECIALS)] != SPECIALS:
            raise ConfigError("vocabulary must start with the special tokens")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ConfigError("vocabulary contains duplicate tokens")

    def __len__(self):
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        return self.tokens[idx]


@dataclass
class CaptionDataset:
    examples: list[CaptionExample]
    vocab: Vocab

    def split(self, name: str) -> list[CaptionExample]:
        return [ex for ex in self.examples if ex.split == name]


# -- scene and caption generation -------------------------------------------


def _make_scene(seed: int, index: int) -> tuple[Scene, np.random.Generator]:
    rng = np.random.default_rng([seed, index])
    n_objects = int(rng.integers(1, 4))
    objects = [
        SceneObject(
            shape=SHAPES[rng.integers(len(SHAPES))],
            color=COLORS[rng.integers(len(COLORS))],
            size=SIZES[rng.integers(len(SIZES))],
            count=int(rng.integers(1, 4)),
        )
        for _ in range(n_objects)
    ]
    relation = RELATIONS[rng.integers(len(RELATIONS))] if n_objects >= 2 else None
    return Scene(index, objects, relation), rng


def scene_features(scene: Scene, rng: np.random.Generator,
                   feature_dim: int, noise: float) -> np.ndarray:
    """Concatenated per-slot one-hot encodings plus additive Gaussian noise."""
    if feature_dim < BASE_FEATURE_DIM:
        raise ConfigError(
            f"feature_dim must be at least {BASE_FEATURE_DIM}, got {feature_dim}"
        )
    vec = np.zeros(feature_dim)
    for slot, obj in enumerate(scene.objects):
        base = slot * SLOT_DIM
        vec[base] = 1.0
        vec[base + 1 + SHAPES.index(obj.shape)] = 1.0
        vec[base + 1 + len(SHAPES) + COLORS.index(obj.color)] = 1.0
        vec[base + 1 + len(SHAPES) + len(COLORS) + SIZES.index(obj.size)] = 1.0
        vec[base + 1 + len(SHAPES) + len(COLORS) + len(SIZES) + obj.count - 1] = 1.0
    if scene.relation is not None:
        vec[3 * SLOT_DIM + RELATIONS.index(scene.relation)] = 1.0
    if noise > 0:
        vec = vec + rng.normal(0.0, noise, size=feature_dim)
    return vec


def _templates_for(scene: Scene) -> list[str]:
    objs = scene.objects
    be = "is" if objs[0].count == 1 else "are"
    a = objs[0].phrase()
    a1 = objs[0].phrase("one")
    if len(objs) == 1:
        return [
            a,
            f"there {be} {a}",
            f"the image shows {a1}",
            f"a picture of {a}",
            f"{a} in the picture",
        ]
    b, b1 = objs[1].phrase(), objs[1].phrase("one")
    rel = scene.relation
    if len(objs) == 2:
        return [
            f"{a} {rel} {b}",
            f"there {be} {a} {rel} {b}",
            f"the image shows {a1} {rel} {b1}",
            f"a picture of {a} and {b}",
            f"{a} and {b} in the picture",
        ]
    c, c1 = objs[2].phrase(), objs[2].phrase("one")
    return [
        f"{a} {rel} {b} and {c}",
        f"there {be} {a} {rel} {b} and {c}",
        f"the image shows {a1} {b1} and {c1}",
        f"a picture of {a} {b} and {c}",
        f"{a} {b} and {c} in the picture",
    ]


def scene_captions(scene: Scene, rng: np.random.Generator, n_refs: int) -> list[str]:
    templates = _templates_for(scene)
    picks = rng.choice(len(templates), size=n_refs, replace=False)
    return [templates[i] for i in picks]


def generate_dataset(seed: int, n_scenes: int, refs_per_scene: int = 3,
                     split_fractions: tuple[float, float, float] = (5 / 6, 1 / 12, 1 / 12),
                     feature_dim: int = 64, noise: float = 0.05) -> list[CaptionExample]:
    """Deterministic synthetic dataset; each scene depends only on (seed, index).

    Split sizes for train and val are round(n * fraction); test takes the
    remainder so every scene is covered.
    """
    if n_scenes < 10:
        raise ConfigError(f"n_scenes must be at least 10, got {n_scenes}")
    if not 3 <= refs_per_scene <= 5:
        raise ConfigError("refs_per_scene must lie in 3..5 (distinct templates)")
    if len(split_fractions) != 3 or abs(sum(split_fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {split_fractions}")
    if min(split_fractions) < 0:
        raise ConfigError("split fractions must be non-negative")
    n_train = round(n_scenes * split_fractions[0])
    n_val = round(n_scenes * split_fractions[1])
    if n_train + n_val > n_scenes:
        raise ConfigError("split fractions leave no room for a test split")
    examples = []
    for index in range(n_scenes):
        scene, rng = _make_scene(seed, index)
        references = scene_captions(scene, rng, refs_per_scene)
        features = scene_features(scene, rng, feature_dim, noise)
        if index < n_train:
            split = "train"
        elif index < n_train + n_val:
            split = "val"
        else:
            split = "test"
        examples.append(CaptionExample(
            id=f"scene-{index:06d}", split=split, features=features,
            references=references, scene=scene,
        ))
    return examples


def check_scene_consistency(example: CaptionExample) -> bool:
    """Every attribute word in every reference must be true of the scene."""
    scene = example.scene
    if scene is None:
        raise InputError("example carries no scene to validate against")
    true_colors = {o.color for o in scene.objects}
    true_sizes = {o.size for o in scene.objects}
    true_shapes = set()
    true_numbers = set()
    for o in scene.objects:
        true_shapes.add(o.shape if o.count == 1 else o.shape + "s")
        true_numbers.add(COUNT_WORDS[o.count])
    relation_words = set(scene.relation.split()) if scene.relation else set()
    for ref in example.references:
        for word in ref.split():
            if word in COLORS and word not in true_colors:
                return False
            if word in SIZES and word not in true_sizes:
                return False
            if word in SHAPES or word[:-1] in SHAPES and word.endswith("s"):
                if word not in true_shapes:
                    return False
            if word in COUNT_WORDS.values() and word != "one":
                if word not in true_numbers:
                    return False
            if word in {"above", "below", "left", "right", "next"}:
                if word not in relation_words:
                    return False
    return True


# -- vocabulary and tokenization ---------------------------------------------


def build_vocab(train_examples: list[CaptionExample], min_count: int = 5) -> Vocab:
    """Lowercased whitespace tokens occurring at least min_count times."""
    counts: dict[str, int] = {}
    for ex in train_examples:
        for ref in ex.references:
            for tok in ref.lower().split():
                counts[tok] = counts.get(tok, 0) + 1
    if not counts:
        raise InputError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_count),
                  key=lambda t: (-counts[t], t))
    return Vocab(SPECIALS + kept)


def tokenize(text: str, vocab: Vocab) -> list[int]:
    """Lowercase, split on whitespace, map OOV to <unk>, wrap in start/eos."""
    ids = [vocab.id_of(tok) for tok in text.lower().split()]
    return [START_ID] + ids + [EOS_ID]


def detokenize(ids, vocab: Vocab) -> str:
    """Strip special tokens and join the remainder with single spaces."""
    words = [vocab.token_of(i) for i in ids if i >= len(SPECIALS)]
    return " ".join(words)


def write_vocab(vocab: Vocab, path):
    with open(path, "w") as fh:
        for tok in vocab.tokens:
            fh.write(tok + "\n")


def read_vocab(path) -> Vocab:
    with open(path) as fh:
        tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
    return Vocab(tokens)


# -- JSONL persistence --------------------------------------------------------


def write_jsonl(examples: list[CaptionExample], path):
    """One record per line: {id, split, features, references}."""
    with open(path, "w") as fh:
        for ex in examples:
            record = {
                "id": ex.id,
                "split": ex.split,
                "features": list(ex.features),
                "references": ex.references,
            }
            fh.write(json.dumps(record) + "\n")


def read_jsonl(path) -> list[CaptionExample]:
    examples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                examples.append(CaptionExample(
                    id=record["id"],
                    split=record["split"],
                    features=np.asarray(record["features"], dtype=np.float64),
                    references=list(record["references"]),
                ))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ParseError(f"{path}: malformed record at line {lineno}: {exc}") from None
    return examples


def write_captions(rows: list[dict], path):
    """captions.jsonl rows: {"id": ..., "caption": ...}."""
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps({"id": row["id"], "caption": row["caption"]}) + "\n")


def read_captions(path) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                out[row["id"]] = row["caption"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ParseError(f"{path}: malformed record at line {lineno}: {exc}") from None
    return out
