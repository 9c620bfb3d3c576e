"""
Synthetic shape-scene image/caption dataset.

Scenes place 1-3 colored shapes on a 3x3 grid; every image gets five captions
produced by a small template grammar. Captions name colors, shapes and cells
so that they pick out their scene, and no caption text is given to two images.
Datasets are immutable and are persisted as one PNG per pair, a tab-separated
captions file and a JSON manifest carrying the schema version, seed and per-file checksums.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
import torch
from PIL import Image

from lssa_lab.config import DatasetSpec, coerce
from lssa_lab.errors import (
    ChecksumMismatchError,
    ConfigError,
    EmptyInputError,
    ManifestMissingError,
    MissingArtifactError,
    SchemaVersionError,
)
from lssa_lab.seeds import numpy_rng

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CAPTIONS_PER_IMAGE = 5
MIN_SIDE = 12
PAD = "<pad>"

# ---------------------------
# Grammar
# ---------------------------
SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
ROWS = ("top", "middle", "bottom")
COLS = ("left", "center", "right")
RELATIONS = ("above", "below", "beside")
COUNTS = ("one", "two", "three")
FUNCTION_WORDS = ("a", "the", "at", "in", "is", "with", "shapes", "shape", "cell", "only", "alone", "just", "lone")
# object-count weights for 1, 2, 3 objects
SCENE_SIZES = (1, 2, 3)
SCENE_SIZE_WEIGHTS = (0.2, 0.4, 0.4)

WORD_CLASSES: Dict[str, Tuple[str, ...]] = {
    "color": COLORS,
    "shape": SHAPES,
    "row": ROWS,
    "col": COLS,
    "relation": RELATIONS,
    "count": COUNTS,
}
# every function word is its own singleton class
WORD_CLASSES.update({f"word:{w}": (w,) for w in FUNCTION_WORDS})

SLOT_CLASS = {
    "c1": "color", "s1": "shape", "r1": "row", "k1": "col",
    "n": "count", "rel": "relation",
    "c2": "color", "s2": "shape", "r2": "row", "k2": "col",
}
# true only of one-object scenes
SOLO_TEMPLATES = (
    "only a {c1} {s1} at {r1} {k1}",
    "a {c1} {s1} alone at {r1} {k1}",
    "just a {c1} {s1} at the {r1} {k1}",
    "the only shape is a {c1} {s1} at {r1} {k1}",
    "a lone {c1} {s1} in the {r1} {k1} cell",
)
# multi-object scenes: one per object
COUNT_TEMPLATES = ("{n} shapes with a {c1} {s1} at {r1} {k1}",)
# multi-object scenes: one per ordered pair of objects
PAIR_TEMPLATES = (
    "a {c1} {s1} at {r1} {k1} {rel} a {c2} {s2}",
    "a {c1} {s1} {rel} a {c2} {s2} at {r2} {k2}",
    "{n} shapes with a {c1} {s1} {rel} a {c2} {s2}",
)

PALETTE = {
    "red": (255, 0, 0),
    "green": (0, 255, 0),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
}
BACKGROUND = (40, 40, 40)


# ---------------------------
# Vocabulary
# ---------------------------
@dataclass(frozen=True)
class TokenSequence:
    ids: Tuple[int, ...]
    text: str

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class Vocabulary:
    tokens: Tuple[str, ...]
    classes: Tuple[Tuple[str, Tuple[str, ...]], ...]
    pad_id: int = 0

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigError("vocabulary tokens must be unique")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})
        cls_of: Dict[int, Tuple[int, ...]] = {}
        for _, members in self.classes:
            ids = tuple(sorted(self._index[m] for m in members))
            for i in ids:
                cls_of[i] = ids
        object.__setattr__(self, "_class_of", cls_of)

    @classmethod
    def from_grammar(cls) -> "Vocabulary":
        words: List[str] = [PAD]
        for members in WORD_CLASSES.values():
            words.extend(m for m in members if m not in words)
        return cls(tokens=tuple(words), classes=tuple(WORD_CLASSES.items()))

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()[:16]

    def id_of(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise ConfigError(f"token '{token}' is not in the vocabulary") from None

    def tokenize(self, text: str) -> TokenSequence:
        words = text.split()
        if not words:
            raise EmptyInputError("cannot tokenize an empty caption")
        return TokenSequence(ids=tuple(self.id_of(w) for w in words), text=" ".join(words))

    def detokenize(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[i] for i in ids if i != self.pad_id)

    def from_ids(self, ids: Sequence[int]) -> TokenSequence:
        return TokenSequence(ids=tuple(int(i) for i in ids), text=self.detokenize(ids))

    def replace(self, t: TokenSequence, position: int, token_id: int) -> TokenSequence:
        ids = list(t.ids)
        ids[position] = token_id
        return self.from_ids(ids)

    def class_members(self, token_id: int) -> Tuple[int, ...]:
        """ids sharing the grammar class of token_id (itself included)"""
        return self._class_of.get(token_id, (token_id,))

    def to_dict(self) -> Dict[str, Any]:
        return {"tokens": list(self.tokens), "classes": [[k, list(v)] for k, v in self.classes], "pad_id": self.pad_id}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Vocabulary":
        return cls(
            tokens=tuple(data["tokens"]),
            classes=tuple((k, tuple(v)) for k, v in data["classes"]),
            pad_id=int(data.get("pad_id", 0)),
        )


def _template_pattern(template: str) -> List[Tuple[str, str]]:
    out = []
    for part in template.split():
        if part.startswith("{"):
            out.append(("slot", SLOT_CLASS[part.strip("{}")]))
        else:
            out.append(("word", part))
    return out


_PATTERNS = [_template_pattern(t) for t in SOLO_TEMPLATES + COUNT_TEMPLATES + PAIR_TEMPLATES]


def is_grammatical(text: str) -> bool:
    words = text.split()
    for pattern in _PATTERNS:
        if len(pattern) != len(words):
            continue
        if all(
            (w == value) if kind == "word" else (w in WORD_CLASSES[value])
            for w, (kind, value) in zip(words, pattern)
        ):
            return True
    return False


# ---------------------------
# Scenes
# ---------------------------
@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cell: int  # row-major 0..8

    @property
    def row(self) -> int:
        return self.cell // 3

    @property
    def col(self) -> int:
        return self.cell % 3


@dataclass(frozen=True)
class ShapeScene:
    objects: Tuple[SceneObject, ...]
    image_size: Tuple[int, int]

    def __post_init__(self):
        if not 1 <= len(self.objects) <= 3:
            raise ConfigError(f"a scene holds 1-3 objects, got {len(self.objects)}")
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise ConfigError(f"scene objects share a cell: {cells}")

    def render(self) -> np.ndarray:
        """uint8 HxWx3"""
        h, w = self.image_size
        img = np.empty((h, w, 3), dtype=np.uint8)
        img[:] = BACKGROUND
        cell_h, cell_w = h / 3, w / 3
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
        rad = 0.38 * min(cell_h, cell_w)
        for obj in self.objects:
            cy, cx = (obj.row + 0.5) * cell_h, (obj.col + 0.5) * cell_w
            dy, dx = yy - cy, xx - cx
            if obj.shape == "circle":
                mask = dy**2 + dx**2 <= rad**2
            elif obj.shape == "square":
                mask = (np.abs(dy) <= 0.8 * rad) & (np.abs(dx) <= 0.8 * rad)
            else:
                mask = (dy >= -rad) & (dy <= rad) & (np.abs(dx) <= (dy + rad) * 0.5)
            img[mask] = PALETTE[obj.color]
        return img

    def captions(self) -> List[str]:
        """every grammar caption that is true of the scene, deduplicated, in generation order"""

        def where(o: SceneObject) -> Dict[str, str]:
            return {"c": o.color, "s": o.shape, "r": ROWS[o.row], "k": COLS[o.col]}

        if len(self.objects) == 1:
            o = where(self.objects[0])
            return [tpl.format(c1=o["c"], s1=o["s"], r1=o["r"], k1=o["k"]) for tpl in SOLO_TEMPLATES]

        out: List[str] = []
        n = COUNTS[len(self.objects) - 1]
        for obj in self.objects:
            o = where(obj)
            for tpl in COUNT_TEMPLATES:
                out.append(tpl.format(n=n, c1=o["c"], s1=o["s"], r1=o["r"], k1=o["k"]))
        for a in self.objects:
            for b in self.objects:
                if a is b:
                    continue
                rel = "above" if a.row < b.row else "below" if a.row > b.row else "beside"
                x, y = where(a), where(b)
                for tpl in PAIR_TEMPLATES:
                    out.append(
                        tpl.format(
                            n=n, rel=rel,
                            c1=x["c"], s1=x["s"], r1=x["r"], k1=x["k"],
                            c2=y["c"], s2=y["s"], r2=y["r"], k2=y["k"],
                        )
                    )
        return list(dict.fromkeys(out))

    def to_list(self) -> List[List[Any]]:
        return [[o.shape, o.color, o.cell] for o in self.objects]


def uint8_to_grid(img: np.ndarray) -> np.ndarray:
    """HxWx3 uint8 -> 3xHxW float32 in [0,1], read-only"""
    grid = np.ascontiguousarray((img.astype(np.float32) / 255.0).transpose(2, 0, 1))
    grid.flags.writeable = False
    return grid


def grid_to_uint8(grid: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(grid, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


# ---------------------------
# Dataset
# ---------------------------
@dataclass(frozen=True, eq=False)
class CaptionedImage:
    pair_id: int
    image: np.ndarray  # 3xHxW float32, values k/255
    captions: Tuple[TokenSequence, ...]
    scene: Optional[ShapeScene] = None

    def __post_init__(self):
        if len(self.captions) != CAPTIONS_PER_IMAGE:
            raise ConfigError(f"pair {self.pair_id} has {len(self.captions)} captions, expected {CAPTIONS_PER_IMAGE}")

    def tensor(self) -> torch.Tensor:
        return torch.tensor(np.array(self.image))

    def __eq__(self, other) -> bool:
        if not isinstance(other, CaptionedImage):
            return NotImplemented
        return (
            self.pair_id == other.pair_id
            and self.image.shape == other.image.shape
            and np.array_equal(self.image, other.image)
            and self.captions == other.captions
            and self.scene == other.scene
        )


@dataclass(frozen=True, eq=False)
class ShapeCaptionDataset:
    spec: DatasetSpec
    vocabulary: Vocabulary
    items: Tuple[CaptionedImage, ...]
    train_ids: Tuple[int, ...]
    test_ids: Tuple[int, ...]
    _by_id: Dict[int, CaptionedImage] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._by_id.update({it.pair_id: it for it in self.items})

    def __len__(self) -> int:
        return len(self.items)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ShapeCaptionDataset):
            return NotImplemented
        return (
            self.spec == other.spec
            and self.vocabulary == other.vocabulary
            and self.items == other.items
            and self.train_ids == other.train_ids
            and self.test_ids == other.test_ids
        )

    def get(self, pair_id: int) -> CaptionedImage:
        return self._by_id[pair_id]

    def split(self, name: str) -> List[CaptionedImage]:
        if name == "train":
            ids = self.train_ids
        elif name == "test":
            ids = self.test_ids
        elif name == "all":
            ids = tuple(it.pair_id for it in self.items)
        else:
            raise ConfigError(f"unknown split '{name}' (train|test|all)")
        return [self._by_id[i] for i in ids]


def _draw_scene(rng: np.random.Generator, image_size: Tuple[int, int]) -> ShapeScene:
    k = int(rng.choice(SCENE_SIZES, p=SCENE_SIZE_WEIGHTS))
    cells = sorted(int(c) for c in rng.choice(9, size=k, replace=False))
    objects = tuple(
        SceneObject(shape=SHAPES[int(rng.integers(len(SHAPES)))], color=COLORS[int(rng.integers(len(COLORS)))], cell=c)
        for c in cells
    )
    return ShapeScene(objects=objects, image_size=image_size)


def _pick_captions(pool: List[str], used: Set[str], claimed: Set[str], rng: np.random.Generator) -> Optional[List[str]]:
    """
    Five captions no earlier image was given, preferring ones no earlier scene satisfies.
    None when fewer than five unused captions remain.
    """
    free = [c for c in pool if c not in used]
    if len(free) < CAPTIONS_PER_IMAGE:
        return None
    fresh = [c for c in free if c not in claimed]
    rest = [c for c in free if c in claimed]
    if len(fresh) >= CAPTIONS_PER_IMAGE:
        chosen = [fresh[int(i)] for i in rng.choice(len(fresh), size=CAPTIONS_PER_IMAGE, replace=False)]
    else:
        extra = rng.choice(len(rest), size=CAPTIONS_PER_IMAGE - len(fresh), replace=False)
        chosen = fresh + [rest[int(i)] for i in extra]
    order = {c: i for i, c in enumerate(pool)}
    return sorted(chosen, key=order.__getitem__)


def generate_dataset(spec) -> ShapeCaptionDataset:
    """Pure function of spec: same seed, same scenes, captions and split. Caption texts never repeat across images."""
    if isinstance(spec, dict) and int(spec.get("num_images", 1)) < 1:
        raise EmptyInputError("num_images must be >= 1; an empty dataset is rejected")
    spec = coerce(DatasetSpec, spec)
    h, w = spec.image_size
    if h < MIN_SIDE or w < MIN_SIDE:
        raise ConfigError(f"image_size {h}x{w} is too small to render 3x3 cells (need >= {MIN_SIDE} px per side)")

    vocab = Vocabulary.from_grammar()
    rng = numpy_rng(spec.seed)

    items: List[CaptionedImage] = []
    seen = set()
    used: Set[str] = set()
    claimed: Set[str] = set()
    while len(items) < spec.num_images:
        scene = _draw_scene(rng, (h, w))
        key = tuple(tuple(o) for o in scene.to_list())
        if key in seen:
            continue
        seen.add(key)

        pool = scene.captions()
        chosen = _pick_captions(pool, used, claimed, rng)
        if chosen is None:
            continue
        used.update(chosen)
        claimed.update(pool)
        captions = tuple(vocab.tokenize(c) for c in chosen)
        items.append(CaptionedImage(pair_id=len(items), image=uint8_to_grid(scene.render()), captions=captions, scene=scene))

    n = len(items)
    n_test = int(round(n * spec.test_fraction))
    n_test = min(max(n_test, 1 if n > 1 else 0), max(n - 1, 0))
    perm = [int(i) for i in rng.permutation(n)]
    test_ids = tuple(sorted(perm[:n_test]))
    train_ids = tuple(sorted(perm[n_test:]))

    logger.info(f"[data] generated {n} images ({len(train_ids)} train / {len(test_ids)} test), seed={spec.seed}")
    return ShapeCaptionDataset(spec=spec, vocabulary=vocab, items=tuple(items), train_ids=train_ids, test_ids=test_ids)


# ---------------------------
# Persistence
# ---------------------------
def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _image_name(pair_id: int) -> str:
    return f"images/{pair_id:05d}.png"


def save_dataset(dataset: ShapeCaptionDataset, directory) -> Dict[str, Any]:
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)

    checksums: Dict[str, str] = {}
    for it in dataset.items:
        rel = _image_name(it.pair_id)
        Image.fromarray(grid_to_uint8(it.image)).save(root / rel, format="PNG")
        checksums[rel] = _sha256(root / rel)

    lines = ["pair_id\tcaption_index\ttext"]
    for it in dataset.items:
        for ci, cap in enumerate(it.captions):
            lines.append(f"{it.pair_id}\t{ci}\t{cap.text}")
    (root / "captions.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    checksums["captions.tsv"] = _sha256(root / "captions.tsv")

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "seed": dataset.spec.seed,
        "count": len(dataset.items),
        "spec": dataset.spec.model_dump(mode="json"),
        "vocabulary": dataset.vocabulary.to_dict(),
        "train_ids": list(dataset.train_ids),
        "test_ids": list(dataset.test_ids),
        "scenes": {str(it.pair_id): it.scene.to_list() for it in dataset.items if it.scene is not None},
        "checksums": checksums,
    }
    (root / "manifest.json").write_text(
        json.dumps(manifest, ensure_ascii=False, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    logger.info(f"[data] saved {len(dataset.items)} pairs -> {root}")
    return manifest


def load_dataset(directory) -> ShapeCaptionDataset:
    root = Path(directory)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise ManifestMissingError(manifest_path, f"dataset manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))

    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError("dataset manifest schema", version, SCHEMA_VERSION)

    for rel, expected in sorted(manifest["checksums"].items()):
        path = root / rel
        if not path.exists():
            raise MissingArtifactError(path)
        actual = _sha256(path)
        if actual != expected:
            raise ChecksumMismatchError(rel, expected, actual)

    spec = coerce(DatasetSpec, manifest["spec"])
    vocab = Vocabulary.from_dict(manifest["vocabulary"])

    captions: Dict[int, Dict[int, TokenSequence]] = {}
    rows = (root / "captions.tsv").read_text(encoding="utf-8").splitlines()[1:]
    for row in rows:
        pid, ci, text = row.split("\t")
        captions.setdefault(int(pid), {})[int(ci)] = vocab.tokenize(text)

    scenes = manifest.get("scenes", {})
    items = []
    for pid in sorted(captions):
        with Image.open(root / _image_name(pid)) as im:
            grid = uint8_to_grid(np.asarray(im.convert("RGB")))
        scene = None
        if str(pid) in scenes:
            scene = ShapeScene(
                objects=tuple(SceneObject(shape=s, color=c, cell=int(k)) for s, c, k in scenes[str(pid)]),
                image_size=spec.image_size,
            )
        caps = tuple(captions[pid][i] for i in sorted(captions[pid]))
        items.append(CaptionedImage(pair_id=pid, image=grid, captions=caps, scene=scene))

    return ShapeCaptionDataset(
        spec=spec,
        vocabulary=vocab,
        items=tuple(items),
        train_ids=tuple(manifest["train_ids"]),
        test_ids=tuple(manifest["test_ids"]),
    )
