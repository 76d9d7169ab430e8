"""Vocabulary, PPM images, synthetic scene corpora and batch collation.

A scene is a 4x4 grid of 8x8 cells on a 32x32 canvas; with the default
patch size of 8 every cell is exactly one patch. Captions come from a
closed template grammar, so the vocabulary is fixed and shared by every
corpus.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

PAD, CLS, SEP, MASK, UNK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]")

COLORS = {
    "red": (220, 40, 40),
    "green": (40, 200, 60),
    "blue": (50, 80, 230),
    "yellow": (230, 220, 40),
    "purple": (150, 60, 200),
    "white": (240, 240, 240),
}
SHAPES = ("square", "circle", "triangle")
COUNT_WORDS = ("one", "two", "three", "four")
RELATIONS = ("left of", "right of", "above", "below")

WORDS = (
    "a", "the", "there", "is", "are", "and", "of", "left", "right", "above", "below",
    "in", "both", "images", "have", "shape", "moving", "what", "color", "how", "many",
    "shapes",
) + COUNT_WORDS + tuple(COLORS) + SHAPES

GRID = 4
CELL = 8
CANVAS = GRID * CELL
BACKGROUND = (0, 0, 0)

TASKS = ("pretrain", "snli_ve", "nlvr2", "ref_res", "vqa")
SNLI_LABELS = ("entailment", "neutral", "contradiction")
VQA_ANSWERS = tuple(COLORS) + COUNT_WORDS


class PPMError(ValueError):
    pass


class ManifestError(ValueError):
    pass


# ---------------------------------------------------------------------------
# vocabulary and tokenizer


@dataclass
class Vocab:
    tokens: list[str]

    def __post_init__(self):
        if tuple(self.tokens[:5]) != SPECIAL_TOKENS:
            raise ValueError(f"vocab must start with {SPECIAL_TOKENS}")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocab tokens must be unique")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def default(cls) -> "Vocab":
        return cls(list(SPECIAL_TOKENS) + list(WORDS))

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())

    @property
    def content_ids(self) -> np.ndarray:
        return np.arange(len(SPECIAL_TOKENS), len(self.tokens))


def tokenize(text: str, vocab: Vocab) -> list[int]:
    return [vocab.index.get(w, UNK) for w in text.lower().split()]


def detokenize(ids: Iterable[int], vocab: Vocab) -> str:
    return " ".join(vocab.tokens[int(i)] for i in ids)


# ---------------------------------------------------------------------------
# PPM codec


def encode_ppm(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w, c = pixels.shape
    if c != 3:
        raise PPMError(f"P6 needs 3 channels, got {c}")
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def _ppm_tokens(raw: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < count:
        if i >= len(raw):
            raise PPMError("truncated header")
        ch = raw[i : i + 1]
        if ch == b"#":
            while i < len(raw) and raw[i : i + 1] != b"\n":
                i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(raw) and not raw[j : j + 1].isspace() and raw[j : j + 1] != b"#":
                j += 1
            tokens.append(raw[i:j])
            i = j
    # exactly one whitespace byte separates maxval from the payload
    if i >= len(raw) or not raw[i : i + 1].isspace():
        raise PPMError("missing whitespace after header")
    return tokens, i + 1


def read_ppm(data: bytes) -> np.ndarray:
    """Raw 8-bit RGB pixels, shape (H, W, 3)."""
    tokens, start = _ppm_tokens(data, 4)
    if tokens[0] != b"P6":
        raise PPMError(f"unsupported magic {tokens[0]!r}, expected b'P6'")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise PPMError(f"malformed header fields {tokens[1:]}") from None
    if maxval != 255:
        raise PPMError(f"only 8-bit PPM supported, maxval={maxval}")
    if w < 1 or h < 1:
        raise PPMError(f"bad geometry {w}x{h}")
    payload = data[start:]
    need = w * h * 3
    if len(payload) < need:
        raise PPMError(f"truncated payload: {len(payload)} of {need} bytes")
    return np.frombuffer(payload, dtype=np.uint8, count=need).reshape(h, w, 3)


def standardize(pixels: np.ndarray) -> np.ndarray:
    return ((pixels.astype(np.float32) / 255.0) - 0.5) / 0.5


def decode_image(path, geometry: tuple[int, int, int] | None = None) -> np.ndarray:
    """Decode a P6 file to standardized float32 (H, W, C) in [-1, 1]."""
    pixels = read_ppm(Path(path).read_bytes())
    if geometry is not None and pixels.shape != tuple(geometry):
        raise PPMError(f"{path}: geometry {pixels.shape} != expected {tuple(geometry)}")
    return standardize(pixels)


# ---------------------------------------------------------------------------
# scenes


@dataclass(frozen=True)
class SceneObject:
    row: int
    col: int
    shape: str
    color: str

    @property
    def patch(self) -> int:
        return self.row * GRID + self.col


@dataclass
class Scene:
    objects: list[SceneObject]

    def to_dict(self) -> dict:
        return {"objects": [[o.row, o.col, o.shape, o.color] for o in self.objects]}

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls([SceneObject(*o) for o in d["objects"]])

    def colors(self) -> set[str]:
        return {o.color for o in self.objects}


def _shape_mask(shape: str) -> np.ndarray:
    yy, xx = np.mgrid[0:CELL, 0:CELL]
    if shape == "square":
        return (yy >= 1) & (yy <= 6) & (xx >= 1) & (xx <= 6)
    if shape == "circle":
        return (yy - 3.5) ** 2 + (xx - 3.5) ** 2 <= 3.2 ** 2
    if shape == "triangle":
        return (yy >= 1) & (yy <= 6) & (np.abs(xx - 3.5) <= (yy - 0.5) / 2 + 0.01)
    raise ValueError(f"unknown shape {shape!r}")


_MASKS = {s: _shape_mask(s) for s in SHAPES}


def render(scene: Scene) -> np.ndarray:
    img = np.empty((CANVAS, CANVAS, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    for o in scene.objects:
        cell = img[o.row * CELL : (o.row + 1) * CELL, o.col * CELL : (o.col + 1) * CELL]
        cell[_MASKS[o.shape]] = COLORS[o.color]
    return img


def random_scene(rng: np.random.Generator, n_objects: int, distinct_colors: bool = False) -> Scene:
    cells = rng.choice(GRID * GRID, size=n_objects, replace=False)
    colors = list(COLORS)
    if distinct_colors:
        picked = [colors[i] for i in rng.choice(len(colors), size=n_objects, replace=False)]
    else:
        picked = [colors[i] for i in rng.integers(0, len(colors), size=n_objects)]
    objs = [
        SceneObject(int(c // GRID), int(c % GRID), SHAPES[int(rng.integers(len(SHAPES)))], picked[k])
        for k, c in enumerate(cells)
    ]
    return Scene(objs)


def relation(a: SceneObject, b: SceneObject) -> str:
    if a.col != b.col:
        return "left of" if a.col < b.col else "right of"
    return "above" if a.row < b.row else "below"


def describe_pair(rng: np.random.Generator, scene: Scene) -> str:
    objs = scene.objects
    if len(objs) >= 2 and rng.random() < 0.85:
        i, j = rng.choice(len(objs), size=2, replace=False)
        a, b = objs[i], objs[j]
        if rng.random() < 0.25:
            return f"a {a.color} {a.shape} and a {b.color} {b.shape}"
        return f"a {a.color} {a.shape} {relation(a, b)} a {b.color} {b.shape}"
    o = objs[int(rng.integers(len(objs)))]
    return f"a {o.color} {o.shape}"


# ---------------------------------------------------------------------------
# corpus generation


def _pretrain_example(rng, i):
    scene = random_scene(rng, int(rng.integers(2, 4)))
    return {"scene": scene, "caption": describe_pair(rng, scene)}


def _snli_example(rng, label: int):
    scene = random_scene(rng, int(rng.integers(1, 4)))
    o = scene.objects[int(rng.integers(len(scene.objects)))]
    if SNLI_LABELS[label] == "entailment":
        caption = f"there is a {o.color} {o.shape}"
    elif SNLI_LABELS[label] == "neutral":
        caption = f"the {o.color} {o.shape} is moving"
    else:
        absent = [c for c in COLORS if c not in scene.colors()]
        caption = f"there is a {absent[int(rng.integers(len(absent)))]} {o.shape}"
    return {"scene": scene, "caption": caption, "label": label}


def _scene_with_color(rng, color: str, want: bool) -> Scene:
    while True:
        scene = random_scene(rng, int(rng.integers(1, 4)))
        if (color in scene.colors()) == want:
            return scene


def _nlvr2_example(rng, label: int):
    color = list(COLORS)[int(rng.integers(len(COLORS)))]
    if label:
        pa, pb = True, True
    else:
        pa, pb = [(True, False), (False, True), (False, False)][int(rng.integers(3))]
    return {
        "scene": _scene_with_color(rng, color, pa),
        "scene2": _scene_with_color(rng, color, pb),
        "caption": f"both images have a {color} shape",
        "label": label,
    }


def _ref_res_example(rng, k: int = 4):
    scene = random_scene(rng, k, distinct_colors=True)
    target = int(rng.integers(k))
    o = scene.objects[target]
    return {
        "scene": scene,
        "caption": f"the {o.color} {o.shape}",
        "regions": [[obj.patch] for obj in scene.objects],
        "label": target,
    }


def _vqa_example(rng):
    if rng.random() < 0.5:
        n = int(rng.integers(1, 5))
        scene = random_scene(rng, n)
        return {"scene": scene, "caption": "how many shapes are there", "answer": COUNT_WORDS[n - 1]}
    while True:
        scene = random_scene(rng, int(rng.integers(1, 4)))
        shapes = [o.shape for o in scene.objects]
        unique = [o for o in scene.objects if shapes.count(o.shape) == 1]
        if unique:
            o = unique[int(rng.integers(len(unique)))]
            return {"scene": scene, "caption": f"what color is the {o.shape}", "answer": o.color}


def _balanced_labels(rng, n: int, classes: int) -> np.ndarray:
    return rng.permutation(np.arange(n) % classes)


def generate_examples(task: str, seed: int, counts: dict[str, int]) -> list[dict[str, Any]]:
    """In-memory corpus records (scenes not yet rendered), deterministic in ``seed``."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    for split, n in counts.items():
        if n < 1:
            raise ValueError(f"count for split {split!r} must be >= 1, got {n}")
    rng = np.random.default_rng([seed, TASKS.index(task)])
    out = []
    for split, n in counts.items():
        if task == "snli_ve":
            labels = _balanced_labels(rng, n, 3)
        elif task == "nlvr2":
            labels = _balanced_labels(rng, n, 2)
        for i in range(n):
            if task == "pretrain":
                ex = _pretrain_example(rng, i)
            elif task == "snli_ve":
                ex = _snli_example(rng, int(labels[i]))
            elif task == "nlvr2":
                ex = _nlvr2_example(rng, int(labels[i]))
            elif task == "ref_res":
                ex = _ref_res_example(rng)
            else:
                ex = _vqa_example(rng)
            ex["id"] = f"{task}-{split}-{i:06d}"
            ex["split"] = split
            out.append(ex)
    return out


def gen_synthetic(out_dir, seed: int, counts: dict[str, int], task: str = "pretrain") -> Path:
    """Render a corpus: ``manifest.jsonl``, ``vocab.txt`` and ``images/*.ppm``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for ex in generate_examples(task, seed, counts):
        rec: dict[str, Any] = {"id": ex["id"], "split": ex["split"], "caption": ex["caption"]}
        rec["image"] = f"images/{ex['id']}.ppm"
        (out_dir / rec["image"]).write_bytes(encode_ppm(render(ex["scene"])))
        rec["scene"] = ex["scene"].to_dict()
        if "scene2" in ex:
            rec["image2"] = f"images/{ex['id']}-b.ppm"
            (out_dir / rec["image2"]).write_bytes(encode_ppm(render(ex["scene2"])))
            rec["scene2"] = ex["scene2"].to_dict()
        for key in ("label", "regions", "answer"):
            if key in ex:
                rec[key] = ex[key]
        records.append(rec)
    with open(out_dir / "manifest.jsonl", "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    Vocab.default().save(out_dir / "vocab.txt")
    (out_dir / "corpus.json").write_text(
        json.dumps({"task": task, "seed": seed, "counts": counts}, sort_keys=True) + "\n", encoding="utf-8"
    )
    return out_dir


def corpus_digest(root) -> str:
    """SHA-256 over every file's relative path and bytes, in sorted order."""
    root = Path(root)
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(path.relative_to(root).as_posix().encode("utf-8") + b"\0")
        h.update(path.read_bytes())
    return h.hexdigest()


def read_manifest(path) -> list[dict[str, Any]]:
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}:{lineno}: {e}") from None
            for key in ("id", "image", "caption", "split"):
                if key not in rec:
                    raise ManifestError(f"{path}:{lineno}: missing field {key!r}")
            records.append(rec)
    return records


@dataclass
class Corpus:
    """A decoded corpus: records plus standardized images held in memory."""

    root: Path
    records: list[dict[str, Any]]
    vocab: Vocab
    images: np.ndarray
    images2: np.ndarray | None
    task: str = "pretrain"

    @classmethod
    def load(cls, root, geometry=(CANVAS, CANVAS, 3)) -> "Corpus":
        root = Path(root)
        records = read_manifest(root / "manifest.jsonl")
        meta_path = root / "corpus.json"
        task = json.loads(meta_path.read_text())["task"] if meta_path.exists() else "pretrain"
        splits: dict[str, set[str]] = {}
        for r in records:
            splits.setdefault(r["split"], set()).add(r["id"])
        ids = [r["id"] for r in records]
        if len(set(ids)) != len(ids):
            raise ManifestError(f"{root}: duplicate record ids")
        images = np.stack([decode_image(root / r["image"], geometry) for r in records])
        images2 = None
        if any("image2" in r for r in records):
            images2 = np.stack([decode_image(root / r["image2"], geometry) for r in records])
        return cls(root, records, Vocab.load(root / "vocab.txt"), images, images2, task)

    def split(self, name: str) -> np.ndarray:
        idx = np.array([i for i, r in enumerate(self.records) if r["split"] == name], dtype=np.int64)
        if idx.size == 0:
            raise ManifestError(f"{self.root}: no records in split {name!r}")
        return idx


# ---------------------------------------------------------------------------
# collation


@dataclass
class Batch:
    text_ids: np.ndarray  # (B, T) int64
    text_mask: np.ndarray  # (B, T) bool, True = real token
    images: np.ndarray  # (B, H, W, C)
    images2: np.ndarray | None = None
    labels: np.ndarray | None = None
    mlm_labels: np.ndarray | None = None
    itm_labels: np.ndarray | None = None
    regions: list[list[list[int]]] | None = None
    ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.text_ids.shape[0]


def encode_text(captions: Sequence[str], vocab: Vocab, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """[CLS] tokens [SEP], truncated to ``max_len`` (keeping [SEP]) and padded to the batch max."""
    if max_len < 2:
        raise ValueError("max_len must leave room for [CLS] and [SEP]")
    rows = []
    for cap in captions:
        ids = tokenize(cap, vocab)[: max_len - 2]
        rows.append([CLS] + ids + [SEP])
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), PAD, dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
        mask[i, : len(r)] = True
    return ids, mask


def collate(examples: Sequence[dict[str, Any]], vocab: Vocab, max_len: int) -> Batch:
    """Examples carry ``caption`` and ``image`` (decoded array) plus optional
    ``image2``, ``label``, ``regions`` and ``id``."""
    ids, mask = encode_text([e["caption"] for e in examples], vocab, max_len)
    images = np.stack([e["image"] for e in examples])
    images2 = np.stack([e["image2"] for e in examples]) if "image2" in examples[0] else None
    labels = np.array([e["label"] for e in examples], dtype=np.int64) if "label" in examples[0] else None
    regions = [e["regions"] for e in examples] if "regions" in examples[0] else None
    return Batch(ids, mask, images, images2, labels, regions=regions, ids=[e.get("id", "") for e in examples])


def corpus_batch(corpus: Corpus, indices: Sequence[int], max_len: int, label_fn=None) -> Batch:
    """Collate records of ``corpus`` at ``indices``; ``label_fn(record)`` overrides labels."""
    exs = []
    for i in indices:
        r = corpus.records[int(i)]
        ex = {"caption": r["caption"], "image": corpus.images[int(i)], "id": r["id"]}
        if corpus.images2 is not None:
            ex["image2"] = corpus.images2[int(i)]
        if label_fn is not None:
            ex["label"] = label_fn(r)
        elif "label" in r:
            ex["label"] = r["label"]
        if "regions" in r:
            ex["regions"] = r["regions"]
        exs.append(ex)
    return collate(exs, corpus.vocab, max_len)
