"""Manifests, PK batch sampling and the synthetic pedestrian generator.

Manifest format: JSON lines, one record per image::

    {"id": 12, "split": "train", "image": "imgs/0012_0.png", "captions": ["...", "..."]}
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

from .encoders import Vocab, tokenize

SPLIT_ORDER = ("train", "val", "test")
REQUIRED_FIELDS = {"id": int, "split": str, "image": str, "captions": list}


class ManifestError(ValueError):
    pass


@dataclass
class Record:
    id: int
    split: str
    image: str
    captions: list[str]
    orig_id: int | None = None

    def to_json(self) -> dict:
        return {"id": self.id if self.orig_id is None else self.orig_id, "split": self.split,
                "image": self.image, "captions": list(self.captions)}


@dataclass
class DatasetManifest:
    records: list[Record]
    root: Path = field(default_factory=Path)

    def split(self, name: str) -> list[Record]:
        return [r for r in self.records if r.split == name]

    def identities(self, split: str | None = None) -> list[int]:
        return sorted({r.id for r in self.records if split is None or r.split == split})

    def counts(self) -> dict[str, dict[str, int]]:
        out = {}
        for name in sorted({r.split for r in self.records}):
            recs = self.split(name)
            out[name] = {
                "identities": len({r.id for r in recs}),
                "images": len(recs),
                "captions": sum(len(r.captions) for r in recs),
            }
        return out


def _split_rank(name: str) -> tuple[int, str]:
    return (SPLIT_ORDER.index(name) if name in SPLIT_ORDER else len(SPLIT_ORDER), name)


def load_manifest(path: str | Path, root: str | Path | None = None, check_images: bool = False) -> DatasetManifest:
    """Parse and validate a JSONL manifest; identities are re-indexed densely from 0,
    train identities first so they double as classifier labels."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from None
    root = Path(root) if root else path.parent
    records = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        where = f"{path}:{lineno}"
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ManifestError(f"{where}: invalid JSON ({e.msg})") from None
        if not isinstance(obj, dict):
            raise ManifestError(f"{where}: expected a JSON object")
        for name, typ in REQUIRED_FIELDS.items():
            if name not in obj:
                raise ManifestError(f"{where}: missing field {name!r}")
            if not isinstance(obj[name], typ) or (typ is int and isinstance(obj[name], bool)):
                raise ManifestError(f"{where}: field {name!r} must be {typ.__name__}")
        extra = set(obj) - set(REQUIRED_FIELDS)
        if extra:
            raise ManifestError(f"{where}: unknown fields {sorted(extra)}")
        if obj["id"] < 0:
            raise ManifestError(f"{where}: identity must be non-negative")
        caps = obj["captions"]
        if not caps or not all(isinstance(c, str) and c.strip() for c in caps):
            raise ManifestError(f"{where}: captions must be a non-empty list of non-empty strings")
        if check_images and not (root / obj["image"]).is_file():
            raise ManifestError(f"{where}: image not found: {root / obj['image']}")
        records.append(Record(obj["id"], obj["split"], obj["image"], list(caps), orig_id=obj["id"]))

    owner: dict[int, str] = {}
    for r in records:
        prev = owner.setdefault(r.orig_id, r.split)
        if prev != r.split:
            raise ManifestError(f"{path}: identity {r.orig_id} appears in splits {prev!r} and {r.split!r}")
    order = sorted(owner, key=lambda i: (_split_rank(owner[i]), i))
    dense = {orig: new for new, orig in enumerate(order)}
    for r in records:
        r.id = dense[r.orig_id]
    return DatasetManifest(records, root)


def write_manifest(records: Iterable[Record], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r.to_json(), ensure_ascii=False) + "\n")


def load_image(path: str | Path, size: int) -> np.ndarray:
    """8-bit RGB file -> (size, size, 3) float32 in [0, 1], bilinear resize."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32)
    except OSError as e:
        raise ManifestError(f"unreadable image {path}: {e}") from None
    return arr / 255.0


class RetrievalSplit:
    """One split as aligned arrays: images, captions, their labels and image owners."""

    def __init__(self, manifest: DatasetManifest, split: str, vocab: Vocab, image_size: int, max_len: int):
        self.records = manifest.split(split)
        if not self.records:
            raise ManifestError(f"split {split!r} is empty")
        self.split = split
        self.image_paths = [str(manifest.root / r.image) for r in self.records]
        self.image_labels = np.array([r.id for r in self.records], dtype=np.int64)
        caps, owners = [], []
        for i, r in enumerate(self.records):
            for c in r.captions:
                caps.append(c)
                owners.append(i)
        self.captions = caps
        self.caption_image = np.array(owners, dtype=np.int64)
        self.caption_labels = self.image_labels[self.caption_image]
        self.tokens = np.array(
            [tokenize(c, vocab, max_len).token_ids for c in caps], dtype=np.int64
        )
        self.image_size = image_size
        self._images: np.ndarray | None = None

    @property
    def images(self) -> np.ndarray:
        if self._images is None:
            self._images = np.stack([load_image(p, self.image_size) for p in self.image_paths])
        return self._images

    def __len__(self) -> int:
        return len(self.captions)


@dataclass
class PkBatch:
    caption_idx: np.ndarray
    image_idx: np.ndarray
    labels: np.ndarray


def pk_sample(caption_labels: np.ndarray, P: int, K: int, rng: np.random.Generator,
              caption_image: np.ndarray | None = None) -> PkBatch:
    """Draw P identities, then K distinct (image, caption) pairs from each."""
    caption_labels = np.asarray(caption_labels)
    ids, counts = np.unique(caption_labels, return_counts=True)
    eligible = ids[counts >= K]
    if len(eligible) < P:
        raise ValueError(f"PK sampling needs {P} identities with >= {K} pairs, found {len(eligible)}")
    chosen = rng.choice(eligible, size=P, replace=False)
    picks = []
    for ident in chosen:
        pool = np.flatnonzero(caption_labels == ident)
        picks.append(rng.choice(pool, size=K, replace=False))
    cap = np.concatenate(picks)
    img = caption_image[cap] if caption_image is not None else cap
    return PkBatch(cap, img, caption_labels[cap])


# ---------------------------------------------------------------- synthetic data

SHIRT_COLORS = {
    "red": (200, 30, 30),
    "orange": (240, 140, 20),
    "yellow": (235, 220, 40),
    "green": (40, 160, 60),
    "purple": (130, 50, 160),
    "white": (245, 245, 245),
}
PANTS_COLORS = {
    "blue": (30, 60, 200),
    "black": (20, 20, 20),
    "gray": (120, 120, 120),
    "brown": (110, 70, 30),
    "khaki": (190, 170, 120),
}
SKIN = (225, 185, 150)
HAT = (60, 30, 90)
BAG = (90, 55, 20)

TEMPLATES = (
    "a person wearing a {shirt} shirt and {pants} pants{hat1}{bag1}",
    "the pedestrian has a {shirt} top and {pants} trousers{hat2}{bag2}",
    "{shirt} shirt , {pants} pants{hat3}{bag3}",
    "someone in {pants} trousers and a {shirt} top{bag1}{hat1}",
)
HAT_PHRASES = {"hat1": " with a hat", "hat2": " and a hat on the head", "hat3": " , hat"}
BAG_PHRASES = {"bag1": " , carrying a bag", "bag2": " and holds a bag", "bag3": " , bag"}


@dataclass
class SyntheticSpec:
    identities: int = 16
    images_per_id: int = 4
    test_identities: int = 0  # the last ones go to the test split
    image_size: int = 32
    captions_per_image: int = 2
    seed: int = 0

    def validate(self) -> None:
        if self.identities < 1 or self.images_per_id < 1:
            raise ValueError("identities and images_per_id must be >= 1")
        if not 0 <= self.test_identities < self.identities:
            raise ValueError("test_identities must be in [0, identities)")
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")
        if not 1 <= self.captions_per_image <= len(TEMPLATES):
            raise ValueError(f"captions_per_image must be in [1, {len(TEMPLATES)}]")
        if self.identities > len(attribute_space()):
            raise ValueError(f"at most {len(attribute_space())} distinct identities available")


def attribute_space() -> list[tuple[str, str, bool, bool]]:
    return list(itertools.product(SHIRT_COLORS, PANTS_COLORS, (False, True), (False, True)))


def caption_for(attrs: tuple[str, str, bool, bool], template: int) -> str:
    shirt, pants, hat, bag = attrs
    fill = {"shirt": shirt, "pants": pants}
    for k, v in HAT_PHRASES.items():
        fill[k] = v if hat else ""
    for k, v in BAG_PHRASES.items():
        fill[k] = v if bag else ""
    return TEMPLATES[template].format(**fill)


def render_person(attrs, size: int, rng: np.random.Generator) -> np.ndarray:
    """Blocky pedestrian: head, optional hat, shirt, pants, optional bag; jittered."""
    shirt, pants, hat, bag = attrs
    bg = rng.integers(150, 215)
    img = np.clip(bg + rng.normal(0, 6, size=(size, size, 3)), 0, 255)
    u = size / 32.0
    dx = int(rng.integers(-2, 3) * u)
    dy = int(rng.integers(-1, 2) * u)
    cx = size // 2 + dx

    def box(r0, r1, c0, c1, color):
        r0, r1 = int(round(r0 * u)) + dy, int(round(r1 * u)) + dy
        c0, c1 = cx + int(round(c0 * u)), cx + int(round(c1 * u))
        img[max(r0, 0):max(r1, 0), max(c0, 0):max(c1, 0)] = color

    box(3, 9, -3, 3, SKIN)
    if hat:
        box(1, 4, -4, 4, HAT)
    box(9, 19, -6, 6, SHIRT_COLORS[shirt])
    box(19, 30, -5, 5, PANTS_COLORS[pants])
    if bag:
        box(13, 21, 6, 10, BAG)
    return img.astype(np.uint8)


def generate_synthetic(spec: SyntheticSpec, out_dir: str | Path, overwrite: bool = False) -> DatasetManifest:
    """Write PNGs plus ``manifest.jsonl`` under ``out_dir`` and return the loaded manifest."""
    spec.validate()
    out = Path(out_dir)
    manifest_path = out / "manifest.jsonl"
    img_dir = out / "images"
    if not overwrite and (manifest_path.exists() or img_dir.exists()):
        raise FileExistsError(f"{out} already holds a dataset (pass overwrite=True to replace it)")
    img_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    space = attribute_space()
    chosen = rng.choice(len(space), size=spec.identities, replace=False)
    n_train = spec.identities - spec.test_identities
    records = []
    for ident, a in enumerate(chosen):
        attrs = space[int(a)]
        split = "train" if ident < n_train else "test"
        for k in range(spec.images_per_id):
            pixels = render_person(attrs, spec.image_size, rng)
            rel = f"images/{ident:04d}_{k}.png"
            Image.fromarray(pixels, "RGB").save(out / rel, format="PNG")
            templates = rng.choice(len(TEMPLATES), size=spec.captions_per_image, replace=False)
            caps = [caption_for(attrs, int(t)) for t in templates]
            records.append(Record(ident, split, rel, caps))
    write_manifest(records, manifest_path)
    return load_manifest(manifest_path)


def build_vocab(manifest: DatasetManifest, split: str = "train") -> Vocab:
    return Vocab.build(c for r in manifest.split(split) for c in r.captions)
