"""Datasets, episode sampling and the synthetic glyph benchmark."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .imaging import resize_bilinear

SPLITS = ("train", "val", "test")


class DatasetError(Exception):
    pass


@dataclass
class Dataset:
    """Class-partitioned image collection.

    ``items`` maps a class name to image ids; ``splits`` maps each split to
    its class names. Pixels come from ``images`` (in memory) or are produced
    on first access by ``loader``.
    """

    items: dict[str, list[str]]
    splits: dict[str, list[str]]
    images: dict[str, np.ndarray] = field(default_factory=dict)
    loader: Optional[Callable[[str], np.ndarray]] = None
    metadata: dict[str, list[dict]] = field(default_factory=dict)

    def __post_init__(self):
        seen: dict[str, str] = {}
        for split, classes in self.splits.items():
            for c in classes:
                if c in seen:
                    raise DatasetError(f"class {c!r} is in both {seen[c]!r} and {split!r}")
                if c not in self.items:
                    raise DatasetError(f"split {split!r} lists unknown class {c!r}")
                seen[c] = split

    def __len__(self) -> int:
        return sum(len(v) for v in self.items.values())

    def image(self, image_id: str) -> np.ndarray:
        if image_id not in self.images:
            if self.loader is None:
                raise DatasetError(f"no pixels for {image_id!r}")
            self.images[image_id] = self.loader(image_id)
        return self.images[image_id]

    def all_ids(self) -> list[str]:
        return [i for c in sorted(self.items) for i in self.items[c]]

    def label_of(self, image_id: str) -> str:
        for c, ids in self.items.items():
            if image_id in ids:
                return c
        raise KeyError(image_id)


@dataclass(frozen=True)
class Episode:
    classes: tuple[str, ...]
    support: tuple[str, ...]
    support_labels: tuple[int, ...]
    query: tuple[str, ...]
    query_labels: tuple[int, ...]

    @property
    def way(self) -> int:
        return len(self.classes)


def sample_episode(dataset: Dataset, split: str, way: int, shot: int, queries: int, rng: np.random.Generator) -> Episode:
    """N classes without replacement; per class K+M images without replacement, first K support."""
    classes = dataset.splits.get(split, [])
    need = shot + queries
    eligible = [c for c in classes if len(dataset.items[c]) >= need]
    if len(classes) < way:
        raise ValueError(f"split {split!r} has {len(classes)} classes, episode needs {way}")
    if len(eligible) < len(classes):
        short = [c for c in classes if c not in eligible]
        raise ValueError(f"classes {short[:5]} have fewer than {need} images (shot {shot} + queries {queries})")
    chosen = rng.choice(len(classes), size=way, replace=False)
    support, s_lab, query, q_lab = [], [], [], []
    names = []
    for label, ci in enumerate(chosen):
        name = classes[int(ci)]
        names.append(name)
        ids = dataset.items[name]
        picks = rng.choice(len(ids), size=need, replace=False)
        for n, p in enumerate(picks):
            if n < shot:
                support.append(ids[int(p)])
                s_lab.append(label)
            else:
                query.append(ids[int(p)])
                q_lab.append(label)
    return Episode(tuple(names), tuple(support), tuple(s_lab), tuple(query), tuple(q_lab))


def split_classes(names: list[str], rng: np.random.Generator, fractions=(0.6, 0.2, 0.2)) -> dict[str, list[str]]:
    order = [names[i] for i in rng.permutation(len(names))]
    n_train = int(round(fractions[0] * len(names)))
    n_val = int(round(fractions[1] * len(names)))
    return {
        "train": sorted(order[:n_train]),
        "val": sorted(order[n_train:n_train + n_val]),
        "test": sorted(order[n_train + n_val:]),
    }


# ---------------------------------------------------------------- synthetic glyphs

SHAPES = ("disk", "ring", "square", "diamond", "triangle", "cross", "bar")
COLORS = {
    "red": (0.9, 0.15, 0.1),
    "green": (0.15, 0.8, 0.2),
    "blue": (0.15, 0.3, 0.95),
    "yellow": (0.95, 0.9, 0.15),
    "magenta": (0.9, 0.2, 0.85),
    "cyan": (0.15, 0.85, 0.9),
    "orange": (1.0, 0.55, 0.05),
    "white": (0.97, 0.97, 0.97),
}


def _shape_mask(shape: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    if shape == "disk":
        return u * u + v * v <= 1.0
    if shape == "ring":
        r = np.sqrt(u * u + v * v)
        return (r <= 1.0) & (r >= 0.55)
    if shape == "square":
        return (np.abs(u) <= 0.8) & (np.abs(v) <= 0.8)
    if shape == "diamond":
        return np.abs(u) + np.abs(v) <= 1.0
    if shape == "triangle":
        return (v >= -0.5) & (np.sqrt(3.0) * np.abs(u) + v <= 1.0)
    if shape == "cross":
        return ((np.abs(u) <= 0.3) & (np.abs(v) <= 1.0)) | ((np.abs(v) <= 0.3) & (np.abs(u) <= 1.0))
    if shape == "bar":
        return (np.abs(u) <= 1.0) & (np.abs(v) <= 0.35)
    raise ValueError(shape)


def _class_glyphs(rng: np.random.Generator, n_classes: int) -> list[tuple[tuple[str, str], ...]]:
    vocab = list(itertools.product(SHAPES, COLORS))
    seen = set()
    out = []
    while len(out) < n_classes:
        k = int(rng.integers(2, 4))
        pick = tuple(sorted(vocab[int(i)] for i in rng.choice(len(vocab), size=k, replace=False)))
        if pick in seen:
            continue
        seen.add(pick)
        out.append(pick)
    return out


def render_glyph_image(rng: np.random.Generator, glyphs, size: int) -> tuple[np.ndarray, list[dict]]:
    """One cluttered image containing each glyph once; returns uint8 pixels and placements."""
    ss = 2  # supersampling factor
    S = size * ss
    tint = rng.uniform(0.15, 0.45) + rng.uniform(-0.06, 0.06, size=3)
    canvas = np.broadcast_to(tint, (S, S, 3)).copy()
    yy, xx = np.mgrid[0:S, 0:S] + 0.5
    for _ in range(3):  # low-contrast clutter strokes
        cx, cy = rng.uniform(0, S, size=2)
        ang = rng.uniform(0, np.pi)
        width = rng.uniform(0.5, 1.5) * ss
        dist = np.abs((xx - cx) * np.sin(ang) - (yy - cy) * np.cos(ang))
        canvas[dist <= width] += rng.uniform(-0.12, 0.12, size=3)

    placed: list[dict] = []
    for shape, color in glyphs:
        for _attempt in range(50):
            r = rng.uniform(0.13, 0.2) * size
            cx, cy = rng.uniform(r, size - r, size=2)
            if all(np.hypot(cx - p["cx"], cy - p["cy"]) >= 0.8 * (r + p["r"]) for p in placed):
                break
        angle = float(rng.uniform(0, 2 * np.pi))
        dx, dy = (xx / ss - cx) / r, (yy / ss - cy) / r
        u = dx * np.cos(angle) + dy * np.sin(angle)
        v = -dx * np.sin(angle) + dy * np.cos(angle)
        mask = _shape_mask(shape, u, v)
        canvas[mask] = COLORS[color]
        placed.append(dict(shape=shape, color=color, cx=float(cx), cy=float(cy), r=float(r), angle=angle))
    canvas += rng.normal(0, 0.03, size=canvas.shape)
    img = canvas.reshape(size, ss, size, ss, 3).mean(axis=(1, 3))
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8), placed


def gen_synthetic_dataset(seed: int = 0, n_classes: int = 30, images_per_class: int = 20, image_size: int = 32) -> Dataset:
    """Classes are distinct sets of 2-3 coloured glyphs; images vary placement, scale, rotation and clutter."""
    if n_classes < 10:
        raise ValueError("n_classes must be >= 10 for disjoint splits")
    rng = np.random.default_rng(seed)
    glyph_sets = _class_glyphs(rng, n_classes)
    items, images, metadata = {}, {}, {}
    for ci, glyphs in enumerate(glyph_sets):
        name = f"class{ci:03d}"
        ids = []
        for k in range(images_per_class):
            image_id = f"{name}/{k:03d}.png"
            pixels, placed = render_glyph_image(rng, glyphs, image_size)
            images[image_id] = pixels.astype(np.float64) / 255.0
            metadata[image_id] = placed
            ids.append(image_id)
        items[name] = ids
    splits = split_classes(sorted(items), rng)
    return Dataset(items, splits, images=images, metadata=metadata)


def write_image_dataset(dataset: Dataset, root: str | Path) -> Path:
    """Write PNGs under ``root/<class>/`` plus ``manifest.tsv``; returns the manifest path."""
    from PIL import Image

    root = Path(root)
    for image_id in dataset.all_ids():
        path = root / image_id
        path.parent.mkdir(parents=True, exist_ok=True)
        pixels = np.clip(np.round(dataset.image(image_id) * 255), 0, 255).astype(np.uint8)
        Image.fromarray(pixels).save(path, format="PNG")
    manifest = root / "manifest.tsv"
    lines = [f"{c}\t{split}" for split in SPLITS for c in dataset.splits.get(split, [])]
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".ppm"}


def read_manifest(path: str | Path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or parts[1] not in SPLITS:
            raise DatasetError(f"{path}:{lineno}: expected 'class<TAB>train|val|test'")
        out[parts[0]] = parts[1]
    return out


def load_image_dataset(root: str | Path, manifest: str | Path | None = None, image_size: int = 32) -> Dataset:
    """Class-subdirectory dataset; every class directory must appear in the manifest."""
    from PIL import Image, UnidentifiedImageError

    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a readable directory")
    manifest = Path(manifest) if manifest else root / "manifest.tsv"
    if not manifest.is_file():
        raise DatasetError(f"split manifest {manifest} not found")
    assignment = read_manifest(manifest)
    items: dict[str, list[str]] = {}
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        if d.name not in assignment:
            raise DatasetError(f"class directory {d.name!r} has no manifest entry")
        items[d.name] = [f"{d.name}/{f.name}" for f in sorted(d.iterdir()) if f.suffix.lower() in IMAGE_SUFFIXES]
    missing = sorted(set(assignment) - set(items))
    if missing:
        raise DatasetError(f"manifest lists classes without a directory: {missing[:5]}")
    splits = {s: sorted(c for c, v in assignment.items() if v == s) for s in SPLITS}

    def loader(image_id: str) -> np.ndarray:
        path = root / image_id
        try:
            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        except (OSError, UnidentifiedImageError) as exc:
            raise DatasetError(f"cannot read image {path}: {exc}") from exc
        return resize_bilinear(arr, image_size, image_size)

    return Dataset(items, splits, loader=loader)
