"""Dataset ingestion, preprocessing, and the synthetic shapes dataset.

Images are stored as PNG and held in memory as float32 CHW arrays in
[-1, 1]. Caption embeddings live in EMB1 files (magic ``EMB1``, u32 count,
u32 dim, row-major little-endian float32 payload). The manifest is JSON
lines with keys ``image``, ``class``, ``bbox`` (optional ``[x, y, w, h]``)
and ``emb_index``.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigurationError, FormatError

EMB_MAGIC = b"EMB1"
EMBEDDING_DIM = 64
NOISE_STD = 0.05
SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (255, 0, 0),
    "green": (0, 200, 0),
    "blue": (40, 80, 255),
    "yellow": (255, 230, 0),
    "cyan": (0, 220, 220),
    "magenta": (230, 0, 230),
    "white": (255, 255, 255),
    "orange": (255, 140, 0),
}
COLOR_NAMES = tuple(COLORS)
NUM_CLASSES = len(SHAPES) * len(COLORS)
SUPERSAMPLE = 4


# -- pixel conversion --------------------------------------------------------


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Map a CHW image in [-1, 1] to HWC bytes with round((x + 1) * 127.5)."""
    x = np.clip(np.asarray(image, dtype=np.float64), -1.0, 1.0)
    return np.round((x + 1.0) * 127.5).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    return (np.asarray(pixels, dtype=np.float32).transpose(2, 0, 1) / 127.5 - 1.0).astype(
        np.float32
    )


def save_png(image: np.ndarray, path) -> None:
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def resize(image: np.ndarray, size: int) -> np.ndarray:
    """Resize a CHW image in [-1, 1] to ``size`` x ``size``.

    Integer downscales use exact block averaging; anything else goes through
    Pillow's bilinear filter per channel.
    """
    c, h, w = image.shape
    if h == size and w == size:
        return image
    if h == w and h % size == 0:
        f = h // size
        return image.reshape(c, size, f, size, f).mean(axis=(2, 4)).astype(np.float32)
    chans = [
        np.asarray(
            Image.fromarray(image[i].astype(np.float32), mode="F").resize(
                (size, size), Image.BILINEAR
            )
        )
        for i in range(c)
    ]
    return np.stack(chans).astype(np.float32)


# -- preprocessing -----------------------------------------------------------


def crop_box(image_hw, bbox, target_ratio: float = 0.75):
    """Square crop ``(x0, y0, side)`` that frames ``bbox`` at ``target_ratio``.

    Returns ``None`` when no square crop inside the image can contain the box
    (the caller then keeps the full image).
    """
    h, w = image_hw
    bx, by, bw, bh = bbox
    longer = max(bw, bh)
    # rounding the side down keeps longer/side >= target_ratio
    side = min(math.floor(longer / target_ratio + 1e-9), h, w)
    while side > longer and longer / side < target_ratio:
        side -= 1
    if side < longer:
        return None
    cx, cy = bx + bw / 2.0, by + bh / 2.0
    x0 = math.floor(cx - side / 2.0)
    y0 = math.floor(cy - side / 2.0)
    # keep the box inside the crop, then the crop inside the image
    x0 = max(min(x0, bx), bx + bw - side)
    y0 = max(min(y0, by), by + bh - side)
    x0 = min(max(x0, 0), w - side)
    y0 = min(max(y0, 0), h - side)
    return int(x0), int(y0), int(side)


def crop_to_ratio(image: np.ndarray, bbox, target_ratio: float = 0.75) -> np.ndarray:
    """Crop a CHW image so the bbox's longer side is at least ``target_ratio`` of the crop."""
    _, h, w = image.shape
    bx, by, bw, bh = bbox
    if bw > w or bh > h:
        return image
    box = crop_box((h, w), bbox, target_ratio)
    if box is None:
        return image
    x0, y0, side = box
    return image[:, y0 : y0 + side, x0 : x0 + side]


def class_disjoint_split(class_ids: Sequence[int], n_train: int, seed: int = 0):
    """Shuffle the distinct classes and partition them into (train, test) sets."""
    classes = sorted(set(int(c) for c in class_ids))
    if not 0 < n_train < len(classes):
        raise ConfigurationError(
            f"n_train must lie in [1, {len(classes) - 1}] for {len(classes)} classes, "
            f"got {n_train}"
        )
    order = np.random.default_rng(seed).permutation(len(classes))
    shuffled = [classes[i] for i in order]
    return sorted(shuffled[:n_train]), sorted(shuffled[n_train:])


# -- synthetic shapes ----------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    shape_class: str
    color: str
    size_fraction: float = 0.5
    position: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.shape_class not in SHAPES:
            raise ConfigurationError(f"unknown shape {self.shape_class!r}")
        if self.color not in COLORS:
            raise ConfigurationError(f"unknown color {self.color!r}")
        if not 0.3 <= self.size_fraction <= 0.9:
            raise ConfigurationError(f"size_fraction {self.size_fraction} outside [0.3, 0.9]")
        limit = min(0.2, 0.5 - self.size_fraction / 2.0)
        for offset in self.position:
            if abs(offset) > limit + 1e-12:
                raise ConfigurationError(
                    f"offset {offset} would push a {self.size_fraction} object off the canvas"
                )

    @property
    def label(self) -> int:
        return SHAPES.index(self.shape_class) * len(COLORS) + COLOR_NAMES.index(self.color)


def random_spec(rng: np.random.Generator, label: Optional[int] = None) -> SyntheticSpec:
    if label is None:
        label = int(rng.integers(NUM_CLASSES))
    shape = SHAPES[label // len(COLORS)]
    color = COLOR_NAMES[label % len(COLORS)]
    size = float(rng.uniform(0.3, 0.9))
    limit = min(0.2, 0.5 - size / 2.0)
    pos = tuple(float(v) for v in rng.uniform(-limit, limit, size=2))
    return SyntheticSpec(shape, color, size, pos)


def coverage_mask(spec: SyntheticSpec, size: int) -> np.ndarray:
    """Anti-aliased alpha in [0, 1] from a SUPERSAMPLE x SUPERSAMPLE grid per pixel."""
    n = size * SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / n - 0.5
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    cx, cy = spec.position
    half = spec.size_fraction / 2.0
    dx, dy = xx - cx, yy - cy
    if spec.shape_class == "circle":
        inside = dx * dx + dy * dy <= half * half
    elif spec.shape_class == "square":
        inside = (np.abs(dx) <= half) & (np.abs(dy) <= half)
    else:
        # apex at the top, base along the bottom edge of the bounding square
        t = (dy + half) / (2.0 * half)
        inside = (dy >= -half) & (dy <= half) & (np.abs(dx) <= half * t)
    return inside.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))


def attribute_embedding(spec: SyntheticSpec, rng=None, noise_std: float = NOISE_STD):
    emb = np.zeros(EMBEDDING_DIM, dtype=np.float32)
    emb[SHAPES.index(spec.shape_class)] = 1.0
    emb[len(SHAPES) + COLOR_NAMES.index(spec.color)] = 1.0
    k = len(SHAPES) + len(COLORS)
    emb[k] = spec.size_fraction
    emb[k + 1 : k + 3] = spec.position
    if rng is not None and noise_std > 0:
        emb += rng.normal(0.0, noise_std, size=EMBEDDING_DIM).astype(np.float32)
    return emb


def render_synthetic(spec: SyntheticSpec, size: int, rng: np.random.Generator):
    """Return ``(image, embedding, label)``; image is CHW float32 in [-1, 1] on black."""
    if size not in (16, 32, 64):
        raise ConfigurationError(f"synthetic size must be 16, 32 or 64, got {size}")
    alpha = coverage_mask(spec, size)
    rgb = np.asarray(COLORS[spec.color], dtype=np.float32) / 127.5 - 1.0
    image = -1.0 + alpha[None, :, :] * (rgb[:, None, None] + 1.0)
    return image.astype(np.float32), attribute_embedding(spec, rng), spec.label


def spec_bbox(spec: SyntheticSpec, size: int) -> list:
    half = spec.size_fraction / 2.0
    x0 = math.floor((spec.position[0] - half + 0.5) * size)
    y0 = math.floor((spec.position[1] - half + 0.5) * size)
    x1 = math.ceil((spec.position[0] + half + 0.5) * size)
    y1 = math.ceil((spec.position[1] + half + 0.5) * size)
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, size), min(y1, size)
    return [x0, y0, x1 - x0, y1 - y0]


# -- embeddings file -----------------------------------------------------------


def save_embeddings(path, table) -> None:
    table = np.asarray(table, dtype="<f4")
    if table.ndim != 2:
        raise ConfigurationError(f"embedding table must be 2-D, got shape {table.shape}")
    count, dim = table.shape
    with open(path, "wb") as f:
        f.write(EMB_MAGIC)
        f.write(struct.pack("<II", count, dim))
        f.write(np.ascontiguousarray(table).tobytes())


def load_embeddings(path) -> np.ndarray:
    """Read an EMB1 file into a (count, dim) float32 array."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != EMB_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {EMB_MAGIC!r}", offset=0)
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    count, dim = struct.unpack_from("<II", raw, 4)
    expected = 12 + 4 * count * dim
    if len(raw) < expected:
        raise FormatError(
            f"{path}: payload truncated, need {expected} bytes for {count}x{dim}, have {len(raw)}",
            offset=len(raw),
        )
    if len(raw) > expected:
        raise FormatError(f"{path}: {len(raw) - expected} trailing bytes", offset=expected)
    table = np.frombuffer(raw, dtype="<f4", count=count * dim, offset=12)
    return table.reshape(count, dim).astype(np.float32)


# -- manifest ----------------------------------------------------------------


@dataclass
class ManifestRecord:
    image: str
    class_id: int
    emb_index: int
    bbox: Optional[list] = None

    def to_json(self) -> str:
        obj = {"image": self.image, "class": self.class_id, "emb_index": self.emb_index}
        if self.bbox is not None:
            obj["bbox"] = list(self.bbox)
        return json.dumps(obj, sort_keys=True)


@dataclass
class DatasetManifest:
    records: list
    embedding_dim: int
    split: dict = field(default_factory=dict)  # class id -> "train" | "test"

    def classes(self) -> list:
        return sorted({r.class_id for r in self.records})

    def assign_split(self, n_train: int, seed: int = 0) -> None:
        train, test = class_disjoint_split(self.classes(), n_train, seed)
        self.split = {c: "train" for c in train}
        self.split.update({c: "test" for c in test})

    def indices(self, part: str) -> np.ndarray:
        if not self.split:
            return np.arange(len(self.records))
        return np.array(
            [i for i, r in enumerate(self.records) if self.split[r.class_id] == part], dtype=int
        )

    def validate(self, table_rows: int) -> None:
        for i, r in enumerate(self.records):
            if not 0 <= r.emb_index < table_rows:
                raise FormatError(
                    f"manifest record {i}: emb_index {r.emb_index} outside table of {table_rows}"
                )
        train = {c for c, s in self.split.items() if s == "train"}
        test = {c for c, s in self.split.items() if s == "test"}
        if train & test:
            raise ConfigurationError(f"classes in both splits: {sorted(train & test)}")


def write_manifest(path, records: Sequence[ManifestRecord]) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(r.to_json() + "\n")


def read_manifest(path, embedding_dim: int = 0) -> DatasetManifest:
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                records.append(
                    ManifestRecord(
                        image=obj["image"],
                        class_id=int(obj["class"]),
                        emb_index=int(obj["emb_index"]),
                        bbox=obj.get("bbox"),
                    )
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: bad manifest record ({exc})") from exc
    return DatasetManifest(records, embedding_dim)


# -- batching --------------------------------------------------------------------


def batch_iterator(n_or_items, batch_size: int = 64, seed: int = 0, epoch: int = 0) -> Iterator:
    """Yield shuffled batches for one epoch; the final partial batch is dropped.

    The order depends only on ``(seed, epoch)``. Pass an integer to get index
    arrays, or a sequence to get lists of its items.
    """
    if isinstance(n_or_items, (int, np.integer)):
        items, n = None, int(n_or_items)
    else:
        items, n = n_or_items, len(n_or_items)
    if n == 0:
        raise ConfigurationError("batch_iterator needs a non-empty dataset")
    order = np.random.default_rng([seed, epoch]).permutation(n)
    for start in range(0, n - batch_size + 1, batch_size):
        idx = order[start : start + batch_size]
        yield idx if items is None else [items[i] for i in idx]


# -- in-memory dataset -------------------------------------------------------------


@dataclass
class ImageTextDataset:
    """Images at two resolutions plus their embeddings and labels.

    ``images_hi`` holds the stage-2 (4x) resolution; ``images_lo`` the stage-1
    resolution derived from it by block averaging.
    """

    images_hi: np.ndarray
    images_lo: np.ndarray
    embeddings: np.ndarray
    labels: np.ndarray
    manifest: Optional[DatasetManifest] = None

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "ImageTextDataset":
        return ImageTextDataset(
            self.images_hi[idx], self.images_lo[idx], self.embeddings[idx], self.labels[idx]
        )


def synthesize(n: int, size: int, seed: int = 0, labels: Optional[Sequence[int]] = None):
    """Render ``n`` random specs; returns (images, embeddings, labels, specs).

    ``labels`` pins the class of each sample (cycled if shorter than n).
    """
    rng = np.random.default_rng(seed)
    images = np.empty((n, 3, size, size), dtype=np.float32)
    embs = np.empty((n, EMBEDDING_DIM), dtype=np.float32)
    out_labels = np.empty(n, dtype=np.int64)
    specs = []
    for i in range(n):
        label = None if labels is None else int(labels[i % len(labels)])
        spec = random_spec(rng, label)
        images[i], embs[i], out_labels[i] = render_synthetic(spec, size, rng)
        specs.append(spec)
    return images, embs, out_labels, specs


def synthetic_dataset(n: int, stage1_size: int, seed: int = 0) -> ImageTextDataset:
    hi, embs, labels, _ = synthesize(n, 4 * stage1_size, seed)
    lo = np.stack([resize(im, stage1_size) for im in hi]) if n else hi[:, :, :0, :0]
    return ImageTextDataset(hi, lo, embs, labels)


def write_synthetic(out_dir, n: int, stage1_size: int, seed: int = 0) -> Path:
    """Render a synthetic dataset to PNG + manifest.jsonl + embeddings.emb.

    Images are written at the stage-2 resolution (4 x stage1_size).
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    size = 4 * stage1_size
    hi, embs, labels, specs = synthesize(n, size, seed)
    records = []
    for i in range(n):
        rel = os.path.join("images", f"{i:05d}.png")
        save_png(hi[i], out / rel)
        records.append(ManifestRecord(rel, int(labels[i]), i, spec_bbox(specs[i], size)))
    write_manifest(out / "manifest.jsonl", records)
    save_embeddings(out / "embeddings.emb", embs)
    return out


def load_dataset(
    data_dir,
    stage1_size: int,
    n_train_classes: Optional[int] = None,
    split_seed: int = 0,
    crop_ratio: float = 0.0,
) -> ImageTextDataset:
    """Load a manifest directory; images are resized to 4*stage1_size and stage1_size.

    With ``crop_ratio`` > 0 and a bbox present, images are first cropped by
    :func:`crop_to_ratio`.
    """
    root = Path(data_dir)
    table = load_embeddings(root / "embeddings.emb")
    manifest = read_manifest(root / "manifest.jsonl", table.shape[1])
    if n_train_classes:
        manifest.assign_split(n_train_classes, split_seed)
    manifest.validate(len(table))
    hi_size = 4 * stage1_size
    n = len(manifest.records)
    hi = np.empty((n, 3, hi_size, hi_size), dtype=np.float32)
    for i, r in enumerate(manifest.records):
        image = load_png(root / r.image)
        if crop_ratio > 0 and r.bbox is not None:
            image = crop_to_ratio(image, r.bbox, crop_ratio)
        hi[i] = resize(image, hi_size)
    lo = np.stack([resize(im, stage1_size) for im in hi])
    embs = table[[r.emb_index for r in manifest.records]]
    labels = np.array([r.class_id for r in manifest.records], dtype=np.int64)
    return ImageTextDataset(hi, lo, embs, labels, manifest)
