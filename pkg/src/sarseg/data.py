"""Manifest loading, tiling, PNG I/O and a seeded synthetic speckled-scene generator."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

SPLITS = ("train", "test")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class SampleRecord:
    image_path: Path
    mask_path: Path
    split: str


@dataclass(frozen=True)
class SyntheticSpec:
    size: int = 128
    n_classes: int = 3
    class_means: tuple[float, ...] = (0.2, 0.5, 1.0)
    looks: int = 4
    n_sites: int = 12

    def __post_init__(self):
        object.__setattr__(self, "class_means", tuple(float(m) for m in self.class_means))
        if self.n_classes < 2:
            raise DataError(f"n_classes: {self.n_classes} < 2")
        if len(self.class_means) != self.n_classes:
            raise DataError(f"class_means: {len(self.class_means)} values for {self.n_classes} classes")
        if any(b <= a for a, b in zip(self.class_means, self.class_means[1:])) or self.class_means[0] <= 0:
            raise DataError("class_means: must be positive and strictly increasing")
        if self.looks < 1:
            raise DataError(f"looks: {self.looks} < 1")
        if self.size < 1 or self.n_sites < 1:
            raise DataError("size and n_sites must be positive")

    @classmethod
    def evenly_spaced(cls, n_classes, **kw):
        return cls(n_classes=n_classes, class_means=tuple(np.linspace(0.2, 1.0, n_classes)), **kw)


# ---------------------------------------------------------------- PNG

def read_image(path, normalization: str = "scale") -> np.ndarray:
    """Load a single-channel 8/16-bit PNG as float64 in [0, 1]."""
    with Image.open(path) as im:
        mode = im.mode
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise DataError(f"{path}: expected a single-channel image, got shape {arr.shape}")
    arr = arr.astype(np.float64)
    if normalization == "minmax":
        return minmax(arr)
    return arr / (65535.0 if mode.startswith("I") else 255.0)


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise DataError(f"{path}: expected a single-channel mask, got shape {arr.shape}")
    return arr.astype(np.int64)


def encode_image16(image: np.ndarray) -> Image.Image:
    arr = np.round(np.clip(image, 0, 1) * 65535).astype(np.uint16)
    return Image.fromarray(arr)


def encode_image8(image: np.ndarray) -> Image.Image:
    return Image.fromarray(np.round(np.clip(image, 0, 1) * 255).astype(np.uint8))


def encode_mask(mask: np.ndarray) -> Image.Image:
    if mask.min() < 0 or mask.max() > 255:
        raise DataError("mask labels must fit in 8 bits")
    return Image.fromarray(mask.astype(np.uint8))


def minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    return (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x, dtype=np.float64)


# ---------------------------------------------------------------- manifest

def load_manifest(path) -> list[SampleRecord]:
    """Parse a JSON list of {image, mask, split}; paths resolve relative to the manifest."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    try:
        entries = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(entries, list):
        raise DataError(f"{path}: manifest must be a JSON list")
    records = []
    for i, entry in enumerate(entries):
        try:
            image, mask, split = entry["image"], entry["mask"], entry["split"]
        except (KeyError, TypeError):
            raise DataError(f"{path}: entry {i} needs image, mask and split") from None
        if split not in SPLITS:
            raise DataError(f"{path}: entry {i} has unknown split {split!r}")
        rec = SampleRecord(path.parent / image, path.parent / mask, split)
        for p in (rec.image_path, rec.mask_path):
            if not p.is_file():
                raise DataError(f"{path}: entry {i} references missing file {p}")
        with Image.open(rec.image_path) as a, Image.open(rec.mask_path) as b:
            if a.size != b.size:
                raise DataError(f"{path}: entry {i} image {a.size} and mask {b.size} differ in size")
        records.append(rec)
    return records


def load_split(records: Sequence[SampleRecord], split: str, normalization: str = "scale"):
    return [(read_image(r.image_path, normalization), read_mask(r.mask_path))
            for r in records if r.split == split]


# ---------------------------------------------------------------- tiling

def tile(image: np.ndarray, mask: np.ndarray, tile_size: int, stride: int | None = None):
    """Row-major tiles; a trailing strip narrower than ``tile_size`` is dropped."""
    stride = stride or tile_size
    if image.shape[:2] != mask.shape[:2]:
        raise DataError(f"image {image.shape} and mask {mask.shape} differ in size")
    h, w = image.shape[:2]
    if tile_size > h or tile_size > w:
        raise DataError(f"tile {tile_size} larger than image {h}x{w}")
    if stride < 1:
        raise DataError("stride must be positive")
    return [(image[r:r + tile_size, c:c + tile_size], mask[r:r + tile_size, c:c + tile_size])
            for r in range(0, h - tile_size + 1, stride)
            for c in range(0, w - tile_size + 1, stride)]


# ---------------------------------------------------------------- synthetic scenes

def synthetic_scene(spec: SyntheticSpec, seed, index: int = 0):
    """Voronoi label map and its speckled intensity image before normalization."""
    rng = np.random.default_rng([int(seed), int(index)])
    sites = rng.uniform(0, spec.size, size=(spec.n_sites, 2))
    site_class = rng.integers(0, spec.n_classes, size=spec.n_sites)
    rows, cols = np.mgrid[0:spec.size, 0:spec.size] + 0.5
    d2 = (rows[..., None] - sites[:, 0]) ** 2 + (cols[..., None] - sites[:, 1]) ** 2
    mask = site_class[np.argmin(d2, axis=-1)]
    speckle = rng.gamma(shape=spec.looks, scale=1.0 / spec.looks, size=mask.shape)
    raw = np.asarray(spec.class_means)[mask] * speckle
    return mask.astype(np.int64), raw


def generate_synthetic(spec: SyntheticSpec, seed, index: int = 0):
    """(image in [0, 1], mask); bit-identical for a fixed (spec, seed, index)."""
    mask, raw = synthetic_scene(spec, seed, index)
    return minmax(raw), mask


def synthetic_split(spec: SyntheticSpec, n: int, seed: int, split: str = "train"):
    """``n`` scenes; test scenes draw from a seed range disjoint from training."""
    offset = 0 if split == "train" else 1_000_000
    return [generate_synthetic(spec, seed, offset + i) for i in range(n)]


def majority_floor(masks, ignore_index: int = 255) -> float:
    """OA of always predicting the most frequent ground-truth class."""
    labels = np.concatenate([np.asarray(m).ravel() for m in masks])
    labels = labels[labels != ignore_index]
    return float(np.bincount(labels).max() / labels.size)
