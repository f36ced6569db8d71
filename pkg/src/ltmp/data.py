"""Procedural shape/colour classification dataset and its binary file format.

File layout (little-endian)::

    magic   4 bytes  b"LTDS"
    count   u32
    H, W, C u32 x 3
    pixels  count*H*W*C u8, row-major [count, H, W, C]
    labels  count u16
"""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"LTDS"
_HEADER = struct.Struct("<4sIIII")

SHAPES = ("circle", "square", "triangle", "cross")
COLORS = {
    "red": (210, 50, 45),
    "blue": (45, 90, 215),
    "green": (60, 185, 70),
}
MAX_CLASSES = len(SHAPES) * len(COLORS)


def class_name(label: int) -> str:
    shape, color = divmod(label, len(COLORS))
    return f"{list(COLORS)[color]} {SHAPES[shape]}"


@dataclass
class SynthDatasetSpec:
    classes: int = 8
    image_size: int = 32
    train_samples: int = 6144
    val_samples: int = 1024
    noise: float = 0.05
    seed: int = 1234

    def __post_init__(self):
        if not 2 <= self.classes <= MAX_CLASSES:
            raise ValueError(f"classes must be in [2, {MAX_CLASSES}], got {self.classes}")
        if self.image_size < 8:
            raise ValueError("image_size must be at least 8")
        if self.train_samples < 0 or self.val_samples < 0:
            raise ValueError("sample counts must be non-negative")


class Dataset(NamedTuple):
    images: np.ndarray  # [n, H, W, C] uint8
    labels: np.ndarray  # [n] int64

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx])


def to_float(images: np.ndarray):
    import torch

    return torch.from_numpy(images.astype(np.float64) / 255.0)


def _shape_mask(kind: str, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        return dy**2 + dx**2 <= r**2
    if kind == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if kind == "triangle":
        # apex up, base at cy + r
        h = (dy + r) / (2 * r)
        return (h >= 0) & (h <= 1) & (np.abs(dx) <= h * r)
    if kind == "cross":
        arm = r * 0.33
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))
    raise ValueError(kind)


def render_sample(label: int, size: int, noise: float, rng: np.random.Generator) -> np.ndarray:
    shape_idx, color_idx = divmod(label, len(COLORS))
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    r = rng.uniform(0.26, 0.32) * size
    cy, cx = rng.uniform(r, size - r, size=2)
    bg = rng.uniform(20, 110) + rng.uniform(-15, 15, size=3)
    img = np.broadcast_to(bg, (size, size, 3)).copy()
    # low-frequency colour field so background patches are not interchangeable
    for _ in range(3):
        fy, fx = rng.uniform(-3, 3, size=2) * 2 * np.pi / size
        phase = rng.uniform(0, 2 * np.pi)
        img += np.sin(fy * yy + fx * xx + phase)[..., None] * rng.uniform(-20, 20, size=3)
    fg = np.asarray(list(COLORS.values())[color_idx], dtype=np.float64) + rng.uniform(-25, 25, size=3)
    mask = _shape_mask(SHAPES[shape_idx], yy, xx, cy, cx, r)
    img[mask] = fg
    img += rng.normal(0.0, noise * 255.0, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate_split(spec: SynthDatasetSpec, count: int, seed_seq: np.random.SeedSequence) -> Dataset:
    rng = np.random.default_rng(seed_seq)
    labels = rng.integers(0, spec.classes, size=count)
    images = np.empty((count, spec.image_size, spec.image_size, 3), dtype=np.uint8)
    for i, y in enumerate(labels):
        images[i] = render_sample(int(y), spec.image_size, spec.noise, rng)
    return Dataset(images, labels.astype(np.int64))


def generate(spec: SynthDatasetSpec) -> tuple[Dataset, Dataset]:
    """Deterministic ``(train, val)`` splits; each split draws from its own child seed."""
    train_seq, val_seq = np.random.SeedSequence(spec.seed).spawn(2)
    return generate_split(spec, spec.train_samples, train_seq), generate_split(spec, spec.val_samples, val_seq)


def write_dataset(path, ds: Dataset) -> None:
    images = np.ascontiguousarray(ds.images, dtype=np.uint8)
    if images.ndim != 4:
        raise ValueError("images must be [count, H, W, C]")
    n, h, w, c = images.shape
    labels = np.asarray(ds.labels)
    if labels.shape != (n,):
        raise ValueError("one label per image required")
    if n and (labels.min() < 0 or labels.max() > 0xFFFF):
        raise ValueError("labels must fit in u16")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_HEADER.pack(MAGIC, n, h, w, c))
        f.write(images.tobytes())
        f.write(labels.astype("<u2").tobytes())
    os.replace(tmp, path)


def read_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, n, h, w, c = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    npix = n * h * w * c
    expected = _HEADER.size + npix + 2 * n
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    images = np.frombuffer(raw, dtype=np.uint8, count=npix, offset=_HEADER.size).reshape(n, h, w, c)
    labels = np.frombuffer(raw, dtype="<u2", count=n, offset=_HEADER.size + npix).astype(np.int64)
    return Dataset(images.copy(), labels)


def label_histogram(labels: np.ndarray, classes: int) -> tuple[list[int], float]:
    """Class counts and the chi-square statistic against a uniform draw."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=classes)[:classes]
    expected = len(labels) / classes if classes else 0.0
    chi2 = float(((counts - expected) ** 2 / expected).sum()) if expected > 0 else 0.0
    return counts.tolist(), chi2


def generate_dataset(spec: SynthDatasetSpec, out_dir) -> dict:
    """Write ``train.ltds`` and ``val.ltds`` under ``out_dir``; returns a summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, val = generate(spec)
    summary = {}
    for name, ds in (("train", train), ("val", val)):
        write_dataset(out_dir / f"{name}.ltds", ds)
        counts, chi2 = label_histogram(ds.labels, spec.classes)
        log.info("%s: %d samples, chi2 vs uniform = %.2f (dof %d)", name, len(ds), chi2, spec.classes - 1)
        summary[name] = {"count": len(ds), "label_counts": counts, "chi2": chi2}
    return summary
