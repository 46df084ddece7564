"""Datasets: on-disk container, CIFAR-10 binary ingestion, and MiniShapes.

MiniShapes is the hermetic stand-in for CIFAR: 32x32x3 images of one
colored glyph on a noisy background, ten classes = five shapes x two
color families (warm/cool). Everything is generated from a seed, so the
whole pipeline runs without downloads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seeding import derive_rng

DATASET_SCHEMA_VERSION = 1

CIFAR10_RECORD_BYTES = 3073  # 1 label byte + 3*32*32 pixel bytes

SHAPE_NAMES = ("disk", "ring", "square", "triangle", "plus")
FAMILY_NAMES = ("warm", "cool")


@dataclass
class DatasetContainer:
    images: np.ndarray  # (N, 3, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) integer class ids
    split: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"images {self.images.shape} / labels {self.labels.shape} mismatch")
        nc = self.num_classes
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= nc):
            raise ValueError(
                f"labels outside [0, {nc}): "
                f"[{self.labels.min()}, {self.labels.max()}]")

    @property
    def num_classes(self) -> int:
        return int(self.meta.get("num_classes", 10))

    def __len__(self):
        return self.images.shape[0]

    def subset(self, indices, split=None):
        return DatasetContainer(self.images[indices], self.labels[indices],
                                split or self.split, dict(self.meta))

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.images.astype("<f4").tofile(out / "images.bin")
        self.labels.astype("<u2").tofile(out / "labels.bin")
        meta = {
            "schema_version": DATASET_SCHEMA_VERSION,
            "shape": list(self.images.shape),
            "split": self.split,
            **self.meta,
        }
        (out / "meta.json").write_text(
            json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, in_dir):
        src = Path(in_dir)
        meta = json.loads((src / "meta.json").read_text())
        if meta.get("schema_version") != DATASET_SCHEMA_VERSION:
            raise ValueError(
                f"unsupported dataset schema in {src}: {meta.get('schema_version')}")
        shape = tuple(meta.pop("shape"))
        split = meta.pop("split")
        meta.pop("schema_version")
        images = np.fromfile(src / "images.bin", dtype="<f4").reshape(shape)
        labels = np.fromfile(src / "labels.bin", dtype="<u2").astype(np.int64)
        return cls(images, labels, split, meta)


def load_cifar10_bin(path) -> DatasetContainer:
    """Parse the classic CIFAR-10 binary format: 3073-byte records of one
    label byte followed by channel-major R, G, B planes."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR10_RECORD_BYTES != 0:
        raise ValueError(
            f"{path}: size {raw.size} not a multiple of {CIFAR10_RECORD_BYTES}")
    records = raw.reshape(-1, CIFAR10_RECORD_BYTES)
    labels = records[:, 0]
    bad = np.nonzero(labels >= 10)[0]
    if bad.size:
        i = int(bad[0])
        raise ValueError(
            f"{path}: label byte {labels[i]} >= 10 at record {i} "
            f"(byte offset {i * CIFAR10_RECORD_BYTES})")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return DatasetContainer(images, labels.astype(np.int64), "cifar10",
                            {"num_classes": 10, "source_format": "cifar10-bin"})


def write_cifar10_bin(images, labels, path):
    """Inverse of `load_cifar10_bin` for fixtures; expects [0,1] floats."""
    images = np.asarray(images)
    n = images.shape[0]
    records = np.empty((n, CIFAR10_RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = np.asarray(labels, dtype=np.uint8)
    records[:, 1:] = np.round(images.reshape(n, -1) * 255.0).astype(np.uint8)
    records.tofile(path)


# ---- MiniShapes -------------------------------------------------------


def _glyph_mask(shape_id, u, v, radius):
    """Boolean inside-glyph mask over rotated, centered coordinates."""
    if shape_id == 0:  # disk
        return u * u + v * v <= radius * radius
    if shape_id == 1:  # ring
        r2 = u * u + v * v
        return (r2 <= radius * radius) & (r2 >= (0.55 * radius) ** 2)
    if shape_id == 2:  # square
        s = 0.8 * radius
        return (np.abs(u) <= s) & (np.abs(v) <= s)
    if shape_id == 3:  # triangle (equilateral, apex up)
        return ((v >= -0.5 * radius)
                & (np.sqrt(3) * u + v <= radius)
                & (-np.sqrt(3) * u + v <= radius))
    if shape_id == 4:  # plus
        arm = 0.35 * radius
        return (((np.abs(u) <= arm) & (np.abs(v) <= radius))
                | ((np.abs(v) <= arm) & (np.abs(u) <= radius)))
    raise ValueError(f"unknown shape id {shape_id}")


def _family_color(family_id, rng):
    if family_id == 0:  # warm: red/orange/yellow band
        r = rng.uniform(0.65, 1.0)
        g = rng.uniform(0.1, 0.7)
        b = rng.uniform(0.0, 0.3)
    else:  # cool: green/blue band
        r = rng.uniform(0.0, 0.35)
        g = rng.uniform(0.2, 0.85)
        b = rng.uniform(0.55, 1.0)
    return np.array([r, g, b], dtype=np.float32)


def gen_minishapes(seed, n, num_classes=10, split="train", *,
                   pos_jitter=3.0, radius_range=(7.0, 10.0),
                   rot_max_deg=30.0, noise_sigma=0.08) -> DatasetContainer:
    """Deterministic synthetic dataset; class = shape x color family.

    Classes cycle 0..num_classes-1 so counts stay balanced within one;
    all jitter (position, scale, rotation, color, background) comes from
    a generator derived solely from `seed`. The keyword knobs exist for
    experiments; defaults are the dataset contract.
    """
    if not 1 <= num_classes <= len(SHAPE_NAMES) * len(FAMILY_NAMES):
        raise ValueError(f"num_classes must be in [1, 10], got {num_classes}")
    rng = derive_rng(seed, "minishapes", split)
    side = 32
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float32)
    images = np.empty((n, 3, side, side), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        label = i % num_classes
        labels[i] = label
        shape_id = label % len(SHAPE_NAMES)
        family_id = label // len(SHAPE_NAMES)
        bg = rng.uniform(0.25, 0.55)
        noise = rng.normal(0.0, noise_sigma, size=(3, side, side)).astype(np.float32)
        img = np.full((3, side, side), bg, dtype=np.float32) + noise
        cx = 16.0 + rng.uniform(-pos_jitter, pos_jitter)
        cy = 16.0 + rng.uniform(-pos_jitter, pos_jitter)
        radius = rng.uniform(*radius_range)
        theta = np.deg2rad(rng.uniform(-rot_max_deg, rot_max_deg))
        ct, st = np.cos(theta), np.sin(theta)
        dx, dy = xx - cx, yy - cy
        u = ct * dx + st * dy
        v = -st * dx + ct * dy
        mask = _glyph_mask(shape_id, u, v, radius)
        color = _family_color(family_id, rng)
        img[:, mask] = color[:, None] + noise[:, mask] * 0.5
        images[i] = np.clip(img, 0.0, 1.0)
    return DatasetContainer(images, labels, split,
                            {"num_classes": num_classes, "seed": int(seed),
                             "generator": "minishapes"})


def split_validation(ds: DatasetContainer, n_val, seed):
    """Disjoint seeded shuffle split into (train', val)."""
    n = len(ds)
    if n_val >= n:
        raise ValueError(f"n_val {n_val} must be smaller than the set ({n})")
    perm = derive_rng(seed, "split-validation", n, n_val).permutation(n)
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    return ds.subset(train_idx), ds.subset(val_idx, split=f"{ds.split}-val")


# ---- training-time transforms ----------------------------------------


def compute_norm_stats(images):
    """Per-channel mean/std over a training split (std floored at 1e-6)."""
    mean = images.mean(axis=(0, 2, 3))
    std = np.maximum(images.std(axis=(0, 2, 3)), 1e-6)
    return mean.astype(np.float32), std.astype(np.float32)


def normalize(images, mean, std):
    mean = np.asarray(mean, dtype=images.dtype)
    std = np.asarray(std, dtype=images.dtype)
    return (images - mean[None, :, None, None]) / std[None, :, None, None]


def augment_batch(images, rng):
    """Random crop (pad 4, crop back) + horizontal flip, per sample."""
    n, c, h, w = images.shape
    pad = 4
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(images)
    tops = rng.integers(0, 2 * pad + 1, size=n)
    lefts = rng.integers(0, 2 * pad + 1, size=n)
    flips = rng.random(n) < 0.5
    for i in range(n):
        crop = padded[i, :, tops[i]:tops[i] + h, lefts[i]:lefts[i] + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out
