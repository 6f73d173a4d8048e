"""Data ingestion, toy-data generation, and synthetic-set initialization.

The desk-scale experiments run on generated "blob" datasets: each class is a
smooth template built from a handful of low-frequency cosine basis images
plus per-sample pixel noise. Real-format loaders (CIFAR binary batches and
IDX files) make full-size runs possible but nothing in the test suite needs
a download.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .distill import SyntheticSet
from .frequency import Spectrum, idct2

__all__ = [
    "LabeledDataset",
    "load_cifar_binary",
    "load_idx",
    "gen_blobs",
    "init_synthetic",
    "sample_class_images",
]

_CIFAR_RECORD = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes
_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801

# Fixed salts so the template, noise, and sampling streams never collide.
_TEMPLATE_SALT = 0x7E3A
_NOISE_SALT = {"train": 0x1001, "test": 0x1002}
_INIT_SALT = 0x53EED


@dataclass(frozen=True)
class LabeledDataset:
    """Images in [0, 1] with integer labels; one object per split."""

    images: np.ndarray  # (N, c, d, d) float64
    labels: np.ndarray  # (N,) int64
    class_count: int
    split: str = "train"

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4 or len(images) == 0:
            raise ValueError(f"images must be a nonempty (N, c, d, d) array, got {images.shape}")
        if labels.shape != (len(images),):
            raise ValueError(f"{len(images)} images but label shape {labels.shape}")
        if labels.min() < 0 or labels.max() >= self.class_count:
            raise ValueError(
                f"labels must lie in [0, {self.class_count}), got "
                f"[{labels.min()}, {labels.max()}]"
            )
        if images.min() < 0.0 or images.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    @property
    def side(self) -> int:
        return self.images.shape[2]

    def by_class(self) -> dict[int, np.ndarray]:
        return {
            int(cls): self.images[self.labels == cls]
            for cls in np.unique(self.labels)
        }

    def subset(self, indices: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(
            images=self.images[indices],
            labels=self.labels[indices],
            class_count=self.class_count,
            split=self.split,
        )


def load_cifar_binary(path, split: str = "train") -> LabeledDataset:
    """Load a CIFAR-10 binary batch: 3073-byte records, label byte first.

    Pixels are stored channel-major (R, G, B) row-major and scaled to [0, 1].
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) == 0 or len(raw) % _CIFAR_RECORD:
        raise ValueError(
            f"{path}: size {len(raw)} is not a positive multiple of {_CIFAR_RECORD}"
        )
    data = np.frombuffer(raw, dtype=np.uint8).reshape(-1, _CIFAR_RECORD)
    labels = data[:, 0].astype(np.int64)
    if labels.max() >= 10:
        raise ValueError(f"{path}: label {labels.max()} out of range for 10 classes")
    images = data[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return LabeledDataset(images=images, labels=labels, class_count=10, split=split)


def _read_idx(path, expected_magic: int) -> tuple[np.ndarray, tuple[int, ...]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise ValueError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ValueError(f"{path}: truncated IDX dimension record")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    body = np.frombuffer(raw, dtype=np.uint8, offset=header)
    if body.size != count:
        raise ValueError(f"{path}: expected {count} data bytes, found {body.size}")
    return body, dims


def load_idx(images_path, labels_path, class_count: int = 10, split: str = "train") -> LabeledDataset:
    """Load an IDX image/label file pair as grayscale (N, 1, d, d) images."""
    pixels, idims = _read_idx(images_path, _IDX_IMAGES_MAGIC)
    labels, ldims = _read_idx(labels_path, _IDX_LABELS_MAGIC)
    if idims[0] != ldims[0]:
        raise ValueError(f"image count {idims[0]} does not match label count {ldims[0]}")
    n, rows, cols = idims
    if rows != cols:
        raise ValueError(f"only square images are supported, got {rows}x{cols}")
    labels = labels.astype(np.int64)
    if labels.size and labels.max() >= class_count:
        raise ValueError(f"label {labels.max()} out of range for {class_count} classes")
    images = pixels.reshape(n, 1, rows, cols).astype(np.float64) / 255.0
    return LabeledDataset(images=images, labels=labels, class_count=class_count, split=split)


def _blob_template(class_index: int, side: int, channels: int, seed: int) -> np.ndarray:
    """One smooth class template, rescaled to [0, 1]."""
    max_freq = min(3, side)  # basis indices stay in the low-frequency corner
    for attempt in range(64):
        rng = np.random.default_rng(
            np.random.SeedSequence([seed & 0xFFFFFFFF, _TEMPLATE_SALT, class_index, attempt])
        )
        n_bases = int(rng.integers(1, 4))
        cells = rng.choice(max_freq * max_freq, size=n_bases, replace=False)
        spec = np.zeros((channels, side, side), dtype=np.float64)
        for cell in cells:
            p, q = divmod(int(cell), max_freq)
            spec[:, p, q] = rng.uniform(0.5, 1.5) * rng.choice([-1.0, 1.0])
        template = idct2(Spectrum(spec))
        lo, hi = template.min(), template.max()
        if hi - lo > 1e-9:
            return (template - lo) / (hi - lo)
    raise RuntimeError(f"could not build a non-flat template for class {class_index}")


def gen_blobs(
    class_count: int,
    per_class: int,
    side: int,
    channels: int,
    seed: int,
    noise_sigma: float = 0.05,
    split: str = "train",
) -> LabeledDataset:
    """Generate a separable toy dataset of noisy low-frequency templates.

    Templates depend only on (seed, class), so train and test splits drawn
    from the same seed share classes while their sample noise differs.
    Templates are redrawn until pairwise max-abs distance is at least 0.2.
    """
    if min(class_count, per_class, side, channels) < 1:
        raise ValueError("class_count, per_class, side, and channels must all be positive")
    if split not in _NOISE_SALT:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")

    templates = []
    for cls in range(class_count):
        template = _blob_template(cls, side, channels, seed)
        bump = 0
        while any(np.max(np.abs(template - old)) < 0.2 for old in templates):
            bump += 1
            template = _blob_template(cls + 1000 * bump, side, channels, seed)
            if bump > 64:
                raise RuntimeError("could not find pairwise-distinct templates")
        templates.append(template)

    images = np.empty((class_count * per_class, channels, side, side), dtype=np.float64)
    labels = np.empty(class_count * per_class, dtype=np.int64)
    for cls, template in enumerate(templates):
        rng = np.random.default_rng(
            np.random.SeedSequence([seed & 0xFFFFFFFF, _NOISE_SALT[split], cls])
        )
        block = slice(cls * per_class, (cls + 1) * per_class)
        noise = rng.normal(0.0, noise_sigma, size=(per_class, channels, side, side)) if noise_sigma else 0.0
        images[block] = np.clip(template[None] + noise, 0.0, 1.0)
        labels[block] = cls
    return LabeledDataset(images=images, labels=labels, class_count=class_count, split=split)


def sample_class_images(images: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """Draw `count` images: without replacement when possible, otherwise with
    replacement plus tiny tie-breaking noise."""
    n = len(images)
    if n == 0:
        raise ValueError("cannot sample from an empty class")
    if count <= n:
        return images[rng.permutation(n)[:count]].copy()
    idx = rng.integers(0, n, size=count)
    picked = images[idx].copy()
    picked += rng.normal(0.0, 1e-3, size=picked.shape)
    return picked


def init_synthetic(shard_by_class: dict[int, np.ndarray], ipc: int, seed: int) -> SyntheticSet:
    """Initialize synthetic data by sampling raw images from the shard.

    The per-class draw uses a generator seeded from (seed, class): the first
    `ipc` entries of that generator's permutation of the class.
    """
    if ipc < 1:
        raise ValueError("ipc must be at least 1")
    if not shard_by_class:
        raise ValueError("shard has no classes")
    images = {}
    for cls in sorted(shard_by_class):
        pool = np.asarray(shard_by_class[cls], dtype=np.float64)
        if len(pool) == 0:
            raise ValueError(f"class {cls} has no real samples to initialize from")
        rng = np.random.default_rng(
            np.random.SeedSequence([seed & 0xFFFFFFFF, _INIT_SALT, int(cls)])
        )
        images[int(cls)] = sample_class_images(pool, ipc, rng)
    return SyntheticSet(images=images, ipc=ipc)
