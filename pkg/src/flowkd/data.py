"""Transfer-set ingestion: synthetic data, CIFAR-10 binary batches, augmentation."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]

# RNG substream ids; every stream is derived from the one run seed
STREAM_INIT, STREAM_SHUFFLE, STREAM_AUGMENT, STREAM_DATA, STREAM_SUBSET = range(5)


class DataError(ValueError):
    pass


def stream(seed: int, stream_id: int, *keys: int) -> np.random.Generator:
    """Independent generator for ``(seed, stream_id, *keys)``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(stream_id, *map(int, keys))))


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray | None = None
    split: str = "train"
    n_classes: int | None = None

    def __post_init__(self):
        if len(self.x) == 0:
            raise DataError("dataset is empty")
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=np.int64)
            if len(self.y) != len(self.x):
                raise DataError("labels and samples differ in length")
            if self.n_classes is None:
                self.n_classes = int(self.y.max()) + 1

    def __len__(self) -> int:
        return len(self.x)

    @property
    def is_image(self) -> bool:
        return self.x.ndim == 4

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], None if self.y is None else self.y[idx], self.split, self.n_classes)


@dataclass
class AugmentSpec:
    hflip_prob: float = 0.5
    crop_padding: int = 4
    rotation_deg: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must be in [0, 1]")
        if self.crop_padding < 0:
            raise ValueError("crop_padding must be >= 0")


# -- synthetic -----------------------------------------------------------------

def make_blobs(n_per_class: int, classes: int, dim: int, sigma: float, seed: int = 0,
               center_distance: float = 4.0) -> Dataset:
    """Isotropic Gaussian clusters.

    Centers are fixed by ``seed`` alone and placed on a scaled simplex-like
    layout: for ``classes <= dim`` they sit at ``center_distance / sqrt(2)``
    times the coordinate axes, so every pair is exactly ``center_distance``
    apart; otherwise they are random with that typical spacing.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    centers = blob_centers(classes, dim, center_distance, seed)
    rng = stream(seed, STREAM_DATA, 0)
    x = np.concatenate([centers[c] + sigma * rng.standard_normal((n_per_class, dim)) for c in range(classes)])
    y = np.repeat(np.arange(classes), n_per_class)
    order = rng.permutation(len(y))
    return Dataset(x[order], y[order], "train", classes)


def blob_centers(classes: int, dim: int, center_distance: float = 4.0, seed: int = 0) -> np.ndarray:
    if classes <= dim:
        return np.eye(classes, dim) * center_distance / np.sqrt(2.0)
    rng = stream(seed, STREAM_DATA, 1)
    return rng.standard_normal((classes, dim)) * center_distance / np.sqrt(2.0)


def make_blob_draw(n_per_class: int, classes: int, dim: int, sigma: float, seed: int, draw: int,
                   center_distance: float = 4.0) -> Dataset:
    """A further independent draw around the same centers as ``make_blobs(seed=seed)``."""
    centers = blob_centers(classes, dim, center_distance, seed)
    rng = stream(seed, STREAM_DATA, 2, draw)
    x = np.concatenate([centers[c] + sigma * rng.standard_normal((n_per_class, dim)) for c in range(classes)])
    y = np.repeat(np.arange(classes), n_per_class)
    return Dataset(x, y, "test", classes)


def make_pattern_images(n_per_class: int, classes: int = 4, size: int = 16, channels: int = 3,
                        noise: float = 0.5, seed: int = 0, draw: int = 0, split: str = "train") -> Dataset:
    """Toy image classes made of oriented gratings.

    Class ``c`` is a sinusoidal grating at orientation ``pi * c / classes``
    with a class-specific spatial frequency and colour mix; every sample gets
    a random phase, a random contrast and additive Gaussian noise, so the
    class is carried by local gradient orientation rather than by intensity.
    ``seed`` fixes the class definitions, ``draw`` selects an independent
    sample of images from them.
    """
    class_rng = stream(seed, STREAM_DATA, 10)
    freqs = class_rng.uniform(0.35, 0.75, classes)
    colours = class_rng.uniform(0.2, 1.0, (classes, channels))
    rng = stream(seed, STREAM_DATA, 11, draw)
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    images, labels = [], []
    for c in range(classes):
        theta = np.pi * c / classes
        proj = xx * np.cos(theta) + yy * np.sin(theta)
        for _ in range(n_per_class):
            phase = rng.uniform(0, 2 * np.pi)
            contrast = rng.uniform(0.6, 1.0)
            pattern = contrast * np.sin(freqs[c] * proj + phase)
            img = colours[c][:, None, None] * pattern[None] + noise * rng.standard_normal((channels, size, size))
            images.append(img)
            labels.append(c)
    order = rng.permutation(len(labels))
    return Dataset(np.asarray(images)[order], np.asarray(labels)[order], split, classes)


# -- CIFAR-10 ------------------------------------------------------------------

def read_cifar_batch(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Raw ``uint8`` images (N x 3 x 32 x 32) and labels from one binary batch."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing CIFAR-10 file {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        raise DataError(f"{path}: size {raw.size} is not a multiple of {CIFAR_RECORD}")
    records = raw.reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DataError(f"{path}: label byte {labels.max()} > 9")
    return records[:, 1:].reshape(-1, 3, 32, 32), labels


def _stratified(labels: np.ndarray, per_class: int | None, rng: np.random.Generator) -> np.ndarray:
    if per_class is None:
        return np.arange(len(labels))
    picks = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < per_class:
            raise DataError(f"class {c} has only {len(idx)} samples, {per_class} requested")
        picks.append(np.sort(rng.choice(idx, per_class, replace=False)))
    return np.sort(np.concatenate(picks))


def load_cifar10(directory: str | Path, subset_per_class: int | None = None, seed: int = 0,
                 test_per_class: int | None = None,
                 train_files=CIFAR_TRAIN_FILES, test_files=CIFAR_TEST_FILES) -> tuple[Dataset, Dataset]:
    """Load CIFAR-10 binary batches, subset per class, scale and standardize.

    Pixels are scaled to [0, 1] and standardized per channel with the mean and
    std of the loaded training subset (applied to both splits).
    """
    directory = Path(directory)

    def read(files):
        parts = [read_cifar_batch(directory / f) for f in files]
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])

    xtr, ytr = read(train_files)
    xte, yte = read(test_files)
    itr = _stratified(ytr, subset_per_class, stream(seed, STREAM_SUBSET, 0))
    ite = _stratified(yte, test_per_class, stream(seed, STREAM_SUBSET, 1))
    xtr, ytr = xtr[itr].astype(np.float64) / 255.0, ytr[itr]
    xte, yte = xte[ite].astype(np.float64) / 255.0, yte[ite]
    mean = xtr.mean(axis=(0, 2, 3), keepdims=True)
    std = xtr.std(axis=(0, 2, 3), keepdims=True)
    std = np.where(std > 0, std, 1.0)
    return (Dataset((xtr - mean) / std, ytr, "train", 10),
            Dataset((xte - mean) / std, yte, "test", 10))


# -- augmentation --------------------------------------------------------------

def crop_offsets(spec: AugmentSpec, epoch: int, index: int) -> tuple[bool, int, int]:
    """(flip, dy, dx) drawn for one sample; offsets index into the padded canvas."""
    rng = stream(spec.seed, STREAM_AUGMENT, epoch, index)
    flip = bool(rng.random() < spec.hflip_prob)
    p = spec.crop_padding
    dy, dx = (int(v) for v in rng.integers(0, 2 * p + 1, size=2)) if p else (0, 0)
    return flip, dy, dx


def _rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    from scipy.ndimage import rotate

    return rotate(img, degrees, axes=(1, 2), reshape=False, order=1, mode="constant", cval=0.0)


def augment(batch: np.ndarray, spec: AugmentSpec, epoch: int = 0, indices=None) -> np.ndarray:
    """Random horizontal flip and zero-padded random crop, per sample.

    Each sample's draw depends only on ``(spec.seed, epoch, index)`` where
    ``index`` is its position in the full dataset (``indices``), so the
    result does not depend on batching or order.
    """
    if batch.ndim != 4:
        raise ValueError("augment expects N x C x H x W images")
    if spec.hflip_prob == 0 and spec.crop_padding == 0 and not spec.rotation_deg:
        return batch
    indices = np.arange(len(batch)) if indices is None else np.asarray(indices)
    n, c, h, w = batch.shape
    p = spec.crop_padding
    padded = np.pad(batch, ((0, 0), (0, 0), (p, p), (p, p))) if p else batch
    out = np.empty_like(batch)
    for j, idx in enumerate(indices):
        flip, dy, dx = crop_offsets(spec, epoch, int(idx))
        img = padded[j, :, dy:dy + h, dx:dx + w]
        if flip:
            img = img[:, :, ::-1]
        if spec.rotation_deg:
            angle = stream(spec.seed, STREAM_AUGMENT, epoch, int(idx), 1).uniform(-spec.rotation_deg, spec.rotation_deg)
            img = _rotate(img, angle)
        out[j] = img
    return out


def hflip(batch: np.ndarray) -> np.ndarray:
    return batch[..., ::-1].copy()
