"""
Datasets: CIFAR binary files, the synthetic texture set, batching and the
training-time augmentations (crop/flip, mixup).

Binary framing (CIFAR-10 and our own exports): each record is the label
byte(s) followed by the R, G and B planes, each plane row-major. Pixels are
kept as uint8 in memory and scaled by 1/255 when a batch is materialised.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from models.schemas import Batch, ImageRecord, NormStats
from services import file_service
from services.errors import ConfigError, DataFormatError

logger = logging.getLogger(__name__)

CIFAR_SIZE = 32
CIFAR_CHANNELS = 3
CIFAR10_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST_FILE = "test_batch.bin"
CIFAR10_RECORDS_PER_FILE = 10_000

TEXTURE_CLASSES = ("horizontal_stripes", "vertical_stripes", "checkerboard", "gaussian_blob")
SYNTHETIC_NOISE = 0.1


@dataclass(frozen=True)
class Dataset:
    pixels: np.ndarray          # N×H×W×C, uint8 (scale 1/255) or float in [0, 1]
    labels: np.ndarray          # N, int64
    num_classes: int
    source: str = ""

    def __post_init__(self):
        if len(self.pixels) != len(self.labels):
            raise DataFormatError(f"{len(self.pixels)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_size(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[3]

    def images(self, indices=slice(None)) -> np.ndarray:
        chunk = self.pixels[indices]
        if chunk.dtype == np.uint8:
            return chunk.astype(np.float64) / 255.0
        return chunk.astype(np.float64, copy=False)

    def record(self, index: int) -> ImageRecord:
        return ImageRecord(pixels=self.images(index), label=int(self.labels[index]))


# ── Binary records ───────────────────────────────────────────────────────────

def decode_records(data: bytes, image_size: int, channels: int, num_classes: int,
                   label_bytes: int = 1, label_index: int = 0, origin: str = "<bytes>") -> Dataset:
    """Parse label-prefixed planar records; framing errors report the byte offset."""
    record_len = label_bytes + image_size * image_size * channels
    whole = len(data) // record_len
    if len(data) % record_len:
        offset = whole * record_len
        raise DataFormatError(
            f"{origin}: truncated record at byte offset {offset} "
            f"({len(data) - offset} of {record_len} bytes present)")
    raw = np.frombuffer(data, dtype=np.uint8).reshape(whole, record_len)
    labels = raw[:, label_index].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        i = int(bad[0])
        raise DataFormatError(
            f"{origin}: label {labels[i]} >= {num_classes} in record {i} (byte offset {i * record_len})")
    planes = raw[:, label_bytes:].reshape(whole, channels, image_size, image_size)
    return Dataset(np.ascontiguousarray(planes.transpose(0, 2, 3, 1)), labels, num_classes, origin)


def encode_records(dataset: Dataset) -> bytes:
    pixels = dataset.pixels
    if pixels.dtype != np.uint8:
        pixels = np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)
    planes = pixels.transpose(0, 3, 1, 2).reshape(len(dataset), -1)
    labels = dataset.labels.astype(np.uint8)[:, None]
    return np.concatenate([labels, planes], axis=1).tobytes()


def read_records(path: str | Path, image_size: int, channels: int = CIFAR_CHANNELS,
                 num_classes: int = 10) -> Dataset:
    return decode_records(file_service.read_bytes(path), image_size, channels, num_classes,
                          origin=str(path))


def write_records(path: str | Path, dataset: Dataset) -> Path:
    out = file_service.write_bytes_atomic(path, encode_records(dataset))
    logger.info("wrote %d records to %s", len(dataset), out)
    return out


def _read_cifar_file(path: Path, records: int, label_bytes: int, label_index: int,
                     num_classes: int) -> Dataset:
    data = file_service.read_bytes(path)
    record_len = label_bytes + CIFAR_SIZE * CIFAR_SIZE * CIFAR_CHANNELS
    dataset = decode_records(data, CIFAR_SIZE, CIFAR_CHANNELS, num_classes,
                             label_bytes, label_index, str(path))
    if len(data) != records * record_len:
        raise DataFormatError(f"{path}: {len(data)} bytes, expected {records * record_len}")
    return dataset


def _concat(parts: list[Dataset], source: str) -> Dataset:
    return Dataset(np.concatenate([p.pixels for p in parts]),
                   np.concatenate([p.labels for p in parts]), parts[0].num_classes, source)


def load_cifar10_bin(directory: str | Path,
                     records_per_file: int = CIFAR10_RECORDS_PER_FILE) -> tuple[Dataset, Dataset]:
    """data_batch_{1..5}.bin + test_batch.bin → (train, test)."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataFormatError(f"CIFAR-10 directory not found: {directory}")
    train = [_read_cifar_file(directory / name, records_per_file, 1, 0, 10) for name in CIFAR10_TRAIN_FILES]
    test = _read_cifar_file(directory / CIFAR10_TEST_FILE, records_per_file, 1, 0, 10)
    train_set = _concat(train, f"cifar10:{directory}")
    logger.info("loaded CIFAR-10 from %s: %d train / %d test", directory, len(train_set), len(test))
    return train_set, Dataset(test.pixels, test.labels, 10, f"cifar10:{directory}")


def load_cifar100_bin(directory: str | Path, train_records: int = 50_000,
                      test_records: int = 10_000) -> tuple[Dataset, Dataset]:
    """train.bin / test.bin with (coarse, fine) label bytes; the fine label is used."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataFormatError(f"CIFAR-100 directory not found: {directory}")
    train = _read_cifar_file(directory / "train.bin", train_records, 2, 1, 100)
    test = _read_cifar_file(directory / "test.bin", test_records, 2, 1, 100)
    source = f"cifar100:{directory}"
    logger.info("loaded CIFAR-100 from %s: %d train / %d test", directory, len(train), len(test))
    return Dataset(train.pixels, train.labels, 100, source), Dataset(test.pixels, test.labels, 100, source)


# ── Synthetic textures ───────────────────────────────────────────────────────

def texture_pattern(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """One size×size grey pattern in [0, 1] with random phase and scale."""
    rows, cols = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    name = TEXTURE_CLASSES[label]
    if name in ("horizontal_stripes", "vertical_stripes"):
        period = rng.uniform(3.0, 6.0)
        phase = rng.uniform(0.0, 2 * math.pi)
        axis = rows if name == "horizontal_stripes" else cols
        return 0.5 + 0.5 * np.sin(2 * math.pi * axis / period + phase)
    if name == "checkerboard":
        cell = int(rng.integers(2, 5))
        dy, dx = rng.integers(0, cell, size=2)
        return (((rows + dy) // cell + (cols + dx) // cell) % 2).astype(np.float64)
    cy, cx = rng.uniform(0.25 * size, 0.75 * size, size=2)
    sigma = rng.uniform(size / 8, size / 4)
    return np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2 * sigma ** 2))


def gen_synthetic_textures(num_per_class: int, size: int, seed,
                           noise: float = SYNTHETIC_NOISE, channels: int = CIFAR_CHANNELS) -> Dataset:
    """
    Four texture classes, `num_per_class` each, shuffled. Every sample gets a
    random colour tint, additive Gaussian noise of std `noise` and is clipped
    to [0, 1]. `seed` may be an int or a SeedSequence.
    """
    if size < 8:
        raise ConfigError(f"synthetic textures need size >= 8, got {size}")
    if num_per_class < 1:
        raise ConfigError("num_per_class must be positive")
    rng = np.random.default_rng(seed)
    k = len(TEXTURE_CLASSES)
    labels = np.repeat(np.arange(k), num_per_class)
    rng.shuffle(labels)
    pixels = np.empty((len(labels), size, size, channels))
    for i, label in enumerate(labels):
        pattern = texture_pattern(int(label), size, rng)
        tint = rng.uniform(0.5, 1.0, size=channels)
        image = pattern[..., None] * tint
        if noise > 0:
            image = image + rng.normal(0.0, noise, size=image.shape)
        pixels[i] = np.clip(image, 0.0, 1.0)
    return Dataset(pixels, labels.astype(np.int64), k, f"synthetic:{size}")


def synthetic_splits(train_per_class: int = 500, test_per_class: int = 125, size: int = 16,
                     seed: int = 1, noise: float = SYNTHETIC_NOISE) -> tuple[Dataset, Dataset]:
    train_seq, test_seq = np.random.SeedSequence(seed).spawn(2)
    return (gen_synthetic_textures(train_per_class, size, train_seq, noise),
            gen_synthetic_textures(test_per_class, size, test_seq, noise))


# ── Normalisation and batching ───────────────────────────────────────────────

def channel_stats(dataset: Dataset) -> NormStats:
    images = dataset.images()
    mean = images.mean(axis=(0, 1, 2))
    std = images.std(axis=(0, 1, 2))
    std = np.where(std > 0, std, 1.0)
    return NormStats(mean=tuple(float(m) for m in mean), std=tuple(float(s) for s in std))


def normalize(images: np.ndarray, stats: NormStats | None) -> np.ndarray:
    if stats is None:
        return images
    return (images - np.asarray(stats.mean)) / np.asarray(stats.std)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def iterate_batches(size: int, batch_size: int, rng: np.random.Generator | None = None,
                    shuffle: bool = True) -> Iterator[np.ndarray]:
    """Index arrays covering range(size); the last partial batch is kept."""
    order = rng.permutation(size) if shuffle and rng is not None else np.arange(size)
    for start in range(0, size, batch_size):
        yield order[start:start + batch_size]


def make_batch(dataset: Dataset, indices: np.ndarray) -> Batch:
    return Batch(images=dataset.images(indices),
                 targets=one_hot(dataset.labels[indices], dataset.num_classes))


# ── Augmentation ─────────────────────────────────────────────────────────────

def mixup_batch(batch: Batch, alpha: float, rng: np.random.Generator,
                lam: float | None = None, perm: np.ndarray | None = None) -> Batch:
    """x ← λ·x_i + (1−λ)·x_perm(i), same λ for the targets; λ ~ Beta(α, α) unless given."""
    if alpha <= 0:
        raise ConfigError(f"mixup needs alpha > 0, got {alpha}")
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    if perm is None:
        perm = rng.permutation(batch.size)
    images = lam * batch.images + (1.0 - lam) * batch.images[perm]
    targets = lam * batch.targets + (1.0 - lam) * batch.targets[perm]
    return Batch(images=images, targets=targets)


def random_crop_flip(images: np.ndarray, pad: int, rng: np.random.Generator,
                     flip: bool = True) -> np.ndarray:
    """Reflect-pad by `pad`, crop back at a random offset, flip horizontally with p=0.5."""
    if pad < 0:
        raise ConfigError(f"crop padding must be >= 0, got {pad}")
    n, height, width, _ = images.shape
    padded = np.pad(images, ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="reflect") if pad else images
    out = np.empty_like(images)
    for i in range(n):
        dy, dx = rng.integers(0, 2 * pad + 1, size=2)
        crop = padded[i, dy:dy + height, dx:dx + width]
        if flip and rng.random() < 0.5:
            crop = crop[:, ::-1]
        out[i] = crop
    return out
