"""IDX (MNIST / Fashion-MNIST) readers and tracked-sample selection.

File layout, all integers big-endian::

    images: 0x00000803 | count | rows | cols | count*rows*cols unsigned bytes
    labels: 0x00000801 | count | count unsigned bytes

Files ending in ``.gz`` (or starting with the gzip magic) are decompressed
transparently.
"""

from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
NUM_CLASSES = 10

# standard file stems
TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"
TEST_IMAGES = "t10k-images-idx3-ubyte"
TEST_LABELS = "t10k-labels-idx1-ubyte"


class IdxError(ValueError):
    pass


class BadMagic(IdxError):
    pass


class Truncated(IdxError):
    pass


class LabelOutOfRange(IdxError):
    pass


class CountMismatch(IdxError):
    pass


class SampleTooLarge(ValueError):
    pass


class DataMissing(FileNotFoundError):
    pass


@dataclass(frozen=True)
class RawIdxImages:
    magic: int
    count: int
    rows: int
    cols: int
    pixels: bytes


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray  # (N, rows, cols) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    split_tag: str

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise CountMismatch(f"{len(self.images)} images vs {len(self.labels)} labels")
        if self.split_tag not in ("train", "test"):
            raise ValueError(f"split_tag must be 'train' or 'test', got {self.split_tag!r}")
        self.images.flags.writeable = False
        self.labels.flags.writeable = False

    def __len__(self):
        return len(self.labels)

    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx].copy(), self.labels[idx].copy(), self.split_tag)


@dataclass(frozen=True)
class TrackedSample:
    indices: tuple
    seed: int

    def __len__(self):
        return len(self.indices)


def _maybe_gunzip(data: bytes) -> bytes:
    if data[:2] == b"\x1f\x8b":
        return gzip.decompress(data)
    return data


def parse_idx_images(data: bytes) -> RawIdxImages:
    data = _maybe_gunzip(bytes(data))
    if len(data) < 16:
        raise Truncated(f"image header needs 16 bytes, got {len(data)}")
    magic, count, rows, cols = struct.unpack(">IIII", data[:16])
    if magic != IMAGES_MAGIC:
        raise BadMagic(f"expected image magic 0x{IMAGES_MAGIC:08x}, got 0x{magic:08x}")
    need = count * rows * cols
    payload = data[16:16 + need]
    if len(payload) < need:
        raise Truncated(f"declared {need} pixel bytes, found {len(payload)}")
    return RawIdxImages(magic, count, rows, cols, payload)


def parse_idx_labels(data: bytes) -> np.ndarray:
    data = _maybe_gunzip(bytes(data))
    if len(data) < 8:
        raise Truncated(f"label header needs 8 bytes, got {len(data)}")
    magic, count = struct.unpack(">II", data[:8])
    if magic != LABELS_MAGIC:
        raise BadMagic(f"expected label magic 0x{LABELS_MAGIC:08x}, got 0x{magic:08x}")
    payload = data[8:8 + count]
    if len(payload) < count:
        raise Truncated(f"declared {count} labels, found {len(payload)}")
    labels = np.frombuffer(payload, dtype=np.uint8).astype(np.int64)
    if count and labels.max() >= NUM_CLASSES:
        bad = int(np.argmax(labels >= NUM_CLASSES))
        raise LabelOutOfRange(f"label {labels[bad]} at position {bad}")
    return labels


def normalize(raw: RawIdxImages, labels, split_tag="train") -> Dataset:
    """Pixel byte b becomes b / 255."""
    labels = np.asarray(labels, dtype=np.int64)
    if raw.count != len(labels):
        raise CountMismatch(f"{raw.count} images vs {len(labels)} labels")
    pix = np.frombuffer(raw.pixels, dtype=np.uint8).reshape(raw.count, raw.rows, raw.cols)
    return Dataset(pix.astype(np.float64) / 255.0, labels.copy(), split_tag)


def draw_tracked_sample(ds, n: int, seed: int) -> TrackedSample:
    """``n`` distinct indices drawn uniformly without replacement; a pure function of (len(ds), n, seed)."""
    size = ds if isinstance(ds, int) else len(ds)
    if n > size:
        raise SampleTooLarge(f"cannot draw {n} of {size} images")
    if n < 0:
        raise ValueError("sample size must be nonnegative")
    rng = np.random.default_rng(seed)
    idx = rng.choice(size, size=n, replace=False)
    return TrackedSample(tuple(int(i) for i in np.sort(idx)), seed)


def find_file(root, stem):
    """Locate ``stem`` or ``stem.gz`` under ``root``."""
    root = Path(root)
    for name in (stem, stem + ".gz"):
        p = root / name
        if p.is_file():
            return p
    raise DataMissing(f"no {stem}[.gz] in {root}")


def load_split(root, split="train") -> Dataset:
    stems = (TRAIN_IMAGES, TRAIN_LABELS) if split == "train" else (TEST_IMAGES, TEST_LABELS)
    img_path, lab_path = (find_file(root, s) for s in stems)
    raw = parse_idx_images(img_path.read_bytes())
    labels = parse_idx_labels(lab_path.read_bytes())
    return normalize(raw, labels, split)


def file_checksums(root) -> dict:
    """sha256 of each standard IDX file present under ``root``."""
    out = {}
    for stem in (TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS):
        try:
            p = find_file(root, stem)
        except DataMissing:
            continue
        out[p.name] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def encode_idx_images(images: np.ndarray) -> bytes:
    """Inverse of :func:`parse_idx_images` for uint8 arrays (N, rows, cols)."""
    images = np.asarray(images, dtype=np.uint8)
    n, r, c = images.shape
    return struct.pack(">IIII", IMAGES_MAGIC, n, r, c) + images.tobytes()


def encode_idx_labels(labels) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">II", LABELS_MAGIC, len(labels)) + labels.tobytes()
