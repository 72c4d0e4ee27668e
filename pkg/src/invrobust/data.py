"""MNIST IDX ingestion, splits, the cyclic batch iterator and label overrides."""

from __future__ import annotations

import csv
import logging
import os
import struct
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

IMAGE_MAGIC = 2051  # unsigned bytes, 3 dims
LABEL_MAGIC = 2049  # unsigned bytes, 1 dim
FLOAT_IMAGE_MAGIC = 0x0D03  # float32, 3 dims; used for generated sets

TRAIN_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
TEST_FILES = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
DATA_DIR_ENV = "INVROBUST_DATA_DIR"


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ImageSet:
    """Images (N, 28, 28, 1) in [0, 1] with integer labels 0..9."""

    images: np.ndarray
    labels: np.ndarray
    provenance: str = "generated"
    # position of each sample in the set it was drawn from, if any
    source_ids: np.ndarray | None = None

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1:] != (28, 28, 1):
            raise DataFormatError(f"images must be (N, 28, 28, 1), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataFormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() > 9):
            raise DataFormatError("labels must lie in 0..9")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DataFormatError("pixels must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "ImageSet":
        idx = np.asarray(idx, dtype=np.int64)
        ids = self.ids()[idx]
        return ImageSet(self.images[idx], self.labels[idx], self.provenance, ids)

    def ids(self) -> np.ndarray:
        return self.source_ids if self.source_ids is not None else np.arange(len(self), dtype=np.int64)

    def with_labels(self, labels) -> "ImageSet":
        return ImageSet(self.images, np.asarray(labels, dtype=np.int64), self.provenance, self.source_ids)


def _read(path) -> bytes:
    with open(path, "rb") as f:
        return f.read()


def _parse_header(raw: bytes, path, ndim: int) -> tuple[int, tuple[int, ...], int]:
    if len(raw) < 4 + 4 * ndim:
        raise DataFormatError(f"{path}: truncated header")
    magic = struct.unpack(">I", raw[:4])[0]
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    return magic, dims, 4 + 4 * ndim


def read_idx_images(path) -> np.ndarray:
    raw = _read(path)
    magic, dims, off = _parse_header(raw, path, 3)
    if magic == IMAGE_MAGIC:
        dtype, scale = np.uint8, True
    elif magic == FLOAT_IMAGE_MAGIC:
        dtype, scale = np.dtype(">f4"), False
    else:
        raise DataFormatError(f"{path}: image magic {magic}, expected {IMAGE_MAGIC}")
    n, rows, cols = dims
    need = n * rows * cols * np.dtype(dtype).itemsize
    if len(raw) - off != need:
        raise DataFormatError(f"{path}: expected {need} bytes of pixel data, found {len(raw) - off}")
    px = np.frombuffer(raw, dtype=dtype, offset=off).reshape(n, rows, cols, 1)
    if scale:
        return px.astype(np.float32) / np.float32(255)
    return px.astype(np.float32)


def read_idx_labels(path) -> np.ndarray:
    raw = _read(path)
    magic, (n,), off = _parse_header(raw, path, 1)
    if magic != LABEL_MAGIC:
        raise DataFormatError(f"{path}: label magic {magic}, expected {LABEL_MAGIC}")
    if len(raw) - off != n:
        raise DataFormatError(f"{path}: expected {n} labels, found {len(raw) - off} bytes")
    return np.frombuffer(raw, dtype=np.uint8, offset=off).astype(np.int64)


def load_idx(images_path, labels_path, provenance: str = "train") -> ImageSet:
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise DataFormatError(f"{images_path} holds {len(images)} images but {labels_path} holds {len(labels)} labels")
    if len(labels) and labels.max() > 9:
        raise DataFormatError(f"{labels_path}: label {labels.max()} outside 0..9")
    return ImageSet(images, labels, provenance)


def write_idx(dataset: ImageSet, images_path, labels_path, exact: bool = False) -> None:
    """Write an ImageSet as an IDX pair.

    By default pixels are quantized to bytes (magic 2051). ``exact=True``
    writes big-endian float32 pixels (magic 0x0D03) so that generated images
    round-trip without loss.
    """
    n = len(dataset)
    with open(images_path, "wb") as f:
        if exact:
            f.write(struct.pack(">IIII", FLOAT_IMAGE_MAGIC, n, 28, 28))
            f.write(dataset.images.astype(">f4").tobytes())
        else:
            f.write(struct.pack(">IIII", IMAGE_MAGIC, n, 28, 28))
            f.write(np.rint(dataset.images * 255).astype(np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def mnist_paths(data_dir=None) -> dict[str, tuple[str, str]]:
    data_dir = data_dir or os.environ.get(DATA_DIR_ENV, "data/mnist")
    return {
        "train": tuple(os.path.join(data_dir, f) for f in TRAIN_FILES),
        "test": tuple(os.path.join(data_dir, f) for f in TEST_FILES),
    }


def load_mnist(data_dir=None) -> tuple[ImageSet, ImageSet]:
    paths = mnist_paths(data_dir)
    missing = [p for pair in paths.values() for p in pair if not os.path.exists(p)]
    if missing:
        raise FileNotFoundError(
            "MNIST files not found: " + ", ".join(missing)
            + f". Put the four uncompressed IDX files in one directory and pass --data-dir or set {DATA_DIR_ENV}."
        )
    return load_idx(*paths["train"], provenance="train"), load_idx(*paths["test"], provenance="test")


def split_train_val(dataset: ImageSet, val_count: int, seed: int) -> tuple[ImageSet, ImageSet]:
    n = len(dataset)
    if not 0 <= val_count < n:
        raise ValueError(f"val_count must satisfy 0 <= val_count < {n}, got {val_count}")
    if val_count == 0:
        return dataset, dataset.subset(np.arange(0))
    perm = np.random.default_rng(seed).permutation(n)
    val_idx = np.sort(perm[:val_count])
    train_idx = np.sort(perm[val_count:])
    return dataset.subset(train_idx), dataset.subset(val_idx)


def next_batch(dataset: ImageSet, cursor: int, n: int, order: np.ndarray | None = None) -> tuple[ImageSet, int]:
    """Return ``n`` consecutive samples starting at ``cursor``, wrapping around.

    ``order`` optionally permutes the traversal (per-epoch reshuffling).
    """
    if n < 1:
        raise ValueError(f"batch size must be >= 1, got {n}")
    size = len(dataset)
    if size == 0:
        raise ValueError("cannot draw batches from an empty set")
    pos = (cursor + np.arange(n)) % size
    idx = pos if order is None else order[pos]
    return dataset.subset(idx), int((cursor + n) % size)


def load_label_override(csv_path, size: int | None = None) -> dict[int, int]:
    """Parse an ``index,label`` CSV into {sample index: class}."""
    override: dict[int, int] = {}
    with open(csv_path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["index", "label"]:
            raise DataFormatError(f"{csv_path}: expected header 'index,label', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise DataFormatError(f"{csv_path}:{lineno}: expected 2 fields, got {len(row)}")
            try:
                index, label = int(row[0]), int(row[1])
            except ValueError:
                raise DataFormatError(f"{csv_path}:{lineno}: non-integer field in {row}") from None
            if not 0 <= label <= 9:
                raise DataFormatError(f"{csv_path}:{lineno}: label {label} outside 0..9")
            if index < 0 or (size is not None and index >= size):
                raise DataFormatError(f"{csv_path}:{lineno}: index {index} out of range")
            if index in override:
                log.warning("%s:%d: duplicate index %d, keeping the later label", csv_path, lineno, index)
            override[index] = label
    return override


def write_label_override(override: dict[int, int], csv_path) -> None:
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["index", "label"])
        for index in sorted(override):
            w.writerow([index, override[index]])
