"""Datasets: synthetic Gaussian blobs, IDX (MNIST) and CSV ingestion, batching."""

from __future__ import annotations

import csv
import io
import os
import struct
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ConfigError, FormatError, InputError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = "train"

    def __post_init__(self):
        if self.features.ndim != 2 or len(self.features) < 1:
            raise InputError(f"features must be a non-empty N×D matrix, got shape {self.features.shape}")
        if self.labels.shape != (len(self.features),):
            raise InputError(f"{len(self.labels)} labels for {len(self.features)} samples")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise InputError(f"labels must lie in [0, {self.class_count})")
        if not np.all(np.isfinite(self.features)):
            raise InputError("features contain NaN or Inf")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dims(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class BlobSpec:
    class_count: int = 20
    dims: int = 16
    samples_per_class: int = 250
    cluster_spread: float = 1.0
    center_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.class_count < 2:
            raise ConfigError(f"class_count must be >= 2, got {self.class_count}")
        if self.dims < 1 or self.samples_per_class < 1:
            raise ConfigError("dims and samples_per_class must be >= 1")
        if not self.cluster_spread >= 0 or not self.center_scale > 0:
            raise ConfigError("cluster_spread must be >= 0 and center_scale > 0")
        if self.class_count * self.samples_per_class < 2:
            raise ConfigError("need at least two samples to split into train/val")


def generate_blobs(spec: BlobSpec) -> tuple[Dataset, Dataset]:
    """Isotropic Gaussian clusters around uniform random centres, split 80/20."""
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    centers = rng.uniform(-spec.center_scale, spec.center_scale, size=(spec.class_count, spec.dims))
    labels = np.repeat(np.arange(spec.class_count), spec.samples_per_class)
    noise = rng.standard_normal(size=(len(labels), spec.dims))
    features = centers[labels] + spec.cluster_spread * noise
    order = rng.permutation(len(labels))
    features, labels = features[order], labels[order]
    n_train = max(1, min(len(labels) - 1, int(round(0.8 * len(labels)))))
    train = Dataset(features[:n_train], labels[:n_train], spec.class_count, "train")
    val = Dataset(features[n_train:], labels[n_train:], spec.class_count, "val")
    return train, val


def _read_idx(path, expected_magic: int, min_dims: int) -> tuple[tuple[int, ...], bytes, int]:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 4:
        raise FormatError("file too short for IDX magic", 0, os.fspath(path))
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expected_magic:
        raise FormatError(f"bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0, os.fspath(path))
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if ndim < min_dims or len(buf) < header:
        raise FormatError("truncated IDX header", len(buf), os.fspath(path))
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    need = int(np.prod(dims, dtype=np.int64))
    if len(buf) - header != need:
        raise FormatError(f"IDX payload has {len(buf) - header} bytes, header declares {need}",
                          header + min(need, len(buf) - header), os.fspath(path))
    return dims, buf[header:], header


def load_idx(images_path, labels_path, class_count: int | None = None, split: str = "train") -> Dataset:
    """Read an IDX image/label pair; pixels are scaled to ``[0, 1]``."""
    dims, pixels, _ = _read_idx(images_path, IDX_IMAGES_MAGIC, 1)
    ldims, raw_labels, lheader = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if ldims[0] != dims[0]:
        raise FormatError(f"{ldims[0]} labels for {dims[0]} images", 4, os.fspath(labels_path))
    n = dims[0]
    d = int(np.prod(dims[1:], dtype=np.int64)) if len(dims) > 1 else 1
    features = np.frombuffer(pixels, dtype=np.uint8).reshape(n, d).astype(np.float64) / 255.0
    labels = np.frombuffer(raw_labels, dtype=np.uint8).astype(np.int64)
    if n == 0:
        raise FormatError("IDX file holds no samples", 4, os.fspath(images_path))
    c = class_count if class_count is not None else max(int(labels.max()) + 1, 2)
    if labels.max() >= c:
        bad = int(np.argmax(labels >= c))
        raise FormatError(f"label {labels[bad]} out of range [0, {c})", lheader + bad, os.fspath(labels_path))
    return Dataset(features, labels, c, split)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images ``(N, rows, cols)`` and labels ``(N,)`` as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">I", 0x0800 | images.ndim))
        f.write(struct.pack(f">{images.ndim}I", *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


def save_csv(ds: Dataset, path) -> None:
    """Header ``label,f0,f1,...``; floats written with ``repr`` so reloads are exact."""
    out = io.StringIO()
    out.write(",".join(["label"] + [f"f{j}" for j in range(ds.dims)]) + "\n")
    for label, row in zip(ds.labels, ds.features):
        out.write(str(int(label)) + "," + ",".join(repr(float(v)) for v in row) + "\n")
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(out.getvalue())


def load_csv(path, class_count: int | None = None, split: str = "train") -> Dataset:
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise FormatError("empty CSV file", 0, os.fspath(path))
    header = rows[0]
    if not header or header[0] != "label" or header[1:] != [f"f{j}" for j in range(len(header) - 1)]:
        raise FormatError("CSV header must be label,f0,f1,...", 1, os.fspath(path))
    width = len(header)
    labels, feats = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != width:
            raise FormatError(f"expected {width} fields, got {len(row)}", lineno, os.fspath(path))
        try:
            labels.append(int(row[0]))
            feats.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise FormatError(f"unparseable value: {exc}", lineno, os.fspath(path)) from None
    if not labels:
        raise FormatError("CSV has no samples", 2, os.fspath(path))
    labels_arr = np.asarray(labels, dtype=np.int64)
    c = class_count if class_count is not None else max(int(labels_arr.max()) + 1, 2)
    try:
        return Dataset(np.asarray(feats, dtype=np.float64), labels_arr, c, split)
    except InputError as exc:
        raise FormatError(str(exc), None, os.fspath(path)) from None


def batches(ds: Dataset, batch_size: int, epoch_seed: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Shuffle with a seeded permutation and yield ``(features, labels)`` chunks.

    The final partial batch is kept.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = epoch_permutation(len(ds), epoch_seed)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield ds.features[idx], ds.labels[idx]


def epoch_permutation(n: int, epoch_seed: int) -> np.ndarray:
    return np.random.Generator(np.random.PCG64(epoch_seed)).permutation(n)
