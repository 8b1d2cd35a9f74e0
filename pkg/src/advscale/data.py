"""Dataset ingestion and generation.

Pixels are stored as float64 in [0, 255] from the moment of ingestion;
attacks later produce fractional pixels and nothing ever re-quantizes
to bytes.  Datasets are immutable after construction and safe to share.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IMAGES_MAGIC = 2051  # 0x00000803
LABELS_MAGIC = 2049  # 0x00000801


class IdxFormatError(ValueError):
    """Base for IDX parse failures."""


class WrongMagicError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray  # (n, *shape), float64 pixels in [0, 255]
    labels: np.ndarray  # (n,), int64 class indices
    n_classes: int
    split: str = "train"

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ValueError(
                f"{len(self.inputs)} inputs but {len(self.labels)} labels"
            )
        if len(self.labels) and (
            self.labels.min() < 0 or self.labels.max() >= self.n_classes
        ):
            raise ValueError(f"labels outside [0, {self.n_classes})")
        if len(self.inputs) and (
            self.inputs.min() < 0.0 or self.inputs.max() > 255.0
        ):
            raise ValueError("pixels outside [0, 255]")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int, split: str | None = None) -> "Dataset":
        """First n examples (already-shuffled files keep this unbiased)."""
        return Dataset(
            self.inputs[:n], self.labels[:n], self.n_classes, split or self.split
        )


def _read_exact(f, count: int, path, what: str) -> bytes:
    buf = f.read(count)
    if len(buf) != count:
        raise TruncatedFileError(
            f"{path}: expected {count} bytes for {what}, got {len(buf)}"
        )
    return buf


def _parse_idx(path, expected_magic: int) -> np.ndarray:
    with open(path, "rb") as f:
        (magic,) = struct.unpack(">I", _read_exact(f, 4, path, "magic"))
        if magic != expected_magic:
            raise WrongMagicError(
                f"{path}: magic {magic} (0x{magic:08x}), expected {expected_magic}"
            )
        ndim = magic & 0xFF
        dims = struct.unpack(
            f">{ndim}I", _read_exact(f, 4 * ndim, path, "dimension sizes")
        )
        count = int(np.prod(dims))
        raw = _read_exact(f, count, path, f"{count} data bytes")
        extra = f.read(1)
        if extra:
            raise IdxFormatError(f"{path}: trailing bytes after declared data")
    return np.frombuffer(raw, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, n_classes: int = 10, split: str = "train") -> Dataset:
    """Parse an IDX image/label file pair (big-endian magic 2051 / 2049,
    then 32-bit dimension sizes, then unsigned bytes).  Pixel bytes become
    floats in [0, 255]."""
    images = _parse_idx(images_path, IMAGES_MAGIC)
    labels = _parse_idx(labels_path, LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    return Dataset(
        images.astype(np.float64), labels.astype(np.int64), n_classes, split
    )


def write_idx(images_path, labels_path, inputs: np.ndarray, labels: np.ndarray) -> None:
    """Inverse of load_idx (images rounded to bytes); lets tests round-trip
    the parser bit-exactly and materialize generated datasets on disk."""
    inputs = np.asarray(inputs)
    labels = np.asarray(labels)
    img_bytes = np.clip(np.rint(inputs), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">I", IMAGES_MAGIC))
        f.write(struct.pack(f">{inputs.ndim}I", *inputs.shape))
        f.write(img_bytes.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">I", LABELS_MAGIC))
        f.write(struct.pack(">I", len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


@dataclass(frozen=True)
class SynthConfig:
    """Gaussian class clusters in pixel space (a stand-in for random data).

    Class means sit at the vertices of a regular simplex with edge length
    `separation`, centered at pixel value 128; samples are clipped into
    [0, 255].  Needs dims >= n_classes.
    """

    n_classes: int
    dims: int
    per_class: int
    separation: float
    std: float
    seed: int = 0

    def __post_init__(self):
        if min(self.n_classes, self.dims, self.per_class) <= 0:
            raise ValueError("n_classes, dims and per_class must be positive")
        if self.separation <= 0 or self.std <= 0:
            raise ValueError("separation and std must be positive")
        if self.dims < self.n_classes:
            raise ValueError("need dims >= n_classes to place the simplex")


def synth_blobs(cfg: SynthConfig, split: str = "train") -> Dataset:
    rng = np.random.default_rng(cfg.seed)
    k, d = cfg.n_classes, cfg.dims
    # e_i * sep/sqrt(2) gives exact pairwise distance `separation`
    means = np.zeros((k, d))
    means[np.arange(k), np.arange(k)] = cfg.separation / np.sqrt(2.0)
    means += 128.0 - means.mean(axis=0)
    xs = []
    ys = []
    for c in range(k):
        pts = rng.normal(means[c], cfg.std, size=(cfg.per_class, d))
        xs.append(np.clip(pts, 0.0, 255.0))
        ys.append(np.full(cfg.per_class, c, dtype=np.int64))
    return Dataset(np.concatenate(xs), np.concatenate(ys), k, split)


def shuffle_labels(data: Dataset, seed: int) -> Dataset:
    """Uniform-random permutation of the labels; inputs untouched."""
    if len(data) == 0:
        raise ValueError("cannot shuffle labels of an empty dataset")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(data))
    return Dataset(data.inputs, data.labels[perm], data.n_classes, data.split)
