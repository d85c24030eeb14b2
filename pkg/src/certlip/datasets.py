"""Synthetic generators, IDX ingestion and deterministic batching.

Low-dimensional synthetic features are stored as ``(N, 1, 1, d)`` maps so the
convolutional stem applies unchanged.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class IDXError(ValueError):
    pass


class BadMagicError(IDXError):
    pass


class TruncatedError(IDXError):
    pass


class CountMismatchError(IDXError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "all"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) == 0:
            raise ValueError("empty dataset")
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs / labels length mismatch")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("labels out of range")
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("non-finite inputs")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def subset(self, idx, split: str) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes, split, dict(self.meta))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        flat = self.inputs.reshape(len(self), -1)
        w.writerow([f"x{i}" for i in range(flat.shape[1])] + ["label"])
        for row, lab in zip(flat, self.labels):
            w.writerow([repr(float(v)) for v in row] + [int(lab)])
        return buf.getvalue()


@dataclass(frozen=True)
class BlobSpec:
    num_classes: int
    dim: int
    separation: float
    per_class: int
    noise: float
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.separation <= 0:
            raise ValueError("separation must be positive")
        if self.per_class < 1:
            raise ValueError("per_class must be positive")


def _as_maps(x: np.ndarray) -> np.ndarray:
    return x.reshape(len(x), 1, 1, x.shape[1])


def blob_centers(spec: BlobSpec) -> np.ndarray:
    """Seeded centers with every pairwise distance at least ``separation``."""
    rng = np.random.default_rng([spec.seed, 1])
    k, d, s = spec.num_classes, spec.dim, spec.separation
    scale = s * max(1.0, k ** (1.0 / d))
    centers: list[np.ndarray] = []
    tries = 0
    while len(centers) < k:
        c = rng.uniform(-scale, scale, d)
        if all(np.linalg.norm(c - o) >= s for o in centers):
            centers.append(c)
            tries = 0
        else:
            tries += 1
            if tries > 1000:
                scale *= 1.25
                tries = 0
    return np.array(centers)


def gen_gaussian_blobs(spec: BlobSpec) -> Dataset:
    centers = blob_centers(spec)
    rng = np.random.default_rng([spec.seed, 2])
    labels = np.repeat(np.arange(spec.num_classes), spec.per_class)
    x = centers[labels] + spec.noise * rng.standard_normal((len(labels), spec.dim))
    perm = rng.permutation(len(labels))
    return Dataset(_as_maps(x[perm]), labels[perm], spec.num_classes, "all",
                   {"kind": "blobs", "centers": centers})


def gen_concentric_rings(k: int, n: int, radii, noise: float, seed: int = 0) -> Dataset:
    """``n`` points per class on ``k`` circles in the plane with radial noise."""
    radii = np.asarray(radii, dtype=float)
    if n < 1:
        raise ValueError("n must be positive")
    if len(radii) != k:
        raise ValueError("need one radius per class")
    if np.any(np.diff(radii) <= 4 * noise):
        raise ValueError("radii must increase with gaps larger than 4 * noise")
    rng = np.random.default_rng([seed, 3])
    labels = np.repeat(np.arange(k), n)
    theta = rng.uniform(0, 2 * np.pi, len(labels))
    r = radii[labels] + noise * rng.standard_normal(len(labels))
    x = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    perm = rng.permutation(len(labels))
    return Dataset(_as_maps(x[perm]), labels[perm], k, "all", {"kind": "rings"})


def train_test_split(ds: Dataset, frac: float = 0.8) -> tuple[Dataset, Dataset]:
    """Deterministic head/tail split; generators already shuffle."""
    cut = int(round(frac * len(ds)))
    return ds.subset(slice(0, cut), "train"), ds.subset(slice(cut, None), "test")


def _read_idx(path: Path, magic: int) -> tuple[tuple[int, ...], bytes]:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise TruncatedError(f"{path}: truncated header")
    (m,) = struct.unpack(">I", data[:4])
    if m != magic:
        raise BadMagicError(f"{path}: magic 0x{m:08x}, expected 0x{magic:08x}")
    rank = magic & 0xFF
    if len(data) < 4 + 4 * rank:
        raise TruncatedError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{rank}I", data[4 : 4 + 4 * rank])
    body = data[4 + 4 * rank :]
    if len(body) != int(np.prod(dims)):
        raise TruncatedError(f"{path}: expected {int(np.prod(dims))} data bytes, got {len(body)}")
    return dims, body


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Read an IDX image/label pair; pixels are scaled to [0, 1]."""
    dims, body = _read_idx(images_path, 0x00000803)
    (count,), lbody = _read_idx(labels_path, 0x00000801)
    if count != dims[0]:
        raise CountMismatchError(f"{dims[0]} images but {count} labels")
    x = np.frombuffer(body, dtype=np.uint8).reshape(dims[0], 1, dims[1], dims[2]).astype(np.float64) / 255.0
    y = np.frombuffer(lbody, dtype=np.uint8).astype(np.int64)
    m = num_classes if num_classes is not None else int(y.max()) + 1
    return Dataset(x, y, m, "all", {"kind": "idx", "scale": 1.0 / 255.0})


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, h, w = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", 0x00000803, n, h, w) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", 0x00000801, n) + np.asarray(labels, dtype=np.uint8).tobytes())


def batches(ds: Dataset, batch_size: int, shuffle: bool = True, seed: int = 0, epoch: int = 0):
    """Yield ``(inputs, labels)``; the order is a pure function of ``(seed, epoch)``."""
    n = len(ds)
    order = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield ds.inputs[idx], ds.labels[idx]
