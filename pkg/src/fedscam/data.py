"""Datasets, IDX files, Dirichlet label-skew partitioning and batch iteration."""
from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    ContractError,
    IdxCountMismatchError,
    IdxMagicError,
    IdxTruncatedError,
)
from .model import Batch

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    classes: int

    def __post_init__(self):
        if len(self.labels) < 1:
            raise ContractError("dataset must hold at least one sample")
        if self.features.shape[0] != len(self.labels):
            raise ContractError("feature rows and label count differ")
        if self.labels.min() < 0 or self.labels.max() >= self.classes:
            raise ContractError(f"labels must lie in [0, {self.classes})")
        if not np.all(np.isfinite(self.features)):
            raise ContractError("features must be finite")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class DirichletSpec:
    alpha: float
    num_clients: int
    min_size: int = 10
    seed: int = 0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError("dirichlet.alpha > 0 is required")
        if self.num_clients < 1:
            raise ConfigError("dirichlet.num_clients >= 1 is required")
        if self.min_size < 0:
            raise ConfigError("dirichlet.min_size >= 0 is required")


@dataclass(frozen=True)
class ClientPartition:
    index_lists: tuple[np.ndarray, ...]

    @property
    def num_clients(self) -> int:
        return len(self.index_lists)

    def sizes(self) -> list[int]:
        return [len(ix) for ix in self.index_lists]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for i, ix in enumerate(self.index_lists):
            h.update(f"client{i}:".encode())
            h.update(np.asarray(ix, dtype="<i8").tobytes())
        return h.hexdigest()


def class_centers(classes: int, dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((classes, dim))
    return centers / np.linalg.norm(centers, axis=1, keepdims=True)


def generate_synthetic(classes: int, dim: int, per_class: int, spread: float, seed: int,
                       center_seed: int | None = None) -> Dataset:
    """Isotropic Gaussian blobs around deterministic unit-norm class centers.

    ``center_seed`` fixes the centers independently of the sampling seed so a
    held-out split can share the same class geometry.
    """
    if classes < 2 or dim < 2 or per_class < 1:
        raise ContractError("generate_synthetic needs classes >= 2, dim >= 2, per_class >= 1")
    if spread < 0:
        raise ContractError("spread must be non-negative")
    centers = class_centers(classes, dim, seed if center_seed is None else center_seed)
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), per_class)
    noise = rng.standard_normal((classes * per_class, dim)) * spread
    features = (centers[labels] + noise).astype(np.float32)
    return Dataset(features, labels.astype(np.int64), classes)


# -- IDX ---------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_header(raw: bytes, path, expected_magic: int, ndim: int) -> tuple[int, ...]:
    if len(raw) < 4:
        raise IdxTruncatedError("file too short for magic number", path, len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxMagicError(
            f"wrong magic 0x{magic:08x}, expected 0x{expected_magic:08x}", path, 0
        )
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise IdxTruncatedError("header truncated", path, len(raw))
    return struct.unpack(f">{ndim}I", raw[4:header_len])


def read_idx_images(path) -> np.ndarray:
    raw = _read_bytes(path)
    count, rows, cols = _parse_header(raw, path, IDX_IMAGES_MAGIC, 3)
    need = 16 + count * rows * cols
    if len(raw) < need:
        raise IdxTruncatedError(
            f"expected {count * rows * cols} pixel bytes, file ends early", path, len(raw)
        )
    return np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols, offset=16).reshape(
        count, rows, cols
    )


def read_idx_labels(path) -> np.ndarray:
    raw = _read_bytes(path)
    (count,) = _parse_header(raw, path, IDX_LABELS_MAGIC, 1)
    if len(raw) < 8 + count:
        raise IdxTruncatedError(f"expected {count} label bytes, file ends early", path, len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=8)


def load_idx(images_path, labels_path, classes: int | None = None) -> Dataset:
    """Load an IDX image/label pair; pixels scaled to [0, 1] and flattened row-major."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels",
            labels_path,
            4,
        )
    features = images.reshape(images.shape[0], -1).astype(np.float32) / np.float32(255.0)
    labels = labels.astype(np.int64)
    if classes is None:
        classes = max(int(labels.max()) + 1, 2)
    return Dataset(features, labels, classes)


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ContractError("IDX images must be a (count, rows, cols) array")
    header = struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape)
    Path(path).write_bytes(header + images.tobytes(order="C"))


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    header = struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0])
    Path(path).write_bytes(header + labels.tobytes())


# -- partitioning -------------------------------------------------------------

def dirichlet_partition(ds: Dataset, spec: DirichletSpec) -> ClientPartition:
    """Per-class Dirichlet split followed by a min-size repair pass.

    For every class the (shuffled) indices are cut at the cumulative
    proportions of one Dir(alpha * 1_M) draw. Clients below ``min_size`` then
    receive single random indices taken from the currently largest client
    (ties go to the lowest client id) until all reach the minimum.
    """
    n, m = len(ds), spec.num_clients
    if n < m * spec.min_size:
        raise ConfigError(
            f"infeasible partition: {n} samples cannot give {m} clients "
            f"min_size={spec.min_size} each"
        )
    rng = np.random.default_rng(spec.seed)
    buckets: list[list[int]] = [[] for _ in range(m)]
    for c in range(ds.classes):
        idx = np.flatnonzero(ds.labels == c)
        if idx.size == 0:
            continue
        rng.shuffle(idx)
        props = rng.dirichlet(np.full(m, spec.alpha))
        cuts = np.round(np.cumsum(props)[:-1] * idx.size).astype(int)
        for i, chunk in enumerate(np.split(idx, cuts)):
            buckets[i].extend(chunk.tolist())

    sizes = np.array([len(b) for b in buckets])
    while sizes.min() < spec.min_size:
        needy = int(np.argmin(sizes))
        donor = int(np.argmax(sizes))
        pos = int(rng.integers(len(buckets[donor])))
        buckets[needy].append(buckets[donor].pop(pos))
        sizes[needy] += 1
        sizes[donor] -= 1
    return ClientPartition(tuple(np.array(sorted(b), dtype=np.int64) for b in buckets))


def label_histograms(ds: Dataset, part: ClientPartition) -> np.ndarray:
    return np.stack(
        [np.bincount(ds.labels[ix], minlength=ds.classes) for ix in part.index_lists]
    )


def label_entropy(hist: np.ndarray) -> float:
    """Shannon entropy (nats) of one client's label histogram."""
    total = hist.sum()
    if total == 0:
        return 0.0
    p = hist[hist > 0] / total
    return float(-(p * np.log(p)).sum())


def mean_label_entropy(ds: Dataset, part: ClientPartition) -> float:
    return float(np.mean([label_entropy(h) for h in label_histograms(ds, part)]))


# -- batching -----------------------------------------------------------------

def batch_iter(ds: Dataset, part: ClientPartition, client: int, batch_size: int,
               epoch_seed: int) -> list[Batch]:
    """Shuffle a client's indices with a (epoch_seed, client) stream and chunk them."""
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    idx = np.array(part.index_lists[client], copy=True)
    np.random.default_rng([int(epoch_seed), int(client)]).shuffle(idx)
    return [
        Batch(ds.features[idx[s:s + batch_size]], ds.labels[idx[s:s + batch_size]])
        for s in range(0, len(idx), batch_size)
    ]
