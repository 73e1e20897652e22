"""Dataset ingestion and the non-iid client partitioners.

Supported sources: big-endian IDX image/label pairs, CIFAR-10 binary batches
(3073-byte records), and a deterministic synthetic Gaussian-blob corpus. All
pixel data is scaled to [0, 1] float32 with no further standardization.
"""

from __future__ import annotations

import gzip
import logging
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, FormatError

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073
SYNTHETIC_MAGIC = b"SYNB"


@dataclass
class LabeledDataset:
    """Images (count, channels, height, width) in [0, 1] plus integer labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be 4-d, got shape {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise FormatError(
                f"image count {len(self.images)} does not match label count {len(self.labels)}"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise FormatError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]


@dataclass(frozen=True)
class ClientShard:
    """One client's private view: an index set into a shared dataset."""

    client_id: int
    indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        object.__setattr__(self, "indices", idx)
        if idx.size == 0:
            raise ConfigurationError(f"client {self.client_id} received an empty shard")
        if len(np.unique(idx)) != idx.size:
            raise ConfigurationError(f"client {self.client_id} shard repeats indices")

    @property
    def n_c(self) -> int:
        return int(self.indices.size)


@dataclass(frozen=True)
class Pathological:
    """Each client sees a few classes with a handful of images per class."""

    num_clients: int
    classes_per_client: int
    images_per_class: int


@dataclass(frozen=True)
class Dirichlet:
    """Per-class sample allocation by Dirichlet(beta) proportions."""

    num_clients: int
    beta: float


def _read_exact(fh, count: int, path, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise FormatError(f"{path}: truncated {what} at byte offset {fh.tell() - len(data)}")
    return data


def _open_maybe_gzip(path):
    fh = open(path, "rb")
    head = fh.read(2)
    fh.seek(0)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return fh


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Parse a big-endian IDX image/label file pair (plain or gzipped)."""
    with _open_maybe_gzip(images_path) as fh:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, images_path, "header"))
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(f"{images_path}: bad magic 0x{magic:08x} at byte offset 0, "
                              f"expected 0x{IDX_IMAGES_MAGIC:08x}")
        raw = _read_exact(fh, count * rows * cols, images_path, "pixel data")
        pixels = np.frombuffer(raw, dtype=np.uint8).reshape(count, 1, rows, cols)
    with _open_maybe_gzip(labels_path) as fh:
        magic, label_count = struct.unpack(">II", _read_exact(fh, 8, labels_path, "header"))
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(f"{labels_path}: bad magic 0x{magic:08x} at byte offset 0, "
                              f"expected 0x{IDX_LABELS_MAGIC:08x}")
        labels = np.frombuffer(_read_exact(fh, label_count, labels_path, "label data"), dtype=np.uint8)
    if label_count != count:
        raise FormatError(f"image count {count} does not match label count {label_count}")
    return LabeledDataset(pixels.astype(np.float32) / 255.0, labels.astype(np.int64), 10)


def write_idx_images(path, images_u8: np.ndarray) -> None:
    """Serialize (count, rows, cols) uint8 images back to IDX bytes."""
    count, rows, cols = images_u8.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, count, rows, cols))
        fh.write(np.ascontiguousarray(images_u8, dtype=np.uint8).tobytes())


def write_idx_labels(path, labels_u8: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels_u8)))
        fh.write(np.ascontiguousarray(labels_u8, dtype=np.uint8).tobytes())


def load_cifar10_bin(batch_paths) -> LabeledDataset:
    """Parse CIFAR-10 binary batches: 1 label byte + 3072 pixel bytes per record."""
    images = []
    labels = []
    for path in batch_paths:
        with open(path, "rb") as fh:
            raw = fh.read()
        if len(raw) % CIFAR_RECORD_BYTES != 0:
            raise FormatError(f"{path}: file length {len(raw)} is not a multiple of {CIFAR_RECORD_BYTES}")
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        labels.append(records[:, 0])
        images.append(records[:, 1:].reshape(-1, 3, 32, 32))
    pixels = np.concatenate(images)
    return LabeledDataset(pixels.astype(np.float32) / 255.0,
                          np.concatenate(labels).astype(np.int64), 10)


def write_cifar10_bin(path, images_u8: np.ndarray, labels_u8: np.ndarray) -> None:
    records = np.empty((len(labels_u8), CIFAR_RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = labels_u8
    records[:, 1:] = images_u8.reshape(len(labels_u8), -1)
    with open(path, "wb") as fh:
        fh.write(records.tobytes())


def synthetic_blobs(num_classes: int, per_class: int, dims: int, separation: float,
                    seed: int, image_shape=None) -> LabeledDataset:
    """Gaussian clusters with class-dependent means, squashed into [0, 1].

    With separation 0 every class shares the same distribution; large values
    give linearly separable classes. Deterministic for a fixed seed.
    """
    if num_classes < 1 or per_class < 1 or dims < 1:
        raise ConfigurationError("num_classes, per_class, and dims must be positive")
    if image_shape is None:
        image_shape = (1, 1, dims)
    if int(np.prod(image_shape)) != dims:
        raise ConfigurationError(f"image shape {image_shape} does not hold {dims} values")
    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((num_classes, dims))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = separation * directions
    feats = np.repeat(means, per_class, axis=0) + rng.standard_normal((num_classes * per_class, dims))
    images = 1.0 / (1.0 + np.exp(-feats))
    labels = np.repeat(np.arange(num_classes), per_class)
    return LabeledDataset(images.reshape(-1, *image_shape).astype(np.float32),
                          labels, num_classes)


def save_synthetic(path, ds: LabeledDataset) -> None:
    """Write the length-prefixed synthetic corpus format.

    Layout: magic b'SYNB', then five big-endian u32 fields (count, channels,
    height, width, num_classes), then count*channels*height*width float32
    pixel values (big-endian), then count label bytes.
    """
    c, h, w = ds.sample_shape
    with open(path, "wb") as fh:
        fh.write(SYNTHETIC_MAGIC)
        fh.write(struct.pack(">IIIII", len(ds), c, h, w, ds.num_classes))
        fh.write(ds.images.astype(">f4").tobytes())
        fh.write(ds.labels.astype(np.uint8).tobytes())


def load_synthetic(path) -> LabeledDataset:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, path, "magic")
        if magic != SYNTHETIC_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r} at byte offset 0")
        count, c, h, w, num_classes = struct.unpack(">IIIII", _read_exact(fh, 20, path, "header"))
        pixels = np.frombuffer(_read_exact(fh, count * c * h * w * 4, path, "pixel data"), dtype=">f4")
        labels = np.frombuffer(_read_exact(fh, count, path, "label data"), dtype=np.uint8)
    return LabeledDataset(pixels.reshape(count, c, h, w).astype(np.float32),
                          labels.astype(np.int64), num_classes)


class _ClassPool:
    """Deals distinct sample indices of one class, reshuffling when drained."""

    def __init__(self, indices: np.ndarray, rng: np.random.Generator, label: int):
        self.all_indices = indices
        self.rng = rng
        self.label = label
        self.queue = list(rng.permutation(indices))
        self.wrapped = False

    def take(self, k: int) -> list[int]:
        if k > len(self.all_indices):
            raise ConfigurationError(
                f"class {self.label} holds {len(self.all_indices)} samples, cannot deal {k}"
            )
        if len(self.queue) < k:
            # leftover partials are dropped so one client never sees a repeat
            if not self.wrapped:
                log.warning("class %d pool exhausted; continuing with replacement across clients",
                            self.label)
                self.wrapped = True
            self.queue = list(self.rng.permutation(self.all_indices))
        out = self.queue[:k]
        del self.queue[:k]
        return out


def partition_pathological(ds: LabeledDataset, spec: Pathological, seed: int) -> list[ClientShard]:
    """Give each client a few classes and a few images from each.

    Class sets are assigned round-robin over a seeded shuffle of the classes
    so every class serves roughly the same number of clients; images are
    dealt without replacement from per-class pools until a pool runs dry.
    """
    if spec.num_clients < 1 or spec.classes_per_client < 1 or spec.images_per_class < 1:
        raise ConfigurationError("partition parameters must be positive")
    if spec.classes_per_client > ds.num_classes:
        raise ConfigurationError(
            f"cannot assign {spec.classes_per_client} classes from {ds.num_classes}"
        )
    rng = np.random.default_rng(seed)
    class_order = rng.permutation(ds.num_classes)
    pools = {c: _ClassPool(np.flatnonzero(ds.labels == c), rng, c) for c in range(ds.num_classes)}
    for c, pool in pools.items():
        if len(pool.all_indices) < spec.images_per_class:
            raise ConfigurationError(
                f"class {c} has {len(pool.all_indices)} samples, fewer than "
                f"images_per_class={spec.images_per_class}"
            )
    shards = []
    slot = 0
    for cid in range(spec.num_clients):
        indices: list[int] = []
        for _ in range(spec.classes_per_client):
            cls = int(class_order[slot % ds.num_classes])
            slot += 1
            indices.extend(pools[cls].take(spec.images_per_class))
        shards.append(ClientShard(cid, np.array(indices, dtype=np.int64)))
    return shards


def partition_dirichlet(ds: LabeledDataset, num_clients: int, beta: float,
                        seed: int) -> list[ClientShard]:
    """Distribute each class over clients by Dirichlet(beta) proportions.

    Every sample is assigned exactly once (largest-remainder rounding); a
    client that ends up empty is re-seeded with one sample from the largest
    shard.
    """
    if beta <= 0:
        raise ConfigurationError("beta must be positive")
    if num_clients < 1:
        raise ConfigurationError("num_clients must be positive")
    rng = np.random.default_rng(seed)
    assigned: list[list[int]] = [[] for _ in range(num_clients)]
    for c in range(ds.num_classes):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        if idx.size == 0:
            continue
        props = rng.dirichlet(np.full(num_clients, beta))
        exact = props * idx.size
        counts = np.floor(exact).astype(int)
        remainder = idx.size - counts.sum()
        if remainder:
            extra = np.argsort(-(exact - counts), kind="stable")[:remainder]
            counts[extra] += 1
        offsets = np.concatenate([[0], np.cumsum(counts)])
        for cid in range(num_clients):
            assigned[cid].extend(idx[offsets[cid]:offsets[cid + 1]].tolist())
    largest = max(range(num_clients), key=lambda cid: len(assigned[cid]))
    for cid in range(num_clients):
        if not assigned[cid]:
            largest = max(range(num_clients), key=lambda j: len(assigned[j]))
            assigned[cid].append(assigned[largest].pop())
    return [ClientShard(cid, np.array(ix, dtype=np.int64)) for cid, ix in enumerate(assigned)]


def split_shard_validation(shards, fraction: float = 0.2):
    """Hold out the tail of each shard for per-client validation.

    Returns (train_shards, val_shards); every client keeps at least one
    training sample.
    """
    train, val = [], []
    for s in shards:
        n_val = min(int(round(s.n_c * fraction)), s.n_c - 1)
        if n_val <= 0:
            train.append(s)
            val.append(None)
            continue
        train.append(ClientShard(s.client_id, s.indices[:-n_val]))
        val.append(ClientShard(s.client_id, s.indices[-n_val:]))
    return train, val
