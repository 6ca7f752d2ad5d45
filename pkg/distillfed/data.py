"""
Datasets and Client Partitioning
Blob synthesis, IDX ingestion, IID and pathological Non-IID partitions
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .config_schema import BlobConfig
from .seeding import Stream, derive_rng

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

PathLike = Union[str, Path]


class IdxFormatError(ValueError):
    """Malformed or inconsistent IDX files"""


class PartitionError(ValueError):
    """A partition request that cannot be satisfied"""


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix with integer class labels in [0, num_classes)"""
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2:
            raise ValueError(f"features must be a matrix, got shape {features.shape}")
        if labels.shape != (features.shape[0],):
            raise ValueError(f"{labels.shape[0]} labels for {features.shape[0]} feature rows")
        if features.shape[0] < 1:
            raise ValueError("a dataset needs at least one point")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "features", _frozen(features))
        object.__setattr__(self, "labels", _frozen(labels))

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: Sequence[int]) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[indices], self.labels[indices], self.num_classes)

    def onehot(self) -> np.ndarray:
        return np.eye(self.num_classes)[self.labels]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True, eq=False)
class Partition:
    """Index lists into a Dataset, one per client, with the label set each client holds"""
    assignments: Tuple[np.ndarray, ...]
    class_sets: Tuple[Tuple[int, ...], ...]
    mode: str = "iid"
    classes_per_client: Optional[int] = None
    max_shard_size: int = 1
    shard_classes: Tuple[Tuple[int, ...], ...] = field(default_factory=tuple)

    @property
    def num_clients(self) -> int:
        return len(self.assignments)

    def client_sizes(self) -> List[int]:
        return [len(a) for a in self.assignments]

    def client_data(self, dataset: Dataset, client_id: int) -> Dataset:
        return dataset.subset(self.assignments[client_id])


def gen_blobs(config: BlobConfig) -> Dataset:
    """Draw points_per_class points around a seeded random center per class"""
    rng = derive_rng(config.seed, Stream.BLOBS)
    s, d, per_class = config.num_classes, config.dim, config.points_per_class
    centers = rng.normal(0.0, config.center_spread, size=(s, d))
    noise = rng.normal(0.0, config.within_std, size=(s, per_class, d))
    features = (centers[:, None, :] + noise).reshape(s * per_class, d)
    labels = np.repeat(np.arange(s), per_class)
    return Dataset(features, labels, s)


def train_test_split(dataset: Dataset, test_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Seeded random split; both sides keep at least one point"""
    n = len(dataset)
    if n < 2:
        raise ValueError("need at least two points to split")
    n_test = min(max(1, int(round(n * test_fraction))), n - 1)
    perm = derive_rng(seed, Stream.SPLIT).permutation(n)
    return dataset.subset(np.sort(perm[n_test:])), dataset.subset(np.sort(perm[:n_test]))


def _read_idx(path: PathLike, expected_magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxFormatError(f"{path}: magic number 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise IdxFormatError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    size = int(np.prod(dims, dtype=np.int64))
    payload = raw[header_len:]
    if len(payload) < size:
        raise IdxFormatError(f"{path}: truncated payload ({len(payload)} of {size} bytes)")
    if len(payload) > size:
        raise IdxFormatError(f"{path}: {len(payload) - size} trailing bytes after payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path: PathLike, labels_path: PathLike,
             num_classes: Optional[int] = None) -> Dataset:
    """Load an IDX image/label pair; pixels are scaled to [0, 1]"""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"item count mismatch: {images.shape[0]} images, {labels.shape[0]} labels")
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    logger.info(f"Loaded {images.shape[0]} IDX items of shape {images.shape[1:]} from {images_path}")
    return Dataset(features, labels, num_classes)


def write_idx(dataset: Dataset, images_path: PathLike, labels_path: PathLike,
              image_shape: Optional[Tuple[int, int]] = None) -> None:
    """Write features (quantized to 8 bits) and labels as an IDX pair"""
    rows, cols = image_shape or (1, dataset.dim)
    if rows * cols != dataset.dim:
        raise ValueError(f"image shape {rows}x{cols} does not match dimension {dataset.dim}")
    if dataset.labels.max() > 255:
        raise ValueError("IDX labels are single bytes")
    n = len(dataset)
    pixels = np.clip(np.rint(dataset.features * 255.0), 0, 255).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + pixels.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, n)
                                  + dataset.labels.astype(np.uint8).tobytes())


def _class_sets(dataset: Dataset, assignments: Sequence[np.ndarray]) -> Tuple[Tuple[int, ...], ...]:
    return tuple(tuple(int(c) for c in np.unique(dataset.labels[a])) for a in assignments)


def partition_iid(dataset: Dataset, m: int, seed: int) -> Partition:
    """Shuffle indices by seed and deal them round-robin to m clients"""
    n = len(dataset)
    if m < 1:
        raise PartitionError("need at least one client")
    if m > n:
        raise PartitionError(f"cannot give {m} clients a point each from {n} points")
    perm = derive_rng(seed, Stream.PARTITION).permutation(n)
    assignments = tuple(_frozen(np.sort(perm[k::m])) for k in range(m))
    return Partition(assignments, _class_sets(dataset, assignments), mode="iid")


def partition_pathological(dataset: Dataset, m: int, c_k: int, seed: int) -> Partition:
    """
    Give each of m clients exactly c_k classes by shard dealing

    Indices are grouped by label, every class is cut into single-class shards
    (m*c_k in total, spread over classes as evenly as possible, later shards of a
    class absorb the remainder) and shard j goes to client j mod m. A class never
    owns more than m shards, so no client receives two shards of one class.
    """
    s = dataset.num_classes
    if m < 1:
        raise PartitionError("need at least one client")
    if c_k < 1 or c_k > s:
        raise PartitionError(f"classes per client must lie in [1, {s}], got {c_k}")
    num_shards = m * c_k
    if num_shards < s:
        raise PartitionError(
            f"{m} clients x {c_k} classes = {num_shards} shards cannot cover {s} classes")
    counts = dataset.class_counts()
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise PartitionError(f"classes without points: {empty.tolist()}")

    rng = derive_rng(seed, Stream.PARTITION)
    base, extra = divmod(num_shards, s)
    shards_per_class = np.full(s, base, dtype=np.int64)
    shards_per_class[rng.choice(s, size=extra, replace=False)] += 1
    short = np.flatnonzero(counts < shards_per_class)
    if short.size:
        raise PartitionError(
            f"insufficient points for shards in classes {short.tolist()} "
            f"(points {counts[short].tolist()}, shards {shards_per_class[short].tolist()})")

    shards: List[Tuple[int, np.ndarray]] = []
    for c in rng.permutation(s):
        idx = rng.permutation(np.flatnonzero(dataset.labels == c))
        k = int(shards_per_class[c])
        q, r = divmod(len(idx), k)
        sizes = [q + (1 if j >= k - r else 0) for j in range(k)]
        for piece in np.split(idx, np.cumsum(sizes)[:-1]):
            shards.append((int(c), piece))

    client_order = rng.permutation(m)
    owned: List[List[np.ndarray]] = [[] for _ in range(m)]
    owned_classes: List[List[int]] = [[] for _ in range(m)]
    for j, (c, piece) in enumerate(shards):
        client = int(client_order[j % m])
        owned[client].append(piece)
        owned_classes[client].append(c)

    assignments = tuple(_frozen(np.sort(np.concatenate(pieces))) for pieces in owned)
    return Partition(
        assignments,
        _class_sets(dataset, assignments),
        mode="pathological",
        classes_per_client=c_k,
        max_shard_size=max(len(piece) for _, piece in shards),
        shard_classes=tuple(tuple(sorted(cs)) for cs in owned_classes),
    )


def make_partition(dataset: Dataset, mode: str, m: int, c_k: int, seed: int) -> Partition:
    if mode == "iid":
        return partition_iid(dataset, m, seed)
    if mode == "pathological":
        return partition_pathological(dataset, m, c_k, seed)
    raise PartitionError(f"unknown partition mode: {mode}")
