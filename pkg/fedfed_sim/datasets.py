import logging
import struct
import sys
from dataclasses import dataclass

import numpy as np

from fedfed_sim.errors import (
    ConsistencyError,
    DimensionError,
    DomainError,
    FormatError,
    InfeasibleError,
)

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)
logger.addHandler(logging.StreamHandler(sys.stderr))

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class LabeledDataset:
    """
    Feature matrix in [0, 1] with integer labels in [0, num_classes)
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DimensionError(f"Features must be a matrix, got shape {self.features.shape}")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ConsistencyError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels"
            )
        if self.num_classes < 1:
            raise DomainError(f"num_classes must be >= 1, got {self.num_classes}")
        if len(self.labels) > 0 and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DomainError(f"Labels must lie in [0, {self.num_classes})")
        if self.features.size > 0 and (self.features.min() < 0.0 or self.features.max() > 1.0):
            raise DomainError("Features must lie in [0, 1]; rescale the data first")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self):
        return self.features.shape[1]

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[indices], self.labels[indices], self.num_classes)


@dataclass(frozen=True)
class Lda:
    alpha: float


@dataclass(frozen=True)
class LabelsPerClient:
    k: int


@dataclass(frozen=True)
class Subset:
    dominant_fraction: float


@dataclass(frozen=True)
class PartitionSpec:
    method: object
    num_clients: int
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise DomainError(f"num_clients must be >= 1, got {self.num_clients}")
        if isinstance(self.method, Lda):
            if not self.method.alpha > 0:
                raise DomainError(f"Dirichlet alpha must be > 0, got {self.method.alpha}")
        elif isinstance(self.method, LabelsPerClient):
            if self.method.k < 1:
                raise DomainError(f"Labels per client must be >= 1, got {self.method.k}")
        elif isinstance(self.method, Subset):
            if not 0 < self.method.dominant_fraction <= 1:
                raise DomainError(
                    f"dominant_fraction must lie in (0, 1], got {self.method.dominant_fraction}"
                )
        else:
            raise DomainError(f"Unknown partition method: {self.method!r}")


@dataclass
class PartitionResult:
    assignments: list

    def client_datasets(self, data):
        return [data.subset(idx) for idx in self.assignments]


def rescale_unit_interval(raw):
    """
    Per-column min-max map onto [0, 1]. Constant columns map to 0
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.size == 0:
        raise DomainError(f"Cannot rescale an empty matrix (shape {raw.shape})")
    if not np.all(np.isfinite(raw)):
        raise DomainError("Cannot rescale a matrix with non-finite values")
    col_min = raw.min(axis=0)
    col_range = raw.max(axis=0) - col_min
    constant = col_range == 0.0
    scaled = (raw - col_min) / np.where(constant, 1.0, col_range)
    scaled[:, constant] = 0.0
    return np.clip(scaled, 0.0, 1.0)


def partition(data, spec):
    """
    Splits the dataset indices across spec.num_clients clients. Deterministic given spec.seed
    :param LabeledDataset data: dataset to split
    :param PartitionSpec spec: method, client count and seed
    """
    n = len(data)
    num_clients = spec.num_clients
    if n < num_clients:
        raise InfeasibleError(f"Cannot split {n} samples across {num_clients} clients")
    rng = np.random.default_rng(spec.seed)
    method = spec.method
    if isinstance(method, Lda):
        assignments = _partition_lda(data.labels, data.num_classes, num_clients, method.alpha, rng)
    elif isinstance(method, LabelsPerClient):
        assignments = _partition_labels_per_client(data.labels, data.num_classes, num_clients, method.k, rng)
    else:
        if not method.dominant_fraction > 1.0 / data.num_classes:
            raise DomainError(
                f"dominant_fraction must exceed 1/C = {1.0 / data.num_classes:.4f}, got {method.dominant_fraction}"
            )
        assignments = _partition_subset(data.labels, data.num_classes, num_clients, method.dominant_fraction, rng)
    _repair_empty_clients(assignments)
    result = PartitionResult([np.sort(np.asarray(a, dtype=np.int64)) for a in assignments])
    logger.debug(f"Partition sizes: {[len(a) for a in result.assignments]}")
    return result


def _partition_lda(labels, num_classes, num_clients, alpha, rng):
    assignments = [[] for _ in range(num_clients)]
    for c in range(num_classes):
        idx_c = np.flatnonzero(labels == c)
        if len(idx_c) == 0:
            continue
        rng.shuffle(idx_c)
        proportions = rng.dirichlet(np.repeat(alpha, num_clients))
        cuts = (np.cumsum(proportions) * len(idx_c)).astype(int)[:-1]
        for client_id, part in enumerate(np.split(idx_c, cuts)):
            assignments[client_id].extend(part.tolist())
    return assignments


def _partition_labels_per_client(labels, num_classes, num_clients, k, rng):
    if k > num_classes:
        raise DomainError(f"Cannot give each client {k} labels out of {num_classes} classes")
    if num_clients * k < num_classes:
        raise InfeasibleError(
            f"{num_clients} clients with {k} labels each cannot cover {num_classes} classes"
        )
    label_order = rng.permutation(num_classes)
    owners = [[] for _ in range(num_classes)]
    for client_id in range(num_clients):
        for j in range(k):
            owners[label_order[(client_id * k + j) % num_classes]].append(client_id)
    assignments = [[] for _ in range(num_clients)]
    for c in range(num_classes):
        idx_c = np.flatnonzero(labels == c)
        rng.shuffle(idx_c)
        for owner, part in zip(owners[c], np.array_split(idx_c, len(owners[c]))):
            assignments[owner].extend(part.tolist())
    return assignments


def _partition_subset(labels, num_classes, num_clients, dominant_fraction, rng):
    n = len(labels)
    base, remainder = divmod(n, num_clients)
    quotas = [base + (1 if i < remainder else 0) for i in range(num_clients)]
    pools = []
    for c in range(num_classes):
        idx_c = np.flatnonzero(labels == c)
        rng.shuffle(idx_c)
        pools.append(list(idx_c))
    assignments = [[] for _ in range(num_clients)]
    # dominant shares are taken, in client-id order, before the uniform remainder is dealt
    for client_id in range(num_clients):
        pool = pools[client_id % num_classes]
        want = min(int(np.floor(dominant_fraction * quotas[client_id])), len(pool))
        assignments[client_id].extend(pool[:want])
        del pool[:want]
    rest = np.array([i for pool in pools for i in pool], dtype=np.int64)
    rng.shuffle(rest)
    offset = 0
    for client_id in range(num_clients):
        need = quotas[client_id] - len(assignments[client_id])
        assignments[client_id].extend(rest[offset : offset + need].tolist())
        offset += need
    return assignments


def _repair_empty_clients(assignments):
    for client_id, indices in enumerate(assignments):
        if len(indices) > 0:
            continue
        donor = max(range(len(assignments)), key=lambda i: (len(assignments[i]), -i))
        indices.append(assignments[donor].pop())
        logger.warning(f"Client {client_id} received no samples; moved one sample from client {donor}")


def class_histogram(data, result):
    """
    Per-client label counts, the body of the partition report
    """
    return [np.bincount(data.labels[idx], minlength=data.num_classes).tolist() for idx in result.assignments]


def label_entropy(counts):
    """
    Shannon entropy (nats) of a label-count vector; 0 for an empty client
    """
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(-np.sum(p * np.log(p)))


def synthesize_blobs(num_classes, dim, per_class, spread, seed):
    """
    Gaussian blobs around seeded centers in [0.2, 0.8]^dim, rescaled onto [0, 1]
    """
    if num_classes < 1 or dim < 1 or per_class < 1:
        raise DomainError(
            f"num_classes, dim and per_class must be >= 1, got {num_classes}, {dim}, {per_class}"
        )
    if not spread > 0:
        raise DomainError(f"spread must be > 0, got {spread}")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.2, 0.8, size=(num_classes, dim))
    raw = np.concatenate(
        [centers[c] + rng.normal(0.0, spread, size=(per_class, dim)) for c in range(num_classes)]
    )
    labels = np.repeat(np.arange(num_classes), per_class)
    return LabeledDataset(rescale_unit_interval(raw), labels, num_classes)


def train_test_split(data, test_fraction, seed):
    """
    Seeded random holdout; returns (train, test)
    """
    if not 0 < test_fraction < 1:
        raise DomainError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n = len(data)
    order = np.random.default_rng(seed).permutation(n)
    num_test = max(1, int(round(test_fraction * n)))
    if num_test >= n:
        raise InfeasibleError(f"Cannot hold out {num_test} of {n} samples")
    return data.subset(np.sort(order[num_test:])), data.subset(np.sort(order[:num_test]))


def _read_exact(f, size, path):
    chunk = f.read(size)
    if len(chunk) != size:
        raise FormatError(f"File {path} is truncated")
    return chunk


def load_idx(images_path, labels_path, num_classes=None):
    """
    Reads an IDX image/label pair (MNIST layout, big-endian header)
    https://web.archive.org/web/2020/http://yann.lecun.com/exdb/mnist/
    :param str images_path: path of the idx3-ubyte image file
    :param str labels_path: path of the idx1-ubyte label file
    :param int num_classes: defaults to max label + 1
    """
    with open(images_path, "rb") as f:
        magic, num_images, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, images_path))
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(f"Bad magic number {magic:#010x} in {images_path}")
        pixels = np.frombuffer(_read_exact(f, num_images * rows * cols, images_path), dtype=np.uint8)
    with open(labels_path, "rb") as f:
        magic, num_labels = struct.unpack(">II", _read_exact(f, 8, labels_path))
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(f"Bad magic number {magic:#010x} in {labels_path}")
        labels = np.frombuffer(_read_exact(f, num_labels, labels_path), dtype=np.uint8)
    if num_images != num_labels:
        raise ConsistencyError(f"{num_images} images but {num_labels} labels")
    features = pixels.reshape(num_images, rows * cols).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if len(labels) > 0 else 1
    logger.info(f"Loaded {num_images} images of {rows}x{cols} from {images_path}")
    return LabeledDataset(features, labels, num_classes)


def load_csv(path, num_classes=None):
    """
    Reads a CSV with header f0..f{d-1},label and rescales the feature columns onto [0, 1]
    """
    with open(path, "r") as f:
        header = f.readline().strip().split(",")
    dim = len(header) - 1
    expected = [f"f{i}" for i in range(dim)] + ["label"]
    if header != expected:
        raise FormatError(f"CSV header of {path} must be f0..f{dim - 1},label, got {','.join(header)}")
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if table.shape[0] == 0:
        raise FormatError(f"CSV {path} has no rows")
    labels = table[:, -1]
    if not np.all(labels == np.round(labels)):
        raise FormatError(f"CSV {path} has non-integer labels")
    labels = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    return LabeledDataset(rescale_unit_interval(table[:, :-1]), labels, num_classes)
