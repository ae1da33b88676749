"""Synthetic classification task, trigger-set construction and IID partitioning.

The task is a Gaussian mixture: one component per class, centred on a scaled
simplex vertex, with a fixed number of sub-clusters inside each class. The
sub-cluster structure is what makes "semantic" triggers possible: a trigger is
a natural subpopulation of a class, not a feature modification.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TAG_BENIGN = 0
TAG_TRIGGER = 1

_TAG_NAMES = {TAG_BENIGN: "benign", TAG_TRIGGER: "trigger"}

_DATASET_MAGIC = b"FUDS"
_DATASET_VERSION = 1


@dataclass(frozen=True)
class LabeledExample:
    features: np.ndarray
    label: int
    tag: int = TAG_BENIGN


class DatasetSlice:
    """Ordered collection of labeled examples, stored columnar.

    ``features`` is (N, d) float64, ``labels`` (N,) int64, ``tags`` (N,) uint8.
    Instances are treated as immutable; all operations return new slices.
    """

    __slots__ = ("features", "labels", "tags")

    def __init__(self, features: np.ndarray, labels: np.ndarray, tags: np.ndarray | None = None):
        features = np.ascontiguousarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if features.ndim != 2:
            raise ValueError("features must be a 2-D array")
        if labels.shape != (features.shape[0],):
            raise ValueError("labels length must match number of feature rows")
        if tags is None:
            tags = np.zeros(features.shape[0], dtype=np.uint8)
        else:
            tags = np.asarray(tags, dtype=np.uint8)
            if tags.shape != labels.shape:
                raise ValueError("tags length must match labels length")
        self.features = features
        self.labels = labels
        self.tags = tags
        for a in (self.features, self.labels, self.tags):
            a.setflags(write=False)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def examples(self) -> list[LabeledExample]:
        return [
            LabeledExample(self.features[i], int(self.labels[i]), int(self.tags[i]))
            for i in range(len(self))
        ]

    def subset(self, indices) -> "DatasetSlice":
        idx = np.asarray(indices)
        return DatasetSlice(self.features[idx], self.labels[idx], self.tags[idx])

    def relabeled(self, label: int, tag: int = TAG_TRIGGER) -> "DatasetSlice":
        n = len(self)
        return DatasetSlice(
            self.features,
            np.full(n, label, dtype=np.int64),
            np.full(n, tag, dtype=np.uint8),
        )

    def shuffled(self, rng: np.random.Generator) -> "DatasetSlice":
        perm = rng.permutation(len(self))
        return self.subset(perm)

    @staticmethod
    def concat(slices: list["DatasetSlice"]) -> "DatasetSlice":
        if not slices:
            raise ValueError("cannot concatenate zero slices")
        dims = {s.dim for s in slices}
        if len(dims) != 1:
            raise ValueError(f"heterogeneous feature dimensions: {sorted(dims)}")
        return DatasetSlice(
            np.concatenate([s.features for s in slices]),
            np.concatenate([s.labels for s in slices]),
            np.concatenate([s.tags for s in slices]),
        )

    def to_bytes(self) -> bytes:
        header = _DATASET_MAGIC + struct.pack("<BIH", _DATASET_VERSION, len(self), self.dim)
        body = (
            self.features.astype("<f8").tobytes()
            + self.labels.astype("<u2").tobytes()
            + self.tags.astype("u1").tobytes()
        )
        return header + body

    @classmethod
    def from_bytes(cls, raw: bytes) -> "DatasetSlice":
        if raw[:4] != _DATASET_MAGIC:
            raise ValueError("not a dataset blob")
        version, n, d = struct.unpack_from("<BIH", raw, 4)
        if version != _DATASET_VERSION:
            raise ValueError(f"unsupported dataset version {version}")
        off = 4 + struct.calcsize("<BIH")
        feat = np.frombuffer(raw, dtype="<f8", count=n * d, offset=off).reshape(n, d)
        off += n * d * 8
        labels = np.frombuffer(raw, dtype="<u2", count=n, offset=off).astype(np.int64)
        off += n * 2
        tags = np.frombuffer(raw, dtype="u1", count=n, offset=off)
        return cls(feat.copy(), labels, tags.copy())

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "DatasetSlice":
        return cls.from_bytes(Path(path).read_bytes())

    def export_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x{i}" for i in range(self.dim)] + ["label", "tag"])
            for i in range(len(self)):
                writer.writerow(
                    [repr(v) for v in self.features[i]]
                    + [int(self.labels[i]), _TAG_NAMES[int(self.tags[i])]]
                )


@dataclass(frozen=True)
class TaskGenerator:
    """Frozen generator state of a synthetic task; enough to re-derive
    component membership and Mahalanobis distances."""

    num_classes: int
    input_dim: int
    subclusters: int
    class_scale: float
    sub_offset: float
    within_sigma: float
    seed: int
    class_means: np.ndarray = field(repr=False)      # (C, d)
    sub_means: np.ndarray = field(repr=False)        # (C, k, d)

    def subcluster_of(self, features: np.ndarray, label: int) -> np.ndarray:
        """Assign each row to the nearest sub-cluster mean of ``label``."""
        x = np.atleast_2d(features)
        d = np.linalg.norm(x[:, None, :] - self.sub_means[label][None, :, :], axis=2)
        return np.argmin(d, axis=1)

    def mahalanobis(self, features: np.ndarray, label: int, subcluster: int) -> np.ndarray:
        """Distance from a sub-cluster mean under the isotropic generator
        covariance (within_sigma**2 * I)."""
        x = np.atleast_2d(features)
        return np.linalg.norm(x - self.sub_means[label, subcluster], axis=1) / self.within_sigma


SEMANTIC_SUBPOPULATION = "semantic_subpopulation"
LABEL_FLIP_SUBSET = "label_flip_subset"
EDGE_CASE = "edge_case"

TRIGGER_KINDS = (SEMANTIC_SUBPOPULATION, LABEL_FLIP_SUBSET, EDGE_CASE)


@dataclass(frozen=True)
class TriggerSpec:
    kind: str
    source_class: int
    target_label: int
    fraction_or_count: float = 0.05
    subcluster: int = 0

    def __post_init__(self):
        if self.kind not in TRIGGER_KINDS:
            raise ValueError(f"unknown trigger kind {self.kind!r}")
        if self.kind in (SEMANTIC_SUBPOPULATION, LABEL_FLIP_SUBSET):
            if self.target_label == self.source_class:
                raise ValueError("target_label must differ from source_class")


@dataclass(frozen=True)
class Partition:
    per_participant: tuple[DatasetSlice, ...]
    sizes: tuple[int, ...]


def generate_task(
    num_classes: int,
    input_dim: int,
    train_size: int,
    test_size: int,
    seed: int,
    *,
    subclusters: int = 4,
    class_scale: float = 4.0,
    sub_offset: float = 2.0,
    within_sigma: float = 0.6,
) -> tuple[DatasetSlice, DatasetSlice, TaskGenerator]:
    """Build the Gaussian-mixture task. Deterministic per seed; train and test
    are IID draws from the same mixture."""
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if input_dim < num_classes:
        raise ValueError("input_dim must be >= num_classes (simplex embedding)")
    if train_size <= 0 or test_size <= 0:
        raise ValueError("sizes must be positive")

    if subclusters > input_dim:
        raise ValueError("subclusters cannot exceed input_dim")
    rng = np.random.default_rng(seed)
    class_means = class_scale * np.eye(num_classes, input_dim)
    # orthonormal offset directions per class (QR of a random matrix) keep the
    # pairwise sub-cluster separation uniform at sub_offset * sqrt(2)
    directions = np.empty((num_classes, subclusters, input_dim))
    for c in range(num_classes):
        q, _ = np.linalg.qr(rng.standard_normal((input_dim, subclusters)))
        directions[c] = q.T
    sub_means = class_means[:, None, :] + sub_offset * directions

    gen = TaskGenerator(
        num_classes=num_classes,
        input_dim=input_dim,
        subclusters=subclusters,
        class_scale=class_scale,
        sub_offset=sub_offset,
        within_sigma=within_sigma,
        seed=seed,
        class_means=class_means,
        sub_means=sub_means,
    )

    def draw(n: int) -> DatasetSlice:
        labels = rng.integers(0, num_classes, size=n)
        subs = rng.integers(0, subclusters, size=n)
        noise = rng.standard_normal((n, input_dim)) * within_sigma
        features = sub_means[labels, subs] + noise
        return DatasetSlice(features, labels)

    return draw(train_size), draw(test_size), gen


def _resolve_size(fraction_or_count: float, pool: int) -> int:
    if fraction_or_count <= 0:
        return 0
    if fraction_or_count < 1:
        return int(round(fraction_or_count * pool))
    return int(fraction_or_count)


def build_trigger_set(
    train: DatasetSlice,
    spec: TriggerSpec,
    gen: TaskGenerator,
    seed: int,
) -> tuple[DatasetSlice, DatasetSlice]:
    """Construct the trigger set D_t and the cleaned pool.

    semantic_subpopulation: every training member of one sub-cluster of the
    source class, relabeled to the target. label_flip_subset: a random subset
    of the source class, relabeled. edge_case: freshly generated samples from
    the >= 2.5-sigma tail of the designated source component, labeled target.
    """
    rng = np.random.default_rng(seed)
    class_idx = np.flatnonzero(train.labels == spec.source_class)

    if spec.kind == SEMANTIC_SUBPOPULATION:
        members = gen.subcluster_of(train.features[class_idx], spec.source_class)
        chosen = class_idx[members == spec.subcluster]
        if chosen.size == 0:
            raise ValueError("designated subcluster has no training members")
        d_t = train.subset(chosen).relabeled(spec.target_label)
        keep = np.setdiff1d(np.arange(len(train)), chosen)
        return d_t, train.subset(keep)

    if spec.kind == LABEL_FLIP_SUBSET:
        count = _resolve_size(spec.fraction_or_count, class_idx.size)
        if count == 0:
            raise ValueError("label_flip_subset selected zero examples")
        if count > class_idx.size:
            raise ValueError("label_flip_subset larger than the source class")
        chosen = rng.choice(class_idx, size=count, replace=False)
        chosen.sort()
        d_t = train.subset(chosen).relabeled(spec.target_label)
        keep = np.setdiff1d(np.arange(len(train)), chosen)
        return d_t, train.subset(keep)

    # edge_case: sample z ~ N(0, I) and push it onto a radius >= 2.5, so the
    # Mahalanobis distance of every generated point is >= 2.5 by construction.
    count = _resolve_size(spec.fraction_or_count, class_idx.size)
    if count == 0:
        raise ValueError("edge_case trigger with zero samples")
    z = rng.standard_normal((count, gen.input_dim))
    radius = 2.5 + np.abs(rng.standard_normal(count)) * 0.5
    z = z / np.linalg.norm(z, axis=1, keepdims=True) * radius[:, None]
    features = gen.sub_means[spec.source_class, spec.subcluster] + gen.within_sigma * z
    d_t = DatasetSlice(
        features,
        np.full(count, spec.target_label, dtype=np.int64),
        np.full(count, TAG_TRIGGER, dtype=np.uint8),
    )
    return d_t, train


def partition_iid(train: DatasetSlice, n: int, seed: int) -> Partition:
    """Shuffle, then split into n near-equal contiguous slices."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if n > len(train):
        raise ValueError("more participants than training examples")
    rng = np.random.default_rng(seed)
    shuffled = train.shuffled(rng)
    base, extra = divmod(len(train), n)
    slices = []
    start = 0
    for i in range(n):
        size = base + (1 if i < extra else 0)
        slices.append(shuffled.subset(np.arange(start, start + size)))
        start += size
    return Partition(tuple(slices), tuple(len(s) for s in slices))
