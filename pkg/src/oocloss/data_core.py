"""Clustered datasets, cluster-aware splits and controlled leakage.

Sample indices are 0-based throughout; cluster ids are dense 1..k.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    DegenerateSplit,
    EmptyDataset,
    EmptyPool,
    InvalidConfig,
    MissingApproxClusters,
    MissingColumn,
    NonFiniteValue,
    UnknownCluster,
)

__all__ = [
    "ClusteredDataset",
    "SplitPair",
    "Direction",
    "LeakageConfig",
    "CorruptedSplit",
    "Task",
    "PartitionModelConfig",
    "load_csv",
    "save_csv",
    "generate_partition_model",
    "draw_partition_samples",
    "loco_split",
    "inject_leakage",
    "approx_clusters_from_leakage",
    "mixture_resample",
]


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


def _dense_ids(values, mapping=None) -> np.ndarray:
    """Map arbitrary labels to 1..k by order of first appearance."""
    mapping = {} if mapping is None else mapping
    out = np.empty(len(values), dtype=np.int64)
    for i, v in enumerate(values):
        out[i] = mapping.setdefault(v, len(mapping) + 1)
    return out


@dataclass(frozen=True, eq=False)
class ClusteredDataset:
    features: np.ndarray
    labels: np.ndarray
    oracle_clusters: np.ndarray
    approx_clusters: Optional[np.ndarray] = None
    feature_names: tuple = ()
    label_name: str = "label"
    cluster_name: str = "cluster"
    approx_name: str = "approx_cluster"

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        y = np.asarray(self.labels, dtype=float).reshape(-1)
        c = np.asarray(self.oracle_clusters).reshape(-1)
        n = X.shape[0]
        if n == 0:
            raise EmptyDataset("dataset has no samples")
        if y.shape[0] != n or c.shape[0] != n:
            raise InvalidConfig("features, labels and clusters differ in length")
        if not np.all(np.isfinite(X)):
            r, j = np.argwhere(~np.isfinite(X))[0]
            raise NonFiniteValue(int(r), int(j))
        if not np.all(np.isfinite(y)):
            raise NonFiniteValue(int(np.argmax(~np.isfinite(y))), self.label_name)
        ids = np.unique(c)
        if not np.array_equal(ids, np.arange(1, len(ids) + 1)):
            raise InvalidConfig("cluster ids must be contiguous 1..k")
        object.__setattr__(self, "features", _frozen(X, float))
        object.__setattr__(self, "labels", _frozen(y, float))
        object.__setattr__(self, "oracle_clusters", _frozen(c, np.int64))
        if self.approx_clusters is not None:
            a = np.asarray(self.approx_clusters).reshape(-1)
            if a.shape[0] != n:
                raise InvalidConfig("approx_clusters length differs from oracle_clusters")
            object.__setattr__(self, "approx_clusters", _frozen(a, np.int64))
        names = tuple(self.feature_names) or tuple(f"x{j}" for j in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise InvalidConfig("feature_names length differs from feature count")
        object.__setattr__(self, "feature_names", names)

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_clusters(self) -> int:
        return int(self.oracle_clusters.max())

    def clusters(self, use_approx: bool = False) -> np.ndarray:
        if use_approx:
            if self.approx_clusters is None:
                raise MissingApproxClusters("dataset carries no approximate clustering")
            return self.approx_clusters
        return self.oracle_clusters

    def take(self, idx) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(idx, dtype=np.int64)
        return self.features[idx], self.labels[idx]

    def with_approx(self, approx) -> "ClusteredDataset":
        return ClusteredDataset(
            self.features, self.labels, self.oracle_clusters, approx,
            self.feature_names, self.label_name, self.cluster_name, self.approx_name,
        )

    def equals(self, other: "ClusteredDataset") -> bool:
        same_approx = (self.approx_clusters is None and other.approx_clusters is None) or (
            self.approx_clusters is not None
            and other.approx_clusters is not None
            and np.array_equal(self.approx_clusters, other.approx_clusters)
        )
        return (
            np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.oracle_clusters, other.oracle_clusters)
            and same_approx
            and self.feature_names == other.feature_names
        )


# -- CSV ---------------------------------------------------------------------

def _parse_float(text, row, col):
    try:
        v = float(text)
    except ValueError:
        raise NonFiniteValue(row, col) from None
    if not math.isfinite(v):
        raise NonFiniteValue(row, col)
    return v


def load_csv(path, label_column: str, cluster_column: str,
             approx_column: Optional[str] = None) -> ClusteredDataset:
    """Read a clustered dataset from a headered CSV file.

    All columns other than the label, cluster and (optional) approximate
    cluster columns are features.  Cluster values may be arbitrary strings;
    they are remapped to 1..k in order of first appearance.  ``row`` in
    :class:`NonFiniteValue` counts data rows from 1.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyDataset(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    for col in (label_column, cluster_column) + ((approx_column,) if approx_column else ()):
        if col not in header:
            raise MissingColumn(col)
    if not rows:
        raise EmptyDataset(f"{path}: no data rows")

    special = {label_column, cluster_column}
    if approx_column:
        special.add(approx_column)
    feat_cols = [j for j, h in enumerate(header) if h not in special]
    li, ci = header.index(label_column), header.index(cluster_column)
    ai = header.index(approx_column) if approx_column else None

    X = np.empty((len(rows), len(feat_cols)))
    y = np.empty(len(rows))
    for r, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise NonFiniteValue(r, "<row length>")
        for k, j in enumerate(feat_cols):
            X[r - 1, k] = _parse_float(row[j], r, header[j])
        y[r - 1] = _parse_float(row[li], r, label_column)
    mapping = {}
    clusters = _dense_ids([row[ci].strip() for row in rows], mapping)
    # approximate ids share the oracle id space
    approx = _dense_ids([row[ai].strip() for row in rows], mapping) if ai is not None else None
    return ClusteredDataset(
        X, y, clusters, approx,
        feature_names=tuple(header[j] for j in feat_cols),
        label_name=label_column,
        cluster_name=cluster_column,
        approx_name=approx_column or "approx_cluster",
    )


def save_csv(ds: ClusteredDataset, path) -> None:
    """Write ``ds`` in the format :func:`load_csv` reads (features, label, clusters)."""
    header = list(ds.feature_names) + [ds.label_name, ds.cluster_name]
    if ds.approx_clusters is not None:
        header.append(ds.approx_name)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(ds.n_samples):
            row = [repr(float(v)) for v in ds.features[i]]
            row += [repr(float(ds.labels[i])), str(int(ds.oracle_clusters[i]))]
            if ds.approx_clusters is not None:
                row.append(str(int(ds.approx_clusters[i])))
            w.writerow(row)


# -- partition model -----------------------------------------------------------

class Task(str, enum.Enum):
    REGRESSION = "regression"
    CLASSIFICATION = "classification"


@dataclass(frozen=True)
class PartitionModelConfig:
    """Two-cluster synthetic generator.

    ``cluster_effect`` is the label offset of the validation cluster and
    ``memo_noise`` the noise on the cluster-id feature; both only apply with
    ``memorizable_feature``.
    """

    n_train: int = 200
    n_valid: int = 200
    d: int = 2
    cluster_shift: tuple = (0.0, 0.0)
    noise_std: float = 0.5
    memorizable_feature: bool = True
    task: Task = Task.REGRESSION
    seed: int = 0
    cluster_effect: float = 3.0
    memo_noise: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "cluster_shift", tuple(float(s) for s in self.cluster_shift))
        object.__setattr__(self, "task", Task(self.task))
        if self.n_train < 1 or self.n_valid < 1:
            raise InvalidConfig("n_train and n_valid must be >= 1")
        if self.d < 1:
            raise InvalidConfig("d must be >= 1")
        if len(self.cluster_shift) != self.d:
            raise InvalidConfig(f"cluster_shift must have length d={self.d}")
        if not self.noise_std > 0:
            raise InvalidConfig("noise_std must be positive")
        if self.memo_noise < 0:
            raise InvalidConfig("memo_noise must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise InvalidConfig("seed must be a 64-bit unsigned integer")


def _ground_truth(cfg: PartitionModelConfig) -> tuple[np.ndarray, float]:
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0,)))
    w = rng.normal(size=cfg.d)
    b = float(rng.normal(scale=0.1))
    return w, b


def draw_partition_samples(cfg: PartitionModelConfig, cluster: int, n: int,
                           rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` fresh samples of ``cluster`` (1 or 2) under the fixed ground truth."""
    w, b = _ground_truth(cfg)
    shift = np.asarray(cfg.cluster_shift) if cluster == 2 else np.zeros(cfg.d)
    X = rng.normal(size=(n, cfg.d)) + shift
    score = X @ w + b + cfg.noise_std * rng.normal(size=n)
    if cfg.memorizable_feature:
        z = cluster + cfg.memo_noise * rng.normal(size=n)
        X = np.column_stack([X, z])
        score = score + cfg.cluster_effect * (cluster - 1)
    if cfg.task is Task.CLASSIFICATION:
        y = np.where(score >= 0, 1.0, -1.0)
    else:
        y = score
    return X, y


def generate_partition_model(cfg: PartitionModelConfig) -> ClusteredDataset:
    """Cluster 1 (training cluster) rows first, then cluster 2 (validation cluster)."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1,)))
    X1, y1 = draw_partition_samples(cfg, 1, cfg.n_train, rng)
    X2, y2 = draw_partition_samples(cfg, 2, cfg.n_valid, rng)
    names = tuple(f"x{j}" for j in range(cfg.d)) + (("memo",) if cfg.memorizable_feature else ())
    return ClusteredDataset(
        np.vstack([X1, X2]),
        np.concatenate([y1, y2]),
        np.repeat([1, 2], [cfg.n_train, cfg.n_valid]),
        feature_names=names,
    )


# -- splits and leakage ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SplitPair:
    train_indices: np.ndarray
    valid_indices: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "train_indices", _frozen(np.sort(self.train_indices), np.int64))
        object.__setattr__(self, "valid_indices", _frozen(np.sort(self.valid_indices), np.int64))
        if np.intersect1d(self.train_indices, self.valid_indices).size:
            raise InvalidConfig("train and validation indices overlap")


def loco_split(ds: ClusteredDataset, held_out_cluster: int, use_approx: bool = False) -> SplitPair:
    c = ds.clusters(use_approx)
    if held_out_cluster not in set(np.unique(c).tolist()):
        raise UnknownCluster(f"cluster {held_out_cluster} not present")
    valid = np.flatnonzero(c == held_out_cluster)
    train = np.flatnonzero(c != held_out_cluster)
    if train.size == 0:
        raise DegenerateSplit("holding out the only cluster leaves no training data")
    return SplitPair(train, valid)


class Direction(str, enum.Enum):
    VALID_TO_TRAIN = "valid_to_train"
    TRAIN_TO_VALID = "train_to_valid"


@dataclass(frozen=True)
class LeakageConfig:
    p0: float
    direction: Direction = Direction.VALID_TO_TRAIN
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "direction", Direction(self.direction))
        if not 0.0 <= self.p0 <= 1.0:
            raise InvalidConfig(f"p0={self.p0} outside [0, 1]")
        if not 0 <= self.seed < 2**64:
            raise InvalidConfig("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True, eq=False)
class CorruptedSplit:
    train: np.ndarray
    valid: np.ndarray
    moved: np.ndarray
    p0: float
    direction: Direction = Direction.VALID_TO_TRAIN

    def __post_init__(self):
        for name in ("train", "valid", "moved"):
            object.__setattr__(self, name, _frozen(np.sort(getattr(self, name)), np.int64))
        if np.intersect1d(self.train, self.valid).size:
            raise InvalidConfig("corrupted train and validation folds overlap")


def inject_leakage(split: SplitPair, cfg: LeakageConfig) -> CorruptedSplit:
    """Flip each sample of the origin fold with independent probability ``p0``.

    One uniform is drawn per origin sample and a sample moves iff its
    uniform is below ``p0``, so for a fixed seed the moved sets are nested
    in ``p0``.
    """
    rng = np.random.default_rng(cfg.seed)
    if cfg.direction is Direction.VALID_TO_TRAIN:
        origin, dest = split.valid_indices, split.train_indices
    else:
        origin, dest = split.train_indices, split.valid_indices
    u = rng.random(origin.size)
    move = u < cfg.p0
    moved = origin[move]
    stay = origin[~move]
    dest = np.concatenate([dest, moved])
    if cfg.direction is Direction.VALID_TO_TRAIN:
        return CorruptedSplit(dest, stay, moved, cfg.p0, cfg.direction)
    return CorruptedSplit(stay, dest, moved, cfg.p0, cfg.direction)


def approx_clusters_from_leakage(ds: ClusteredDataset, corrupted: CorruptedSplit,
                                 held_out_cluster: int) -> np.ndarray:
    """Approximate clustering that reproduces ``corrupted`` under LOCO on ``held_out_cluster``.

    Samples that crossed into the training fold are relabelled with the
    smallest training cluster id; samples that crossed into validation get
    the held-out id.
    """
    approx = ds.oracle_clusters.copy()
    if corrupted.direction is Direction.VALID_TO_TRAIN:
        others = np.unique(ds.oracle_clusters[ds.oracle_clusters != held_out_cluster])
        approx[corrupted.moved] = others[0]
    else:
        approx[corrupted.moved] = held_out_cluster
    return approx


def mixture_resample(train_pool, leak_pool, p_prime: float, size: int,
                     rng) -> np.ndarray:
    """Draw ``size`` indices with replacement from the two-pool mixture.

    Each draw comes from ``leak_pool`` with probability ``p_prime`` and from
    ``train_pool`` otherwise, uniformly within the chosen pool.  ``rng`` is a
    ``numpy.random.Generator`` or a seed.  The uniforms and both candidate
    picks are drawn for every position regardless of ``p_prime``, so a fixed
    generator state yields coupled draws across mixture weights.
    """
    if not 0.0 <= p_prime <= 1.0:
        raise InvalidConfig(f"p_prime={p_prime} outside [0, 1]")
    rng = np.random.default_rng(rng)
    train_pool = np.asarray(train_pool, dtype=np.int64)
    leak_pool = np.asarray(leak_pool, dtype=np.int64)
    if p_prime < 1 and train_pool.size == 0:
        raise EmptyPool("train pool empty with nonzero weight")
    if p_prime > 0 and leak_pool.size == 0:
        raise EmptyPool("leak pool empty with nonzero weight")
    u = rng.random(size)
    it = rng.integers(max(train_pool.size, 1), size=size)
    il = rng.integers(max(leak_pool.size, 1), size=size)
    from_leak = u < p_prime
    out = np.empty(size, dtype=np.int64)
    out[~from_leak] = train_pool[it[~from_leak]] if train_pool.size else 0
    out[from_leak] = leak_pool[il[from_leak]] if leak_pool.size else 0
    return out
