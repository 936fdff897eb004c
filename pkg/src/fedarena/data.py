"""Dataset generation, ingestion, partitioning, and label poisoning.

Synthetic Gaussian-blob tasks stand in for image benchmarks at desk scale;
IDX and CSV loaders cover real datasets when available.  Partitioning
assigns examples to clients by per-class Dirichlet proportions, after
carving out a uniformly sampled holdout used as the server-side reference
set.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .numerics import Rng, require_finite, sample_dirichlet

SIMPLEX_SCALE = 4.5  # blob center separation; large enough that spread=1 tasks are learnable
PARTITION_RETRIES = 1000


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    name: str = "dataset"

    def __post_init__(self):
        object.__setattr__(self, "inputs", np.asarray(self.inputs, dtype=np.float64))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        if self.inputs.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("inputs must be 2-D and labels 1-D")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("inputs and labels disagree on example count")
        if self.inputs.shape[0] < 1:
            raise ValueError("dataset must contain at least one example")
        require_finite(self.inputs, "dataset inputs")
        if self.labels.min() < 0:
            raise ValueError("labels must be nonnegative")

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1


@dataclass(frozen=True)
class Partition:
    client_indices: tuple
    reference_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        shards = tuple(np.asarray(s, dtype=np.int64) for s in self.client_indices)
        object.__setattr__(self, "client_indices", shards)
        object.__setattr__(
            self, "reference_indices", np.asarray(self.reference_indices, dtype=np.int64)
        )
        seen: set[int] = set(self.reference_indices.tolist())
        if len(seen) != self.reference_indices.size:
            raise ValueError("reference indices must be distinct")
        for i, shard in enumerate(shards):
            if shard.size == 0:
                raise ValueError(f"client {i} received an empty shard")
            ids = set(shard.tolist())
            if len(ids) != shard.size or ids & seen:
                raise ValueError("client shards must be pairwise disjoint and disjoint from the reference set")
            seen |= ids

    @property
    def num_clients(self) -> int:
        return len(self.client_indices)


def synth_blobs(rng: Rng, classes: int, dim: int, per_class: int, spread: float) -> Dataset:
    """Gaussian blobs with one simplex-vertex center per class.

    Centers sit at SIMPLEX_SCALE * e_c, so classes must not exceed dim for
    the centers to be distinct.  Examples are emitted class-major (all of
    class 0, then class 1, ...).
    """
    if classes < 2 or per_class < 1 or spread <= 0:
        raise ValueError("need classes >= 2, per_class >= 1, spread > 0")
    if classes > dim:
        raise ValueError("classes must not exceed dim (one simplex vertex per class)")
    n = classes * per_class
    noise = rng.normal((n, dim))
    inputs = spread * noise
    labels = np.repeat(np.arange(classes), per_class)
    inputs[np.arange(n), labels] += SIMPLEX_SCALE
    return Dataset(inputs=inputs, labels=labels, name=f"blobs{classes}x{per_class}d{dim}")


def partition_dirichlet(rng: Rng, ds: Dataset, m: int, alpha: float, ref_size: int) -> Partition:
    """Split a dataset into M client shards plus a uniform reference holdout.

    The reference set is drawn first, uniformly without replacement.  The
    remaining examples are dealt class by class: each class draws client
    proportions from a symmetric Dirichlet(alpha) and is sliced accordingly
    after a seeded shuffle.  Proportion draws are retried (bounded) until
    every client ends up with at least one example.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    if alpha <= 0:
        raise ValueError("invalid concentration")
    if not 0 <= ref_size < ds.n:
        raise ValueError("ref_size must satisfy 0 <= ref_size < N")

    ref = np.sort(rng.choice(ds.n, size=ref_size, replace=False)) if ref_size else np.zeros(0, dtype=np.int64)
    remaining = np.setdiff1d(np.arange(ds.n), ref, assume_unique=True)
    by_class = [remaining[ds.labels[remaining] == c] for c in range(ds.num_classes)]

    for _ in range(PARTITION_RETRIES):
        shards: list[list[int]] = [[] for _ in range(m)]
        for idx in by_class:
            if idx.size == 0:
                continue
            shuffled = idx[rng.permutation(idx.size)]
            p = sample_dirichlet(rng, alpha, m)
            bounds = np.floor(np.cumsum(p) * idx.size + 0.5).astype(int)
            bounds[-1] = idx.size
            start = 0
            for client, stop in enumerate(bounds):
                stop = max(stop, start)
                shards[client].extend(shuffled[start:stop].tolist())
                start = stop
        if all(len(s) > 0 for s in shards):
            return Partition(
                client_indices=tuple(np.sort(np.asarray(s, dtype=np.int64)) for s in shards),
                reference_indices=ref,
            )
    raise ValueError("infeasible partition")


def flip_labels(ds: Dataset, source: int, target: int) -> Dataset:
    """Relabel every source-class example as the target class."""
    if source == target:
        raise ValueError("source and target classes must differ")
    for cls in (source, target):
        if not 0 <= cls < ds.num_classes:
            raise ValueError(f"invalid class {cls}")
    labels = ds.labels.copy()
    labels[labels == source] = target
    return Dataset(inputs=ds.inputs, labels=labels, name=ds.name)


def shift_features(ds: Dataset, offset) -> Dataset:
    """Add a constant offset vector to every input row (feature-skew knob)."""
    offset = np.asarray(offset, dtype=np.float64)
    return Dataset(inputs=ds.inputs + offset, labels=ds.labels, name=ds.name)


def subset(ds: Dataset, indices) -> Dataset:
    indices = np.asarray(indices, dtype=np.int64)
    return Dataset(inputs=ds.inputs[indices], labels=ds.labels[indices], name=ds.name)


# ------------------------------------------------------------- file I/O

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _read_exact(buf: bytes, offset: int, count: int, what: str) -> bytes:
    if offset + count > len(buf):
        raise ValueError(
            f"truncated IDX file while reading {what}: expected {count} bytes at "
            f"offset {offset}, only {len(buf) - offset} available"
        )
    return buf[offset : offset + count]


def load_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label file pair (the Fashion-MNIST container format).

    Images use magic 0x00000803 (n, rows, cols, then unsigned bytes) and
    labels magic 0x00000801; both big-endian.  Pixels are scaled to [0, 1]
    and each image is flattened to one row.
    """
    with open(images_path, "rb") as f:
        raw = f.read()
    (magic,) = struct.unpack(">I", _read_exact(raw, 0, 4, "images magic"))
    if magic != IDX_IMAGES_MAGIC:
        raise ValueError(
            f"bad IDX images magic 0x{magic:08x} at byte offset 0 (expected 0x{IDX_IMAGES_MAGIC:08x})"
        )
    n, rows, cols = struct.unpack(">III", _read_exact(raw, 4, 12, "image dimensions"))
    pixels = _read_exact(raw, 16, n * rows * cols, f"{n} images of {rows}x{cols}")
    inputs = np.frombuffer(pixels, dtype=np.uint8).reshape(n, rows * cols) / 255.0

    with open(labels_path, "rb") as f:
        raw = f.read()
    (magic,) = struct.unpack(">I", _read_exact(raw, 0, 4, "labels magic"))
    if magic != IDX_LABELS_MAGIC:
        raise ValueError(
            f"bad IDX labels magic 0x{magic:08x} at byte offset 0 (expected 0x{IDX_LABELS_MAGIC:08x})"
        )
    (n_labels,) = struct.unpack(">I", _read_exact(raw, 4, 4, "label count"))
    if n_labels != n:
        raise ValueError(f"IDX pair mismatch: {n} images but {n_labels} labels")
    labels = np.frombuffer(_read_exact(raw, 8, n, f"{n} labels"), dtype=np.uint8).astype(np.int64)
    return Dataset(inputs=inputs, labels=labels, name="idx")


def load_csv(path) -> Dataset:
    """Load a headered CSV whose last column is an integer class label.

    Feature columns are z-scored (constant columns are left at zero).
    Malformed rows raise with the 1-based line number.
    """
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.rstrip("\n") for ln in f]
    if not lines:
        raise ValueError("empty CSV file")
    header = lines[0].split(",")
    width = len(header)
    if width < 2:
        raise ValueError("CSV needs at least one feature column and a label column")
    feats, labels = [], []
    for lineno, ln in enumerate(lines[1:], start=2):
        if not ln.strip():
            continue
        fields = ln.split(",")
        if len(fields) != width:
            raise ValueError(f"line {lineno}: expected {width} fields, got {len(fields)}")
        try:
            feats.append([float(x) for x in fields[:-1]])
            labels.append(int(fields[-1]))
        except ValueError as e:
            raise ValueError(f"line {lineno}: {e}") from None
    if not feats:
        raise ValueError("CSV contains a header but no data rows")
    x = np.asarray(feats, dtype=np.float64)
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd[sd == 0.0] = 1.0
    return Dataset(inputs=(x - mu) / sd, labels=np.asarray(labels), name="csv")
