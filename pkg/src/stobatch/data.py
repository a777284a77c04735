"""Data ingestion, normalization and the fixed disjoint batch plan.

Examples live in ``[-1, 1]^d`` with integer labels in ``[0, K)``; one-hot
vectors are built on demand with :func:`one_hot`.
"""

from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ConsistencyError, FormatError, PrivacyViolationError, RangeError, ShapeError
from .rng import make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Example:
    features: np.ndarray
    label: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.label)
        if f.ndim != 1 or np.any(np.abs(f) > 1.0):
            raise RangeError("features must be a vector in [-1, 1]")
        if y.ndim != 1 or not np.all((y == 0) | (y == 1)) or y.sum() != 1:
            raise ConsistencyError("label must be one-hot")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "label", y)


def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path):
    """Parse an unsigned-byte IDX file into an array of its declared shape."""
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header")
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code != 0x08 or not 1 <= ndim <= 4:
        magic = struct.unpack(">I", raw[:4])[0]
        raise FormatError(f"{path}: invalid IDX magic 0x{magic:08x}")
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    expected = int(np.prod(dims))
    payload = raw[header_len:]
    if len(payload) < expected:
        raise FormatError(f"{path}: truncated payload ({len(payload)} of {expected} bytes)")
    return np.frombuffer(payload, dtype=np.uint8, count=expected).reshape(dims)


def write_idx(path, array):
    """Write a uint8 array as an IDX file (gzip-compressed when ``path`` ends in .gz)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">HBB", 0, 0x08, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(header)
        f.write(array.tobytes())


def load_idx(images_path, labels_path=None):
    """Load IDX images as a row-major ``(N, rows*cols)`` float matrix of [0, 255] values.

    When ``labels_path`` is given the label file is read too and the counts
    must agree; otherwise the returned labels are ``None``.
    """
    images = read_idx(images_path)
    if images.ndim < 2:
        raise FormatError(f"{images_path}: expected an image tensor, got {images.ndim}-d data")
    matrix = images.reshape(images.shape[0], -1).astype(np.float64)
    labels = None
    if labels_path is not None:
        labels = read_idx(labels_path)
        if labels.ndim != 1:
            raise FormatError(f"{labels_path}: label file must be 1-d")
        if labels.shape[0] != matrix.shape[0]:
            raise ConsistencyError(f"{matrix.shape[0]} images but {labels.shape[0]} labels")
        labels = labels.astype(np.int64)
    return matrix, labels


def normalize_signed(raw):
    """Map pixel intensities in [0, 255] affinely onto [-1, 1]."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size and (np.nanmin(raw) < 0.0 or np.nanmax(raw) > 255.0 or np.isnan(raw).any()):
        raise RangeError("pixel values must lie in [0, 255]")
    return raw / 127.5 - 1.0


def pool_images(matrix, side, factor):
    """Average-pool square images stored as rows; ``side`` must be divisible by ``factor``."""
    if side % factor:
        raise ConfigError(f"image side {side} not divisible by pool factor {factor}")
    n = matrix.shape[0]
    s = side // factor
    return matrix.reshape(n, s, factor, s, factor).mean(axis=(2, 4)).reshape(n, s * s)


def one_hot(labels, K):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ConsistencyError(f"labels outside [0, {K})")
    out = np.zeros((labels.shape[0], K))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def synth_dataset(n, d, K, seed, clusters_per_class=1, separation=0.6, spread=0.15):
    """Gaussian clusters, one mean per class along a random sign pattern, clipped to the box.

    Labels are assigned round robin so every class appears when ``n >= K``.
    """
    if d < 1 or K < 2:
        raise ConfigError("synthetic data needs d >= 1 and K >= 2")
    if n < K:
        raise ConfigError("synthetic data needs n >= K")
    rng = make_rng(seed, "synth")
    class_means = separation * rng.choice([-1.0, 1.0], size=(K, d))
    # distinct sign patterns keep classes linearly separable
    while K <= 2 ** d and len({tuple(r) for r in class_means}) < K:
        class_means = separation * rng.choice([-1.0, 1.0], size=(K, d))
    centers = class_means[:, None, :] + rng.normal(0.0, spread / 2, size=(K, clusters_per_class, d))
    labels = np.arange(n) % K
    labels = labels[rng.permutation(n)]
    which = rng.integers(0, clusters_per_class, size=n)
    x = centers[labels, which] + rng.normal(0.0, spread, size=(n, d))
    return np.clip(x, -1.0, 1.0), labels.astype(np.int64)


@dataclass(frozen=True)
class BatchPlan:
    """Disjoint fixed batches: shuffle once with the seed, then slice contiguously."""

    batches: tuple
    seed: int
    dropped: tuple
    n_examples: int

    @property
    def m(self):
        return len(self.batches[0])

    def __len__(self):
        return len(self.batches)

    def digest(self):
        h = hashlib.sha256()
        for b in self.batches:
            h.update(np.asarray(b, dtype=np.int64).tobytes())
            h.update(b"|")
        return h.hexdigest()


def build_batch_plan(n_examples, m, seed):
    if m < 1:
        raise ConfigError("batch size must be at least 1")
    if m > n_examples:
        raise ConfigError(f"batch size {m} exceeds dataset size {n_examples}")
    order = make_rng(seed, "batch-plan").permutation(n_examples)
    n_batches = n_examples // m
    batches = tuple(tuple(int(i) for i in order[k * m:(k + 1) * m]) for k in range(n_batches))
    dropped = tuple(sorted(int(i) for i in order[n_batches * m:]))
    return BatchPlan(batches=batches, seed=int(seed), dropped=dropped, n_examples=int(n_examples))


@dataclass(frozen=True)
class PerturbedBatch:
    """Features of one batch of the perturbed plan; carries no labels by design."""

    batch_id: int
    indices: tuple
    features: np.ndarray
    plan_digest: str

    def __len__(self):
        return len(self.indices)


@dataclass(frozen=True)
class PerturbedBatchPlan:
    plan: BatchPlan
    perturbed_features: np.ndarray
    chi1: np.ndarray
    m: int
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def batch(self, i):
        i = int(i) % len(self.plan)
        if i not in self._cache:
            idx = self.plan.batches[i]
            feats = self.perturbed_features[list(idx)]
            feats.setflags(write=False)
            self._cache[i] = PerturbedBatch(i, idx, feats, self.plan.digest())
        return self._cache[i]

    def __len__(self):
        return len(self.plan)


def perturb_batches(plan, data, chi1, m):
    """Shift every example by the single shared draw ``chi1 / m``; ``data`` is not modified."""
    if isinstance(plan, PerturbedBatchPlan):
        raise PrivacyViolationError("plan is already perturbed; a second noise draw is not allowed")
    data = np.asarray(data, dtype=np.float64)
    chi1 = np.array(chi1, dtype=np.float64)
    if data.ndim != 2 or chi1.shape != (data.shape[1],):
        raise ShapeError(f"chi1 of shape {chi1.shape} does not match data of shape {data.shape}")
    if data.shape[0] != plan.n_examples:
        raise ConsistencyError(f"plan covers {plan.n_examples} examples but data has {data.shape[0]}")
    perturbed = data + chi1 / m
    perturbed.setflags(write=False)
    chi1.setflags(write=False)
    return PerturbedBatchPlan(plan=plan, perturbed_features=perturbed, chi1=chi1, m=int(m))
