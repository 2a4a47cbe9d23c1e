"""Regional codebook: seeded k-means training, assignment, `ATTNCDBK` format.

Training is Lloyd's algorithm with k-means++ initialization driven by an
explicit seed; results are a pure function of (corpus order, seed). Empty
clusters are repaired by donating the point currently farthest from its
centroid, so the codebook always has exactly V distinct centroids.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

from .errors import DimensionError, FormatError, ParameterError, TrainingError, ValidationError
from .features import RegionalFeatureSet
from .tensor_store import _read_exact, _read_u32

CODEBOOK_MAGIC = b"ATTNCDBK"
CODEBOOK_VERSION = 1
CODEBOOK_EXTENSION = ".cdbk"

DEFAULT_MAX_ITERS = 100
DEFAULT_TOL = 1e-4


@dataclass(frozen=True)
class TrainingMeta:
    iterations: int
    inertia: float
    seed: int
    corpus_hash: bytes  # sha256 over the training corpus, 32 bytes


@dataclass(frozen=True, eq=False)
class Codebook:
    """V cluster centroids in K-dimensional feature space."""

    centroids: np.ndarray
    meta: TrainingMeta

    def __post_init__(self):
        arr = np.ascontiguousarray(self.centroids, dtype=np.float32)
        object.__setattr__(self, "centroids", arr)
        if arr.ndim != 2:
            raise ValidationError(f"centroids must be a V x K matrix, got ndim={arr.ndim}")
        if arr.shape[0] < 2:
            raise ValidationError(f"a codebook needs at least 2 clusters, got {arr.shape[0]}")
        if not np.isfinite(arr).all():
            raise ValidationError("centroids contain NaN or Inf")
        if len(np.unique(arr, axis=0)) != arr.shape[0]:
            raise ValidationError("codebook contains duplicate centroids")
        if len(self.meta.corpus_hash) != 32:
            raise ValidationError("corpus hash must be 32 bytes (sha256)")

    @property
    def num_clusters(self) -> int:
        return self.centroids.shape[0]

    @property
    def channels(self) -> int:
        return self.centroids.shape[1]


def corpus_digest(corpus: Iterable[RegionalFeatureSet]) -> bytes:
    """Order-sensitive sha256 over the feature sets used for training."""
    digest = hashlib.sha256()
    for feature_set in corpus:
        digest.update(feature_set.image_id.encode("utf-8"))
        digest.update(struct.pack("<II", *feature_set.features.shape))
        digest.update(feature_set.features.astype("<f4", copy=False).tobytes())
    return digest.digest()


def _stack_corpus(corpus: Iterable[RegionalFeatureSet]) -> tuple[np.ndarray, bytes]:
    digest = hashlib.sha256()
    blocks: list[np.ndarray] = []
    channels: int | None = None
    for feature_set in corpus:
        if channels is None:
            channels = feature_set.channels
        elif feature_set.channels != channels:
            raise DimensionError(
                f"corpus mixes channel counts: {feature_set.channels} vs {channels}"
            )
        digest.update(feature_set.image_id.encode("utf-8"))
        digest.update(struct.pack("<II", *feature_set.features.shape))
        digest.update(feature_set.features.astype("<f4", copy=False).tobytes())
        if feature_set.num_regions:
            blocks.append(feature_set.features)
    if not blocks:
        raise TrainingError("training corpus contains no feature rows")
    return np.concatenate(blocks, axis=0), digest.digest()


def _squared_distances(rows: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # (n, V) matrix via the expanded form; float64 keeps argmin ties stable.
    r2 = np.sum(rows * rows, axis=1)[:, None]
    c2 = np.sum(centroids * centroids, axis=1)[None, :]
    d2 = r2 + c2 - 2.0 * (rows @ centroids.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


def _kmeans_plus_plus(rows: np.ndarray, v: int, rng: np.random.Generator) -> np.ndarray:
    n = rows.shape[0]
    centroids = np.empty((v, rows.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centroids[0] = rows[first]
    d2 = _squared_distances(rows, centroids[:1]).ravel()
    for i in range(1, v):
        total = d2.sum()
        if total <= 0.0:
            raise TrainingError("k-means++ ran out of distinct seeding candidates")
        idx = int(rng.choice(n, p=d2 / total))
        centroids[i] = rows[idx]
        d2 = np.minimum(d2, _squared_distances(rows, centroids[i : i + 1]).ravel())
    return centroids


def _repair_empty_clusters(labels: np.ndarray, d2: np.ndarray, v: int) -> np.ndarray:
    counts = np.bincount(labels, minlength=v)
    if counts.min() > 0:
        return labels
    labels = labels.copy()
    point_dist = d2[np.arange(labels.shape[0]), labels]
    for cluster in np.flatnonzero(counts == 0):
        # Only points whose current cluster keeps >= 2 members may move,
        # so a repair never empties another cluster.
        movable = counts[labels] >= 2
        if not movable.any():
            raise TrainingError("cannot repair empty cluster: no donor points available")
        candidate_dist = np.where(movable, point_dist, -np.inf)
        donor = int(np.argmax(candidate_dist))  # ties: lowest row index
        counts[labels[donor]] -= 1
        labels[donor] = cluster
        counts[cluster] += 1
        point_dist[donor] = 0.0
    return labels


def train_codebook(
    corpus: Iterable[RegionalFeatureSet],
    v: int,
    seed: int,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
) -> Codebook:
    """Cluster all corpus feature rows into a V-centroid codebook.

    Runs seeded k-means++ then Lloyd iterations until the relative centroid
    shift drops below `tol` or `max_iters` is reached. Raises TrainingError
    when the corpus has fewer than `v` distinct rows.
    """
    if v < 2:
        raise TrainingError(f"cluster count must be >= 2, got {v}")
    if not 0 <= seed < 2**64:
        raise ParameterError(f"seed must fit an unsigned 64-bit integer, got {seed}")
    if max_iters < 1:
        raise TrainingError(f"max_iters must be >= 1, got {max_iters}")
    if tol < 0:
        raise TrainingError(f"tol must be >= 0, got {tol}")
    stacked, digest = _stack_corpus(corpus)
    rows = stacked.astype(np.float64)
    if len(np.unique(stacked, axis=0)) < v:
        raise TrainingError(
            f"corpus has fewer than {v} distinct feature rows; cannot train {v} clusters"
        )

    rng = np.random.default_rng(seed)
    centroids = _kmeans_plus_plus(rows, v, rng)
    iterations = 0
    for _ in range(max_iters):
        iterations += 1
        d2 = _squared_distances(rows, centroids)
        labels = _repair_empty_clusters(np.argmin(d2, axis=1), d2, v)
        updated = np.empty_like(centroids)
        for cluster in range(v):
            updated[cluster] = rows[labels == cluster].mean(axis=0)
        shift = np.linalg.norm(updated - centroids)
        scale = max(np.linalg.norm(centroids), np.finfo(np.float64).tiny)
        centroids = updated
        if shift / scale < tol:
            break

    final_d2 = _squared_distances(rows, centroids)
    inertia = float(final_d2.min(axis=1).sum())
    meta = TrainingMeta(iterations=iterations, inertia=inertia, seed=seed, corpus_hash=digest)
    return Codebook(centroids=centroids.astype(np.float32), meta=meta)


def assign(codebook: Codebook, features: np.ndarray) -> np.ndarray:
    """Nearest-centroid index for each feature row; ties pick the lowest index."""
    rows = np.asarray(features, dtype=np.float64)
    if rows.ndim != 2:
        raise DimensionError(f"features must be a T x K matrix, got ndim={rows.ndim}")
    if rows.shape[1] != codebook.channels:
        raise DimensionError(
            f"feature dimension {rows.shape[1]} does not match codebook K={codebook.channels}"
        )
    if rows.shape[0] == 0:
        return np.empty(0, dtype=np.int64)
    d2 = _squared_distances(rows, codebook.centroids.astype(np.float64))
    return np.argmin(d2, axis=1).astype(np.int64)


def write_codebook(codebook: Codebook, sink: BinaryIO) -> int:
    written = 0
    sink.write(CODEBOOK_MAGIC)
    written += len(CODEBOOK_MAGIC)
    v, k = codebook.centroids.shape
    sink.write(struct.pack("<IIIQId", CODEBOOK_VERSION, v, k, codebook.meta.seed,
                           codebook.meta.iterations, codebook.meta.inertia))
    written += struct.calcsize("<IIIQId")
    sink.write(codebook.meta.corpus_hash)
    written += 32
    payload = codebook.centroids.astype("<f4", copy=False).tobytes()
    sink.write(payload)
    written += len(payload)
    return written


def read_codebook(source: BinaryIO) -> Codebook:
    magic = _read_exact(source, len(CODEBOOK_MAGIC), "magic")
    if magic != CODEBOOK_MAGIC:
        raise FormatError(f"bad magic {magic!r}; expected {CODEBOOK_MAGIC!r}")
    version = _read_u32(source, "version")
    if version != CODEBOOK_VERSION:
        raise FormatError(f"unsupported codebook format version {version}")
    header = struct.Struct("<IIQId")
    v, k, seed, iterations, inertia = header.unpack(_read_exact(source, header.size, "header"))
    corpus_hash = _read_exact(source, 32, "corpus hash")
    raw = _read_exact(source, v * k * 4, "centroids")
    centroids = np.frombuffer(raw, dtype="<f4").reshape(v, k)
    meta = TrainingMeta(iterations=iterations, inertia=inertia, seed=seed, corpus_hash=corpus_hash)
    return Codebook(centroids=centroids, meta=meta)


def write_codebook_file(codebook: Codebook, path: str | Path) -> int:
    with open(path, "wb") as sink:
        return write_codebook(codebook, sink)


def read_codebook_file(path: str | Path) -> Codebook:
    with open(path, "rb") as source:
        return read_codebook(source)
