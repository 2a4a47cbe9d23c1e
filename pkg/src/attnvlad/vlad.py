"""VLAD descriptor construction, similarity, retrieval, `ATTNVLD1` format.

Row v of the descriptor is the sum of (feature - centroid_v) over the feature
rows assigned to cluster v. Rows are intra-normalized to unit L2 (zero rows
stay zero) and the flattened matrix is then globally L2-normalized, making
cosine similarity a plain dot product.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from .codebook import Codebook, assign
from .errors import (
    DegenerateInputError,
    DimensionError,
    FormatError,
    ParameterError,
    ValidationError,
)
from .features import RegionalFeatureSet
from .tensor_store import _read_exact, _read_str, _read_u32, _write_str

VLAD_MAGIC = b"ATTNVLD1"
VLAD_VERSION = 1
VLAD_EXTENSION = ".vlad"

NORM_NONE = "none"
NORM_INTRA_GLOBAL = "intra+global-L2"
_NORMALIZATIONS = (NORM_NONE, NORM_INTRA_GLOBAL)


@dataclass(frozen=True, eq=False)
class VladDescriptor:
    """V x K residual-aggregation descriptor for one image."""

    image_id: str
    matrix: np.ndarray
    normalization: str = NORM_INTRA_GLOBAL

    def __post_init__(self):
        arr = np.ascontiguousarray(self.matrix, dtype=np.float32)
        object.__setattr__(self, "matrix", arr)
        if arr.ndim != 2:
            raise ValidationError(f"descriptor must be a V x K matrix, got ndim={arr.ndim}")
        if not np.isfinite(arr).all():
            raise ValidationError("descriptor contains NaN or Inf")
        if self.normalization not in _NORMALIZATIONS:
            raise ValidationError(f"unknown normalization tag {self.normalization!r}")
        if self.normalization == NORM_INTRA_GLOBAL and not self.is_degenerate:
            norm = float(np.linalg.norm(arr.astype(np.float64)))
            if abs(norm - 1.0) > 1e-6:
                raise ValidationError(f"normalized descriptor has L2 norm {norm}, expected 1")

    @property
    def is_degenerate(self) -> bool:
        return not self.matrix.any()

    def flat(self) -> np.ndarray:
        return self.matrix.reshape(-1)


@dataclass(frozen=True)
class MatchResult:
    """Full similarity ranking of one query against the reference set."""

    query_id: str
    ranking: tuple[tuple[str, float], ...]
    best_match: str

    def __post_init__(self):
        if not self.ranking:
            raise ValidationError("a match result needs at least one reference")
        scores = [score for _, score in self.ranking]
        if scores != sorted(scores, reverse=True):
            raise ValidationError("ranking scores are not descending")
        if self.best_match != self.ranking[0][0]:
            raise ValidationError("best_match must be the first ranked reference")

    @property
    def confidence(self) -> float:
        return self.ranking[0][1]


def encode_vlad(
    features: RegionalFeatureSet,
    codebook: Codebook,
    normalization: str = NORM_INTRA_GLOBAL,
) -> VladDescriptor:
    """Aggregate per-cluster residuals of a feature set into a descriptor.

    Clusters with no assigned rows contribute zero rows. The all-residuals-zero
    case (every feature equals its centroid) yields a degenerate zero
    descriptor that callers can detect via `is_degenerate`.
    """
    if normalization not in _NORMALIZATIONS:
        raise ParameterError(f"unknown normalization tag {normalization!r}")
    if features.num_regions == 0:
        raise DegenerateInputError(
            f"feature set {features.image_id!r} has no rows; nothing to encode"
        )
    if features.channels != codebook.channels:
        raise DimensionError(
            f"feature dimension {features.channels} does not match codebook K={codebook.channels}"
        )
    rows = features.features.astype(np.float64)
    labels = assign(codebook, features.features)

    # Accumulate in a content-determined order so the result is bit-identical
    # under any permutation of the input rows.
    order = np.lexsort(rows.T[::-1])
    v, k = codebook.centroids.shape
    residual = np.zeros((v, k), dtype=np.float64)
    np.add.at(residual, labels[order], rows[order])
    counts = np.bincount(labels, minlength=v).astype(np.float64)
    residual -= counts[:, None] * codebook.centroids.astype(np.float64)

    if normalization == NORM_INTRA_GLOBAL:
        row_norms = np.linalg.norm(residual, axis=1)
        nonzero = row_norms > 0.0
        residual[nonzero] /= row_norms[nonzero, None]
        total = np.linalg.norm(residual)
        if total > 0.0:
            residual /= total
    return VladDescriptor(
        image_id=features.image_id,
        matrix=residual.astype(np.float32),
        normalization=normalization,
    )


def similarity(a: VladDescriptor, b: VladDescriptor) -> float:
    """Cosine similarity of the flattened descriptors, in [-1, 1]."""
    if a.matrix.shape != b.matrix.shape:
        raise DimensionError(
            f"descriptor shapes differ: {a.matrix.shape} vs {b.matrix.shape}"
        )
    if a.normalization != b.normalization:
        raise ParameterError(
            f"normalization tags differ: {a.normalization!r} vs {b.normalization!r}"
        )
    x = a.flat().astype(np.float64)
    y = b.flat().astype(np.float64)
    nx = np.linalg.norm(x)
    ny = np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        raise DegenerateInputError("cannot compare a zero-norm descriptor")
    return float(np.clip(np.dot(x, y) / (nx * ny), -1.0, 1.0))


def match_query(query: VladDescriptor, references: Sequence[VladDescriptor]) -> MatchResult:
    """Rank all references by similarity to the query (exhaustive linear scan).

    Ties are broken by reference ingestion order, so the ranking is
    deterministic and identical to any parallel scan merged stably.
    """
    if not references:
        raise ParameterError("reference list must not be empty")
    scores = [similarity(query, ref) for ref in references]
    order = sorted(range(len(references)), key=lambda i: (-scores[i], i))
    ranking = tuple((references[i].image_id, scores[i]) for i in order)
    return MatchResult(query_id=query.image_id, ranking=ranking, best_match=ranking[0][0])


def write_vlad(descriptor: VladDescriptor, sink: BinaryIO) -> int:
    written = 0
    sink.write(VLAD_MAGIC)
    written += len(VLAD_MAGIC)
    v, k = descriptor.matrix.shape
    sink.write(struct.pack("<III", VLAD_VERSION, v, k))
    written += 12
    written += _write_str(sink, descriptor.normalization)
    written += _write_str(sink, descriptor.image_id)
    payload = descriptor.matrix.astype("<f4", copy=False).tobytes()
    sink.write(payload)
    written += len(payload)
    return written


def read_vlad(source: BinaryIO) -> VladDescriptor:
    magic = _read_exact(source, len(VLAD_MAGIC), "magic")
    if magic != VLAD_MAGIC:
        raise FormatError(f"bad magic {magic!r}; expected {VLAD_MAGIC!r}")
    version = _read_u32(source, "version")
    if version != VLAD_VERSION:
        raise FormatError(f"unsupported VLAD format version {version}")
    v = _read_u32(source, "clusters")
    k = _read_u32(source, "channels")
    if min(v, k) < 1:
        raise FormatError(f"dimensions must be >= 1, got (V={v}, K={k})")
    normalization = _read_str(source, "normalization tag")
    image_id = _read_str(source, "image_id")
    raw = _read_exact(source, v * k * 4, "descriptor values")
    matrix = np.frombuffer(raw, dtype="<f4").reshape(v, k)
    return VladDescriptor(image_id=image_id, matrix=matrix, normalization=normalization)


def write_vlad_file(descriptor: VladDescriptor, path: str | Path) -> int:
    with open(path, "wb") as sink:
        return write_vlad(descriptor, sink)


def read_vlad_file(path: str | Path) -> VladDescriptor:
    with open(path, "rb") as source:
        return read_vlad(source)
