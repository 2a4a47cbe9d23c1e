"""Regional feature construction and the `ATTNFEAT` interchange format.

A local descriptor is the K-vector of channel activations at one spatial
location. A region's feature is the elementwise sum of the local descriptors
under its positions. An image's feature set stacks the selected regions of
each configured layer, in layer order, into one T*K matrix.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Mapping, Sequence

import numpy as np

from .errors import (
    ConsistencyError,
    DimensionError,
    FormatError,
    ParameterError,
    ValidationError,
)
from .regions import Region, RegionSelection
from .tensor_store import ActivationTensor, _read_exact, _read_str, _read_u32, _write_str

FEATURE_MAGIC = b"ATTNFEAT"
FEATURE_VERSION = 1
FEATURE_EXTENSION = ".feat"


@dataclass(frozen=True, eq=False)
class LocalDescriptor:
    position: tuple[int, int]
    vector: np.ndarray


@dataclass(frozen=True, eq=False)
class RegionalFeatureSet:
    """T*K matrix of aggregated per-region descriptors for one image.

    per_layer_counts maps layer_tag -> number of rows that layer contributed,
    in layer order; it is None for sets loaded from disk (the file format
    does not carry it).
    """

    image_id: str
    features: np.ndarray
    per_layer_counts: Mapping[str, int] | None = None

    def __post_init__(self):
        arr = np.ascontiguousarray(self.features, dtype=np.float32)
        object.__setattr__(self, "features", arr)
        if arr.ndim != 2:
            raise ValidationError(f"features must be a T x K matrix, got ndim={arr.ndim}")
        if not np.isfinite(arr).all():
            raise ValidationError("feature matrix contains NaN or Inf")
        if arr.shape[0] and not arr.any(axis=1).all():
            raise ValidationError("feature matrix contains an all-zero row")
        if self.per_layer_counts is not None:
            total = sum(self.per_layer_counts.values())
            if total != arr.shape[0]:
                raise ValidationError(
                    f"per-layer counts sum to {total} but matrix has {arr.shape[0]} rows"
                )

    @property
    def num_regions(self) -> int:
        return self.features.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[1]


def local_descriptor(tensor: ActivationTensor, x: int, y: int) -> LocalDescriptor:
    """The K activations stacked at spatial location (x, y)."""
    if not (0 <= x < tensor.width and 0 <= y < tensor.height):
        raise ParameterError(
            f"position ({x}, {y}) outside {tensor.width}x{tensor.height} feature map"
        )
    return LocalDescriptor(position=(x, y), vector=tensor.values[y, x, :].copy())


def aggregate_region(tensor: ActivationTensor, region: Region) -> np.ndarray:
    """Elementwise sum of the local descriptors under a region's positions.

    Positions are summed in (y, x) order so the result is independent of the
    set's iteration order; accumulation is float64.
    """
    if not region.positions:
        raise ParameterError("cannot aggregate an empty region")
    ordered = sorted(region.positions, key=lambda p: (p[1], p[0]))
    for x, y in ordered:
        if not (0 <= x < tensor.width and 0 <= y < tensor.height):
            raise ParameterError(f"region position ({x}, {y}) outside tensor bounds")
    rows = np.stack([tensor.values[y, x, :] for x, y in ordered]).astype(np.float64)
    return rows.sum(axis=0)


def build_feature_set(
    layer_selections: Sequence[tuple[ActivationTensor, RegionSelection]],
) -> RegionalFeatureSet:
    """Fuse the selected regions of all layers into one image feature set.

    Rows appear layer by layer in the given order and, within a layer, in the
    selection's energy ordering. All tensors must share image_id and channel
    count K.
    """
    if not layer_selections:
        raise ParameterError("at least one (tensor, selection) pair is required")
    image_id = layer_selections[0][0].image_id
    channels = layer_selections[0][0].channels
    rows: list[np.ndarray] = []
    counts: dict[str, int] = {}
    for tensor, selection in layer_selections:
        if tensor.image_id != image_id:
            raise ConsistencyError(
                f"image_id mismatch across layers: {tensor.image_id!r} vs {image_id!r}"
            )
        if tensor.channels != channels:
            raise DimensionError(
                f"channel count mismatch across layers: {tensor.channels} vs {channels}"
            )
        if selection.layer_tag and selection.layer_tag != tensor.layer_tag:
            raise ConsistencyError(
                f"selection for layer {selection.layer_tag!r} applied to tensor "
                f"layer {tensor.layer_tag!r}"
            )
        for region in selection.regions:
            rows.append(aggregate_region(tensor, region))
        counts[tensor.layer_tag] = len(selection.regions)
    if rows:
        matrix = np.stack(rows).astype(np.float32)
    else:
        matrix = np.zeros((0, channels), dtype=np.float32)
    return RegionalFeatureSet(image_id=image_id, features=matrix, per_layer_counts=counts)


def write_feature_set(feature_set: RegionalFeatureSet, sink: BinaryIO) -> int:
    written = 0
    sink.write(FEATURE_MAGIC)
    written += len(FEATURE_MAGIC)
    t, k = feature_set.features.shape
    sink.write(struct.pack("<III", FEATURE_VERSION, t, k))
    written += 12
    written += _write_str(sink, feature_set.image_id)
    payload = feature_set.features.astype("<f4", copy=False).tobytes()
    sink.write(payload)
    written += len(payload)
    return written


def read_feature_set(source: BinaryIO) -> RegionalFeatureSet:
    magic = _read_exact(source, len(FEATURE_MAGIC), "magic")
    if magic != FEATURE_MAGIC:
        raise FormatError(f"bad magic {magic!r}; expected {FEATURE_MAGIC!r}")
    version = _read_u32(source, "version")
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature format version {version}")
    t = _read_u32(source, "row count")
    k = _read_u32(source, "channels")
    if k < 1:
        raise FormatError(f"channel count must be >= 1, got {k}")
    image_id = _read_str(source, "image_id")
    raw = _read_exact(source, t * k * 4, "feature rows")
    matrix = np.frombuffer(raw, dtype="<f4").reshape(t, k)
    return RegionalFeatureSet(image_id=image_id, features=matrix, per_layer_counts=None)


def write_feature_set_file(feature_set: RegionalFeatureSet, path: str | Path) -> int:
    with open(path, "wb") as sink:
        return write_feature_set(feature_set, sink)


def read_feature_set_file(path: str | Path) -> RegionalFeatureSet:
    with open(path, "rb") as source:
        return read_feature_set(source)
