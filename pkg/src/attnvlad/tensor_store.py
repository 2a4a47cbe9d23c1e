"""Portable activation-tensor file format (`.atn`) and in-memory representation.

A tensor holds the post-activation output of one convolutional layer for one
image. Values are stored row-major (y outer, x middle, k inner) so the
K-vector at a spatial location -- the local descriptor -- is a contiguous
slice. All integers in the file are little-endian; payload is 32-bit
little-endian float.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .errors import FormatError, TruncatedPayloadError, ValidationError

TENSOR_MAGIC = b"ATTNVLAD"
TENSOR_VERSION = 1
DTYPE_F32LE = 0
TENSOR_EXTENSION = ".atn"

_U32 = struct.Struct("<I")


@dataclass(frozen=True, eq=False)
class ActivationTensor:
    """One layer's X*Y*K activation block, immutable after construction.

    `values` has shape (Y, X, K), dtype float32, C-contiguous. Entries must
    be finite and non-negative (the format stores rectified activations only).
    """

    values: np.ndarray
    layer_tag: str
    image_id: str

    def __post_init__(self):
        arr = np.ascontiguousarray(self.values, dtype=np.float32)
        object.__setattr__(self, "values", arr)
        if arr.ndim != 3:
            raise ValidationError(f"expected 3-D (Y, X, K) values, got ndim={arr.ndim}")
        if min(arr.shape) < 1:
            raise ValidationError(f"all dimensions must be >= 1, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValidationError("tensor contains NaN or Inf values")
        if (arr < 0).any():
            raise ValidationError("tensor contains negative activations; store post-activation values")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


def _write_str(sink: BinaryIO, text: str) -> int:
    payload = text.encode("utf-8")
    sink.write(_U32.pack(len(payload)))
    sink.write(payload)
    return 4 + len(payload)


def _read_exact(source: BinaryIO, count: int, what: str) -> bytes:
    data = source.read(count)
    if len(data) != count:
        raise TruncatedPayloadError(count, len(data), what)
    return data


def _read_u32(source: BinaryIO, what: str) -> int:
    return _U32.unpack(_read_exact(source, 4, what))[0]


def _read_str(source: BinaryIO, what: str) -> str:
    length = _read_u32(source, f"{what} length")
    raw = _read_exact(source, length, what)
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{what} is not valid UTF-8") from exc


def write_tensor(tensor: ActivationTensor, sink: BinaryIO) -> int:
    """Serialize a tensor; returns the number of bytes written.

    Layout: magic, u32 version, u32 dtype, u32 Y, u32 X, u32 K,
    length-prefixed layer_tag and image_id, then Y*X*K f32le values.
    """
    written = 0
    sink.write(TENSOR_MAGIC)
    written += len(TENSOR_MAGIC)
    y, x, k = tensor.values.shape
    sink.write(struct.pack("<IIIII", TENSOR_VERSION, DTYPE_F32LE, y, x, k))
    written += 20
    written += _write_str(sink, tensor.layer_tag)
    written += _write_str(sink, tensor.image_id)
    payload = tensor.values.astype("<f4", copy=False).tobytes()
    sink.write(payload)
    written += len(payload)
    return written


def read_tensor(source: BinaryIO) -> ActivationTensor:
    """Parse a tensor stream; the result satisfies all tensor invariants."""
    magic = _read_exact(source, len(TENSOR_MAGIC), "magic")
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad magic {magic!r}; expected {TENSOR_MAGIC!r}")
    version = _read_u32(source, "version")
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported tensor format version {version}")
    dtype_code = _read_u32(source, "dtype")
    if dtype_code != DTYPE_F32LE:
        raise FormatError(f"unsupported dtype code {dtype_code}; only f32le (0) is supported")
    y = _read_u32(source, "height")
    x = _read_u32(source, "width")
    k = _read_u32(source, "channels")
    if min(y, x, k) < 1:
        raise FormatError(f"dimensions must be >= 1, got (Y={y}, X={x}, K={k})")
    layer_tag = _read_str(source, "layer_tag")
    image_id = _read_str(source, "image_id")
    count = y * x * k
    raw = _read_exact(source, count * 4, "values")
    values = np.frombuffer(raw, dtype="<f4").reshape(y, x, k)
    return ActivationTensor(values=values, layer_tag=layer_tag, image_id=image_id)


def write_tensor_file(tensor: ActivationTensor, path: str | Path) -> int:
    with open(path, "wb") as sink:
        return write_tensor(tensor, sink)


def read_tensor_file(path: str | Path) -> ActivationTensor:
    with open(path, "rb") as source:
        return read_tensor(source)
