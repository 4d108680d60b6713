"""
Reading, writing, validation and summaries of checkpoints stored in the
safetensors container.

Layout of a container file:

    bytes 0-7       unsigned 64-bit little-endian header length N
    bytes 8..8+N    UTF-8 JSON header, tensor name -> {"dtype", "shape",
                    "data_offsets": [begin, end]}, optional "__metadata__"
    remainder       row-major little-endian tensor data, offsets relative
                    to the end of the header

Only the floating point dtypes F32, F16 and BF16 are supported. All
statistics and all arithmetic elsewhere in the package are carried out in
float32, narrow dtypes only exist on disk.
"""

import hashlib
import json
import logging
import os
import struct
import tempfile
from collections.abc import Mapping
from typing import Literal

import numpy as np
from pydantic import BaseModel, computed_field

_log = logging.getLogger(__name__)

DtypePolicy = Literal["keep", "force-f32"]

# Storage dtypes; bfloat16 has no numpy type and is kept as raw bit patterns
DTYPES = {
    "F32": np.dtype("<f4"),
    "F16": np.dtype("<f2"),
    "BF16": np.dtype("<u2"),
}

# Largest finite value of each dtype, exactly representable in float32
FINITE_MAX = {
    "F32": float(np.finfo(np.float32).max),
    "F16": float(np.finfo(np.float16).max),
    "BF16": 3.3895313892515355e38,
}

METADATA_KEY = "__metadata__"
HEADER_LENGTH_BYTES = 8


class CheckpointFormatException(ValueError):
    pass


class TruncatedHeaderException(CheckpointFormatException):
    pass


class MalformedHeaderException(CheckpointFormatException):
    pass


class DataOffsetsException(CheckpointFormatException):
    pass


class UnsupportedDtypeException(CheckpointFormatException):
    pass


def _bfloat16_bits_to_float32(bits):
    wide = np.array(bits, dtype=np.uint32)
    wide <<= 16
    return wide.view(np.float32)


def _float32_to_bfloat16_bits(values):
    """Round float32 values to bfloat16 (nearest, ties to even)."""
    values = np.asarray(values, dtype=np.float32)
    flat = np.ascontiguousarray(values).reshape(-1)
    bits = flat.view(np.uint32)
    rounded = ((bits + (((bits >> 16) & 1) + 0x7FFF)) >> 16).astype(np.uint16)
    nan = np.isnan(flat)
    if np.any(nan):
        # Keep NaNs quiet instead of letting the rounding carry turn them into infinities
        rounded[nan] = ((bits[nan] >> 16) | 0x0040).astype(np.uint16)
    return rounded.reshape(values.shape)


class Tensor:
    """
    A dense tensor in one of the supported storage dtypes.

    `data` holds the stored representation (float32, float16 or the raw
    uint16 bit patterns of bfloat16) and is read-only.
    """

    __slots__ = ("dtype", "data")

    def __init__(self, dtype, data):
        if dtype not in DTYPES:
            raise UnsupportedDtypeException(f"Unsupported dtype '{dtype}'.")
        data = np.asarray(data)
        if data.dtype != DTYPES[dtype]:
            raise TypeError(
                f"Storage for dtype {dtype} must be {DTYPES[dtype]}, got {data.dtype}."
            )
        if data.flags.writeable:
            data = data.view()
            data.flags.writeable = False
        self.dtype = dtype
        self.data = data

    @classmethod
    def from_float32(cls, values, dtype="F32", name=None):
        """
        Build a tensor of the given dtype from float32 values. Values beyond
        the finite range of a narrow dtype are clamped and reported.
        """
        values = np.asarray(values, dtype=np.float32)
        if dtype not in DTYPES:
            raise UnsupportedDtypeException(f"Unsupported dtype '{dtype}'.")
        if dtype != "F32":
            limit = np.float32(FINITE_MAX[dtype])
            overflow = np.abs(values) > limit
            nb_clamped = int(np.count_nonzero(overflow))
            if nb_clamped > 0:
                _log.warning(
                    f"Clamped {nb_clamped} value(s) of tensor '{name or '?'}' to the finite range of {dtype}."
                )
                values = np.clip(values, -limit, limit)
        if dtype == "F32":
            data = values.astype(DTYPES["F32"])
        elif dtype == "F16":
            data = values.astype(DTYPES["F16"])
        else:
            data = _float32_to_bfloat16_bits(values)
        return cls(dtype, data)

    @property
    def shape(self):
        return tuple(self.data.shape)

    @property
    def size(self):
        return int(self.data.size)

    @property
    def nbytes(self):
        return self.size * DTYPES[self.dtype].itemsize

    def to_float32(self):
        """Return a float32 copy of the values (exact for all dtypes)."""
        if self.dtype == "BF16":
            return _bfloat16_bits_to_float32(self.data)
        return self.data.astype(np.float32)

    def cast(self, dtype, name=None):
        if dtype == self.dtype:
            return self
        return Tensor.from_float32(self.to_float32(), dtype, name=name)

    def tobytes(self):
        return np.ascontiguousarray(self.data).tobytes()

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return (
            self.dtype == other.dtype
            and self.shape == other.shape
            and self.tobytes() == other.tobytes()
        )

    def __repr__(self):
        return f"Tensor(dtype={self.dtype}, shape={list(self.shape)})"


class TensorMap(Mapping):
    """
    Immutable mapping from tensor name to `Tensor`, iterated in
    lexicographic name order, plus a string-to-string metadata map.
    """

    def __init__(self, entries=None, metadata=None):
        entries = dict(entries or {})
        for name, tensor in entries.items():
            if not isinstance(name, str) or len(name) == 0:
                raise ValueError("Tensor names must be non-empty strings.")
            if not isinstance(tensor, Tensor):
                raise TypeError(f"Entry '{name}' is not a Tensor.")
        metadata = dict(metadata or {})
        for key, value in metadata.items():
            if not isinstance(key, str) or not isinstance(value, str):
                raise ValueError("Metadata must map strings to strings.")
        self._entries = {name: entries[name] for name in sorted(entries)}
        self._metadata = metadata

    def __getitem__(self, name):
        return self._entries[name]

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    @property
    def metadata(self):
        return dict(self._metadata)

    @property
    def parameter_count(self):
        return sum(tensor.size for tensor in self._entries.values())

    def replace_metadata(self, metadata):
        return TensorMap(self._entries, metadata)

    def cast(self, dtype_policy):
        if dtype_policy == "keep":
            return self
        return TensorMap(
            {name: tensor.cast("F32", name=name) for name, tensor in self.items()},
            self._metadata,
        )

    def __eq__(self, other):
        if not isinstance(other, TensorMap):
            return NotImplemented
        return (
            list(self._entries) == list(other._entries)
            and all(self[name] == other[name] for name in self._entries)
            and self._metadata == other._metadata
        )

    def __repr__(self):
        return f"TensorMap({len(self)} tensors, {self.parameter_count} parameters)"


#
# Container decoding
#


def _reject_duplicate_keys(pairs):
    result = {}
    for key, value in pairs:
        if key in result:
            raise MalformedHeaderException(f"Duplicate key '{key}' in header.")
        result[key] = value
    return result


def _is_int(value):
    return isinstance(value, int) and not isinstance(value, bool)


def _read_header(fh, file_size):
    prefix = fh.read(HEADER_LENGTH_BYTES)
    if len(prefix) < HEADER_LENGTH_BYTES:
        raise TruncatedHeaderException(
            f"File has {file_size} bytes, which is too short for the header length field."
        )
    (header_length,) = struct.unpack("<Q", prefix)
    if HEADER_LENGTH_BYTES + header_length > file_size:
        raise TruncatedHeaderException(
            f"Header length {header_length} exceeds the file size of {file_size} bytes."
        )
    raw = fh.read(header_length)
    try:
        header = json.loads(raw.decode("utf-8"), object_pairs_hook=_reject_duplicate_keys)
    except MalformedHeaderException:
        raise
    except (UnicodeDecodeError, ValueError) as exc:
        raise MalformedHeaderException(f"Header is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise MalformedHeaderException("Header must be a JSON object.")
    return header, header_length


def _parse_layout(header, data_length):
    """
    Validate the header against the size of the data region. Returns the
    tensor layout {name: (dtype, shape, begin, end)} and the metadata.
    """
    header = dict(header)
    metadata = header.pop(METADATA_KEY, {})
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise MalformedHeaderException("'__metadata__' must map strings to strings.")

    layout = {}
    for name, info in header.items():
        if len(name) == 0:
            raise MalformedHeaderException("Empty tensor name in header.")
        if not isinstance(info, dict) or not {"dtype", "shape", "data_offsets"} <= set(info):
            raise MalformedHeaderException(
                f"Entry '{name}' must have 'dtype', 'shape' and 'data_offsets'."
            )
        dtype = info["dtype"]
        if dtype not in DTYPES:
            raise UnsupportedDtypeException(f"Tensor '{name}' has unsupported dtype '{dtype}'.")
        shape = info["shape"]
        if not isinstance(shape, list) or not all(_is_int(n) and n >= 0 for n in shape):
            raise MalformedHeaderException(f"Tensor '{name}' has an invalid shape {shape!r}.")
        offsets = info["data_offsets"]
        if not isinstance(offsets, list) or len(offsets) != 2 or not all(_is_int(o) for o in offsets):
            raise MalformedHeaderException(f"Tensor '{name}' has invalid data_offsets {offsets!r}.")
        begin, end = offsets
        if begin < 0 or end < begin or end > data_length:
            raise DataOffsetsException(
                f"Tensor '{name}' has data_offsets [{begin}, {end}] outside the data region "
                f"of {data_length} bytes."
            )
        expected = int(np.prod(shape, dtype=np.int64)) * DTYPES[dtype].itemsize
        if end - begin != expected:
            raise DataOffsetsException(
                f"Tensor '{name}' spans {end - begin} bytes, but dtype {dtype} and shape {shape} "
                f"require {expected}."
            )
        layout[name] = (dtype, tuple(shape), begin, end)

    regions = sorted((begin, end, name) for name, (_, _, begin, end) in layout.items() if end > begin)
    for (_, prev_end, prev_name), (begin, _, name) in zip(regions[:-1], regions[1:]):
        if begin < prev_end:
            raise DataOffsetsException(f"Data of tensors '{prev_name}' and '{name}' overlap.")

    return layout, metadata


def load_checkpoint(path):
    """
    Load a checkpoint. Tensor data is memory mapped and only read from disk
    when it is accessed.

    Parameters
    ----------
    path : str or os.PathLike
        Container file.

    Returns
    -------
    checkpoint : TensorMap
    """
    path = os.fspath(path)
    file_size = os.path.getsize(path)
    with open(path, "rb") as fh:
        header, header_length = _read_header(fh, file_size)
    data_start = HEADER_LENGTH_BYTES + header_length
    data_length = file_size - data_start
    layout, metadata = _parse_layout(header, data_length)

    buffer = None
    if data_length > 0:
        buffer = np.memmap(path, dtype=np.uint8, mode="r", offset=data_start, shape=(data_length,))

    entries = {}
    for name, (dtype, shape, begin, end) in layout.items():
        if end == begin:
            data = np.zeros(shape, dtype=DTYPES[dtype])
        else:
            count = (end - begin) // DTYPES[dtype].itemsize
            data = np.frombuffer(buffer, dtype=DTYPES[dtype], count=count, offset=begin).reshape(shape)
        entries[name] = Tensor(dtype, data)

    _log.debug(f"Loaded {len(entries)} tensors from '{path}'.")
    return TensorMap(entries, metadata)


#
# Container encoding
#


class CheckpointWriter:
    """
    Streaming writer. The header is computed up front from the declared
    dtypes and shapes, tensors are then written one at a time in
    lexicographic name order. Peak memory is one tensor. Data goes to a
    temporary file next to `path` that replaces `path` only once every
    tensor is written, so `path` may be a memory-mapped input.

    Use as a context manager:

        with CheckpointWriter(path, {"w": ("F32", (2,))}) as writer:
            writer.write("w", tensor)
    """

    def __init__(self, path, layout, metadata=None):
        self.path = os.fspath(path)
        self._order = sorted(layout)
        self._layout = {}
        header = {}
        if metadata:
            header[METADATA_KEY] = dict(metadata)
        offset = 0
        for name in self._order:
            dtype, shape = layout[name]
            if dtype not in DTYPES:
                raise UnsupportedDtypeException(f"Unsupported dtype '{dtype}'.")
            shape = tuple(int(n) for n in shape)
            nbytes = int(np.prod(shape, dtype=np.int64)) * DTYPES[dtype].itemsize
            header[name] = {"dtype": dtype, "shape": list(shape), "data_offsets": [offset, offset + nbytes]}
            self._layout[name] = (dtype, shape)
            offset += nbytes
        self._header = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
        self._fh = None
        self._tmp_path = None
        self._next = 0

    def __enter__(self):
        directory, filename = os.path.split(os.path.abspath(self.path))
        fd, self._tmp_path = tempfile.mkstemp(prefix=f".{filename}.", suffix=".tmp", dir=directory)
        self._fh = os.fdopen(fd, "wb")
        self._fh.write(struct.pack("<Q", len(self._header)))
        self._fh.write(self._header)
        self._next = 0
        return self

    def write(self, name, tensor):
        if self._next >= len(self._order) or self._order[self._next] != name:
            expected = self._order[self._next] if self._next < len(self._order) else None
            raise RuntimeError(f"Expected tensor '{expected}' next, got '{name}'.")
        dtype, shape = self._layout[name]
        if tensor.dtype != dtype or tensor.shape != shape:
            raise ValueError(
                f"Tensor '{name}' is {tensor.dtype}{list(tensor.shape)}, header declares {dtype}{list(shape)}."
            )
        self._fh.write(tensor.tobytes())
        self._next += 1

    def __exit__(self, exc_type, exc_value, traceback):
        self._fh.close()
        if exc_type is not None:
            os.unlink(self._tmp_path)
            return False
        if self._next != len(self._order):
            os.unlink(self._tmp_path)
            raise RuntimeError(
                f"Only {self._next} of {len(self._order)} tensors were written to '{self.path}'."
            )
        os.replace(self._tmp_path, self.path)
        return False


def save_checkpoint(checkpoint, path, dtype_policy="keep"):
    """
    Write a checkpoint. With `dtype_policy="force-f32"` every tensor is
    widened to F32 (exact), with "keep" the stored dtypes are preserved.
    """
    if dtype_policy not in ("keep", "force-f32"):
        raise ValueError(f"Unknown dtype policy '{dtype_policy}'.")
    target = (lambda t: "F32") if dtype_policy == "force-f32" else (lambda t: t.dtype)
    layout = {name: (target(tensor), tensor.shape) for name, tensor in checkpoint.items()}
    with CheckpointWriter(path, layout, checkpoint.metadata) as writer:
        for name, tensor in checkpoint.items():
            writer.write(name, tensor.cast(target(tensor), name=name))
    _log.debug(f"Saved {len(checkpoint)} tensors to '{path}' ({dtype_policy}).")


#
# Compatibility and summaries
#


class CompatMismatch(BaseModel):
    tensor: str
    kind: Literal["missing-in-a", "missing-in-b", "shape-mismatch", "dtype-mismatch"]
    detail: str


class CompatReport(BaseModel):
    mismatches: list[CompatMismatch] = []

    @computed_field
    @property
    def compatible(self) -> bool:
        return len(self.mismatches) == 0


def validate_compat(a, b):
    """Compare tensor names, shapes and dtypes of two checkpoints."""
    mismatches = []
    for name in sorted(set(a) | set(b)):
        if name not in a:
            mismatches.append(CompatMismatch(tensor=name, kind="missing-in-a", detail="only present in b"))
        elif name not in b:
            mismatches.append(CompatMismatch(tensor=name, kind="missing-in-b", detail="only present in a"))
        elif a[name].shape != b[name].shape:
            mismatches.append(
                CompatMismatch(
                    tensor=name,
                    kind="shape-mismatch",
                    detail=f"{list(a[name].shape)} vs {list(b[name].shape)}",
                )
            )
        elif a[name].dtype != b[name].dtype:
            mismatches.append(
                CompatMismatch(tensor=name, kind="dtype-mismatch", detail=f"{a[name].dtype} vs {b[name].dtype}")
            )
    return CompatReport(mismatches=mismatches)


class TensorSummary(BaseModel):
    name: str
    dtype: str
    shape: list[int]
    min: float
    max: float
    mean: float
    l2_norm: float


class CheckpointSummary(BaseModel):
    parameter_count: int
    digest: str
    tensors: list[TensorSummary]


def checkpoint_digest(checkpoint):
    """SHA-256 over names, dtypes, shapes and stored bytes; metadata is not included."""
    hasher = hashlib.sha256()
    for name, tensor in checkpoint.items():
        hasher.update(json.dumps([name, tensor.dtype, list(tensor.shape)]).encode("utf-8"))
        hasher.update(tensor.tobytes())
    return hasher.hexdigest()


def summarize(checkpoint):
    tensors = []
    for name, tensor in checkpoint.items():
        values = tensor.to_float32()
        if values.size == 0:
            stats = dict(min=0.0, max=0.0, mean=0.0, l2_norm=0.0)
        else:
            stats = dict(
                min=float(values.min()),
                max=float(values.max()),
                mean=float(values.mean(dtype=np.float32)),
                l2_norm=float(np.sqrt(np.sum(np.square(values), dtype=np.float32))),
            )
        tensors.append(TensorSummary(name=name, dtype=tensor.dtype, shape=list(tensor.shape), **stats))
    return CheckpointSummary(
        parameter_count=checkpoint.parameter_count,
        digest=checkpoint_digest(checkpoint),
        tensors=tensors,
    )
