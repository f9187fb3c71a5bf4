"""Binary tensor container (safetensors-compatible layout).

File layout::

    u64le header_len | header_len bytes of UTF-8 JSON | payload

The header maps tensor name -> {"dtype", "shape", "data_offsets": [begin, end]}
with offsets relative to the start of the payload, plus an optional
``__metadata__`` object of string -> string.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

DTYPE_SIZES = {"F64": 8, "F32": 4, "I32": 4, "I8": 1}
NUMPY_DTYPES = {
    "F64": np.dtype("<f8"),
    "F32": np.dtype("<f4"),
    "I32": np.dtype("<i4"),
    "I8": np.dtype("i1"),
}
_FROM_NUMPY = {v.str.lstrip("<|"): k for k, v in NUMPY_DTYPES.items()}

METADATA_KEY = "__metadata__"
_MAX_BYTES = 2**63 - 1


class ContainerError(ValueError):
    """Raised for malformed container files or invalid tensor entries."""


def tensor_bytes(dtype: str, shape) -> int:
    """Storage size in bytes of a dense tensor: ``prod(shape) * size(dtype)``."""
    if dtype not in DTYPE_SIZES:
        raise ContainerError(f"unknown dtype {dtype!r}")
    count = 1
    for extent in shape:
        extent = int(extent)
        if extent < 1:
            raise ContainerError(f"shape extents must be positive, got {list(shape)}")
        count *= extent
    total = count * DTYPE_SIZES[dtype]
    if total > _MAX_BYTES:
        raise OverflowError(f"tensor of shape {list(shape)} overflows a 64-bit byte count")
    return total


@dataclass(frozen=True)
class TensorEntry:
    dtype: str
    shape: tuple[int, ...]
    data: bytes

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        expected = tensor_bytes(self.dtype, self.shape)
        if len(self.data) != expected:
            raise ContainerError(
                f"payload is {len(self.data)} bytes, dtype {self.dtype} shape "
                f"{list(self.shape)} needs {expected}"
            )

    @classmethod
    def from_array(cls, array, dtype: str | None = None) -> "TensorEntry":
        array = np.asarray(array)
        if dtype is None:
            key = array.dtype.str.lstrip("<|=")
            if key not in _FROM_NUMPY:
                raise ContainerError(f"unsupported numpy dtype {array.dtype}")
            dtype = _FROM_NUMPY[key]
        if dtype not in NUMPY_DTYPES:
            raise ContainerError(f"unknown dtype {dtype!r}")
        data = np.ascontiguousarray(array, dtype=NUMPY_DTYPES[dtype]).tobytes()
        return cls(dtype, array.shape, data)

    def array(self) -> np.ndarray:
        """Read-only numpy view of the payload."""
        return np.frombuffer(self.data, dtype=NUMPY_DTYPES[self.dtype]).reshape(self.shape)

    @property
    def nbytes(self) -> int:
        return len(self.data)

    @property
    def numel(self) -> int:
        return math.prod(self.shape)


@dataclass(frozen=True)
class TensorContainer:
    """Named dense tensors plus a string metadata map.

    Equality ignores entry order; serialization is canonical (sorted names).
    """

    entries: Mapping[str, TensorEntry] = field(default_factory=dict)
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        entries = dict(self.entries)
        for name, entry in entries.items():
            if not isinstance(name, str) or not name:
                raise ContainerError("tensor names must be non-empty strings")
            if name == METADATA_KEY:
                raise ContainerError(f"{METADATA_KEY!r} is reserved")
            if not isinstance(entry, TensorEntry):
                raise ContainerError(f"entry {name!r} is not a TensorEntry")
        metadata = dict(self.metadata)
        for k, v in metadata.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise ContainerError("metadata must map str -> str")
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "metadata", metadata)

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], metadata=None) -> "TensorContainer":
        return cls({k: TensorEntry.from_array(v) for k, v in arrays.items()}, metadata or {})

    def __getitem__(self, name: str) -> TensorEntry:
        return self.entries[name]

    def __contains__(self, name) -> bool:
        return name in self.entries

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def array(self, name: str) -> np.ndarray:
        return self.entries[name].array()

    def total_bytes(self) -> int:
        return sum(tensor_bytes(e.dtype, e.shape) for e in self.entries.values())


def write_container(container: TensorContainer) -> bytes:
    header: dict = {}
    if container.metadata:
        header[METADATA_KEY] = {k: container.metadata[k] for k in sorted(container.metadata)}
    offset = 0
    names = sorted(container.entries)
    for name in names:
        entry = container.entries[name]
        header[name] = {
            "dtype": entry.dtype,
            "shape": list(entry.shape),
            "data_offsets": [offset, offset + entry.nbytes],
        }
        offset += entry.nbytes
    text = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    # pad with spaces to an 8-byte boundary, as safetensors does
    text += b" " * (-len(text) % 8)
    parts = [struct.pack("<Q", len(text)), text]
    parts.extend(container.entries[name].data for name in names)
    return b"".join(parts)


def _reject_duplicates(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise ContainerError(f"duplicate name {key!r} in header")
        out[key] = value
    return out


def read_container(data: bytes) -> TensorContainer:
    data = memoryview(data)
    if len(data) < 8:
        raise ContainerError("malformed header: file shorter than the 8-byte length prefix")
    (header_len,) = struct.unpack("<Q", data[:8])
    if header_len > len(data) - 8:
        raise ContainerError("malformed header: header length exceeds file size")
    try:
        header = json.loads(bytes(data[8 : 8 + header_len]).decode("utf-8"),
                            object_pairs_hook=_reject_duplicates)
    except ContainerError:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"malformed header: {exc}") from None
    if not isinstance(header, dict):
        raise ContainerError("malformed header: top level is not an object")

    payload = data[8 + header_len :]
    metadata = header.pop(METADATA_KEY, {}) or {}
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise ContainerError("malformed header: __metadata__ must map str -> str")

    spans = []
    for name, info in header.items():
        if not name:
            raise ContainerError("malformed header: empty tensor name")
        if not isinstance(info, dict) or set(info) != {"dtype", "shape", "data_offsets"}:
            raise ContainerError(f"malformed header entry for {name!r}")
        dtype, shape, offsets = info["dtype"], info["shape"], info["data_offsets"]
        if dtype not in DTYPE_SIZES:
            raise ContainerError(f"unknown dtype {dtype!r} for {name!r}")
        if (not isinstance(shape, list) or not all(type(s) is int and s > 0 for s in shape)):
            raise ContainerError(f"malformed shape for {name!r}: {shape!r}")
        if (not isinstance(offsets, list) or len(offsets) != 2
                or not all(type(o) is int and o >= 0 for o in offsets)
                or offsets[0] > offsets[1]):
            raise ContainerError(f"malformed data_offsets for {name!r}: {offsets!r}")
        begin, end = offsets
        if end > len(payload):
            raise ContainerError(f"out-of-bounds payload for {name!r}")
        if end - begin != tensor_bytes(dtype, shape):
            raise ContainerError(f"payload size mismatch for {name!r}")
        spans.append((begin, end, name))

    cursor = 0
    for begin, end, name in sorted(spans):
        if begin < cursor:
            raise ContainerError(f"overlapping payload for {name!r}")
        if begin > cursor:
            raise ContainerError(f"gap in payload before {name!r}")
        cursor = end
    if cursor != len(payload):
        raise ContainerError("trailing bytes after the last payload region")

    entries = {}
    for name, info in header.items():
        begin, end = info["data_offsets"]
        entries[name] = TensorEntry(info["dtype"], tuple(info["shape"]), bytes(payload[begin:end]))
    return TensorContainer(entries, metadata)


def load(path) -> TensorContainer:
    with open(path, "rb") as fh:
        return read_container(fh.read())


def save(container: TensorContainer, path) -> None:
    with open(path, "wb") as fh:
        fh.write(write_container(container))
