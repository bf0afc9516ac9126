"""Single-file checkpoint stores.

The on-disk layout is the usual hub format: an 8-byte little-endian header
length ``N``, ``N`` bytes of JSON mapping tensor names to
``{"dtype", "shape", "data_offsets"}`` (plus an optional ``__metadata__``
string map), then the raw little-endian tensor bytes.  Offsets are relative
to the end of the header.

Floating tensors always decode to float32; U64 tensors decode to uint64.
Three store flavours share one read interface:

* :class:`TensorStore` - a file opened with :func:`open_store`, read lazily
  one tensor at a time;
* :class:`MemoryStore` - arrays held in memory;
* :class:`LazyStore` - tensors computed on demand from other stores.

:func:`save` streams any store to disk holding at most a few tensors in
memory at once.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from ._parallel import ordered_map
from .errors import AlignmentError, EncodeError, FormatError, NonFiniteError, UsageError

HEADER_ALIGN = 8
_METADATA_KEY = "__metadata__"


class DType(str, enum.Enum):
    F32 = "F32"
    F16 = "F16"
    BF16 = "BF16"
    U64 = "U64"

    @property
    def width(self) -> int:
        return _WIDTHS[self]

    @property
    def is_float(self) -> bool:
        return self is not DType.U64

    @classmethod
    def parse(cls, tag) -> "DType":
        if isinstance(tag, DType):
            return tag
        try:
            return cls(tag)
        except ValueError:
            raise FormatError(f"unknown dtype tag {tag!r}") from None


_WIDTHS = {DType.F32: 4, DType.F16: 2, DType.BF16: 2, DType.U64: 8}


def element_count(shape: Sequence[int]) -> int:
    return math.prod(int(d) for d in shape)


@dataclass(frozen=True)
class TensorMeta:
    name: str
    dtype: DType
    shape: tuple[int, ...]
    data_offsets: tuple[int, int] | None = None

    @property
    def numel(self) -> int:
        return element_count(self.shape)

    @property
    def nbytes(self) -> int:
        return self.numel * self.dtype.width


# ---------------------------------------------------------------------------
# dtype codecs


def decode(raw: bytes | bytearray | memoryview, dtype: DType, shape: Sequence[int]) -> np.ndarray:
    """Decode little-endian bytes to float32 (or uint64 for U64)."""
    if dtype is DType.F32:
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float32)
    elif dtype is DType.F16:
        arr = np.frombuffer(raw, dtype="<f2").astype(np.float32)
    elif dtype is DType.BF16:
        bits = np.frombuffer(raw, dtype="<u2").astype(np.uint32) << np.uint32(16)
        arr = bits.view(np.float32)
    else:
        arr = np.frombuffer(raw, dtype="<u8").astype(np.uint64)
    return arr.reshape(tuple(shape))


def _bf16_bits(x: np.ndarray) -> np.ndarray:
    # round-to-nearest-even on the upper 16 bits of the float32 pattern
    u = np.ascontiguousarray(x, dtype=np.float32).view(np.uint32)
    bias = np.uint32(0x7FFF) + ((u >> np.uint32(16)) & np.uint32(1))
    return ((u + bias) >> np.uint32(16)).astype(np.uint16)


def encode(values, dtype: DType, name: str = "?") -> bytes:
    """Encode values as little-endian bytes of ``dtype``.

    Floating targets take float32 work-precision input and narrow with
    round-to-nearest-even.  Raises :class:`EncodeError` when a value is
    non-finite, overflows the target, or is not a valid U64 index.
    """
    dtype = DType.parse(dtype)
    if dtype is DType.U64:
        arr = np.asarray(values)
        if arr.size and arr.dtype.kind == "f":
            if not np.all(np.isfinite(arr)) or np.any(arr != np.floor(arr)):
                raise EncodeError(f"tensor {name!r}: U64 requires integral values")
        if arr.size and arr.dtype.kind in "if" and np.any(arr < 0):
            raise EncodeError(f"tensor {name!r}: U64 requires non-negative values")
        return np.ascontiguousarray(arr, dtype="<u8").tobytes()

    x = np.ascontiguousarray(values, dtype=np.float32)
    bad = ~np.isfinite(x)
    if bad.any():
        raise EncodeError(
            f"tensor {name!r}: non-finite value at flat index {int(np.flatnonzero(bad.ravel())[0])}"
        )
    if dtype is DType.F32:
        return x.astype("<f4").tobytes()
    if dtype is DType.F16:
        with np.errstate(over="ignore"):
            out = x.astype("<f2")
        check = out
    else:
        out = _bf16_bits(x).astype("<u2")
        check = (out.astype(np.uint32) << np.uint32(16)).view(np.float32)
    over = ~np.isfinite(check)
    if over.any():
        idx = int(np.flatnonzero(over.ravel())[0])
        raise EncodeError(f"tensor {name!r}: value {float(x.ravel()[idx])!r} overflows {dtype.value}")
    return out.tobytes()


def _check_finite(name: str, arr: np.ndarray) -> np.ndarray:
    if arr.dtype.kind == "f":
        ok = np.isfinite(arr)
        if not ok.all():
            raise NonFiniteError(name, int(np.flatnonzero(~ok.ravel())[0]))
    return arr


# ---------------------------------------------------------------------------
# store flavours


class Store:
    """Read interface common to every store flavour.

    Subclasses provide ``_metas`` (name -> TensorMeta), ``metadata`` and
    ``_load(name)``.  Iteration is in ascending name order.
    """

    metadata: dict[str, str]
    _metas: dict[str, TensorMeta]

    def names(self) -> list[str]:
        return sorted(self._metas)

    def meta(self, name: str) -> TensorMeta:
        try:
            return self._metas[name]
        except KeyError:
            raise AlignmentError(f"unknown tensor {name!r}") from None

    def read(self, name: str, check_finite: bool = True) -> np.ndarray:
        self.meta(name)
        arr = self._load(name)
        return _check_finite(name, arr) if check_finite else arr

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        for name in self.names():
            yield name, self.read(name)

    def _load(self, name: str) -> np.ndarray:
        raise NotImplementedError

    @property
    def identity(self) -> str:
        """Short human-readable description used in provenance metadata."""
        return self.metadata.get("kind", type(self).__name__)

    def __contains__(self, name: object) -> bool:
        return name in self._metas

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def __len__(self) -> int:
        return len(self._metas)

    def __repr__(self) -> str:
        return f"{type(self).__name__}({len(self)} tensors, kind={self.metadata.get('kind')!r})"


def read_tensor(store: Store, name: str) -> np.ndarray:
    return store.read(name)


class TensorStore(Store):
    """A checkpoint file opened for lazy, thread-safe reading."""

    def __init__(self, path: str | os.PathLike, metas: dict[str, TensorMeta], metadata: dict[str, str], data_start: int):
        self.path = Path(path)
        self._metas = metas
        self.metadata = metadata
        self.data_start = data_start

    def _load(self, name: str) -> np.ndarray:
        meta = self._metas[name]
        begin, end = meta.data_offsets
        # one handle per read keeps concurrent readers independent
        with open(self.path, "rb") as fh:
            fh.seek(self.data_start + begin)
            raw = fh.read(end - begin)
        if len(raw) != end - begin:
            raise FormatError(f"truncated data for tensor {name!r}")
        return decode(raw, meta.dtype, meta.shape)

    @property
    def identity(self) -> str:
        # file name only, so artifacts do not depend on the run directory
        return self.path.name

    def digest(self) -> str:
        return file_digest(self.path)


def _pairs_no_dupes(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise FormatError(f"malformed header: duplicate key {key!r}")
        out[key] = value
    return out


def _as_int(value, what: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < 0:
        raise FormatError(f"malformed header: {what} must be a non-negative integer, got {value!r}")
    return value


def open_store(path: str | os.PathLike) -> TensorStore:
    """Open a checkpoint file; only the header is read eagerly."""
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as fh:
        prefix = fh.read(8)
        if len(prefix) < 8:
            raise FormatError("malformed header: file shorter than the 8-byte length prefix")
        (n,) = struct.unpack("<Q", prefix)
        if n > size - 8:
            raise FormatError(f"malformed header: header length {n} exceeds file size {size}")
        raw = fh.read(n)
    try:
        header = json.loads(raw.decode("utf-8"), object_pairs_hook=_pairs_no_dupes)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed header: {exc}") from None
    if not isinstance(header, dict):
        raise FormatError("malformed header: top level is not an object")

    metadata = header.pop(_METADATA_KEY, None) or {}
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise FormatError("malformed header: __metadata__ must map strings to strings")

    data_len = size - 8 - n
    metas: dict[str, TensorMeta] = {}
    for name, entry in header.items():
        if not isinstance(entry, dict) or set(entry) != {"dtype", "shape", "data_offsets"}:
            raise FormatError(f"malformed header: bad entry for tensor {name!r}")
        dtype = DType.parse(entry["dtype"])
        shape = entry["shape"]
        offsets = entry["data_offsets"]
        if not isinstance(shape, list):
            raise FormatError(f"malformed header: shape of {name!r} is not a list")
        shape = tuple(_as_int(d, f"shape of {name!r}") for d in shape)
        if not isinstance(offsets, list) or len(offsets) != 2:
            raise FormatError(f"malformed header: data_offsets of {name!r} must be [begin, end]")
        begin, end = (_as_int(o, f"data_offsets of {name!r}") for o in offsets)
        if end < begin or end > data_len:
            raise FormatError(f"malformed header: data_offsets of {name!r} out of bounds")
        meta = TensorMeta(name, dtype, shape, (begin, end))
        if end - begin != meta.nbytes:
            raise FormatError(
                f"declared size mismatch for {name!r}: {end - begin} bytes for "
                f"{meta.numel} x {dtype.value}"
            )
        metas[name] = meta

    spans = sorted((m.data_offsets for m in metas.values() if m.nbytes), key=lambda s: s[0])
    for (_, prev_end), (begin, _) in zip(spans, spans[1:]):
        if begin < prev_end:
            raise FormatError("overlapping offsets in header")
    return TensorStore(path, metas, dict(metadata), 8 + n)


class MemoryStore(Store):
    """Tensors held in memory; arrays are stored read-only in work precision."""

    def __init__(self, tensors: Mapping[str, np.ndarray] | None = None,
                 dtypes: Mapping[str, DType | str] | None = None,
                 metadata: Mapping[str, str] | None = None):
        self._metas = {}
        self._data: dict[str, np.ndarray] = {}
        self.metadata = dict(metadata or {})
        dtypes = dict(dtypes or {})
        for name, values in (tensors or {}).items():
            self.add(name, values, dtypes.get(name))

    def add(self, name: str, values, dtype: DType | str | None = None) -> None:
        if name in self._metas:
            raise UsageError(f"duplicate tensor name {name!r}")
        arr = np.asarray(values)
        if dtype is None:
            dtype = DType.U64 if arr.dtype.kind in "ui" else DType.F32
        dtype = DType.parse(dtype)
        arr = np.array(arr, dtype=np.uint64 if dtype is DType.U64 else np.float32)
        arr.flags.writeable = False
        self._data[name] = arr
        self._metas[name] = TensorMeta(name, dtype, tuple(arr.shape))

    def _load(self, name: str) -> np.ndarray:
        return self._data[name]


class LazyStore(Store):
    """Tensors computed on demand by ``fn(name)``.

    Nothing is cached, so a full traversal holds one tensor at a time.
    """

    def __init__(self, metas: Iterable[TensorMeta], fn: Callable[[str], np.ndarray],
                 metadata: Mapping[str, str] | None = None):
        self._metas = {m.name: TensorMeta(m.name, m.dtype, m.shape) for m in metas}
        self._fn = fn
        self.metadata = dict(metadata or {})

    def _load(self, name: str) -> np.ndarray:
        meta = self._metas[name]
        arr = np.asarray(self._fn(name))
        arr = arr.astype(np.uint64 if meta.dtype is DType.U64 else np.float32, copy=False)
        return arr.reshape(meta.shape)


def materialize(store: Store) -> MemoryStore:
    """Read every tensor of ``store`` into memory."""
    out = MemoryStore(metadata=store.metadata)
    for name, arr in store.items():
        out.add(name, arr, store.meta(name).dtype)
    return out


# ---------------------------------------------------------------------------
# writing


def _header_bytes(metas: Sequence[TensorMeta], metadata: Mapping[str, str]) -> tuple[bytes, list[tuple[int, int]]]:
    header: dict = {}
    if metadata:
        for k, v in metadata.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise UsageError("metadata must map strings to strings")
        header[_METADATA_KEY] = dict(sorted(metadata.items()))
    offsets = []
    pos = 0
    for m in metas:
        span = (pos, pos + m.nbytes)
        offsets.append(span)
        header[m.name] = {"dtype": m.dtype.value, "shape": list(m.shape), "data_offsets": list(span)}
        pos = span[1]
    text = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    text += b" " * (-len(text) % HEADER_ALIGN)
    return text, offsets


def save(store: Store, path: str | os.PathLike, *,
         dtypes: Mapping[str, DType | str] | None = None,
         metadata: Mapping[str, str] | None = None,
         threads: int | None = None) -> Path:
    """Stream ``store`` to a canonical checkpoint file.

    ``dtypes`` overrides per-tensor output dtypes (default: the store's own);
    ``metadata`` replaces the store's metadata.  Tensors are computed and
    written in ascending name order; with several threads, up to ``threads``
    tensors are computed concurrently.  The file appears atomically.
    """
    path = Path(path)
    dtypes = {k: DType.parse(v) for k, v in (dtypes or {}).items()}
    names = store.names()
    metas = []
    for name in names:
        m = store.meta(name)
        metas.append(TensorMeta(name, dtypes.get(name, m.dtype), m.shape))
    header, _ = _header_bytes(metas, store.metadata if metadata is None else metadata)

    def encoded(meta: TensorMeta) -> bytes:
        arr = store.read(meta.name, check_finite=False)
        if arr.size != meta.numel:
            raise UsageError(f"tensor {meta.name!r}: {arr.size} values for shape {list(meta.shape)}")
        return encode(arr, meta.dtype, meta.name)

    tmp = path.with_name(path.name + ".partial")
    try:
        with open(tmp, "wb") as fh:
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            for blob in ordered_map(encoded, metas, threads):
                fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    return path


def write_store(entries: Iterable[tuple[str, DType | str, Sequence[int], object]],
                metadata: Mapping[str, str] | None, path: str | os.PathLike) -> Path:
    """Write ``(name, dtype, shape, values)`` entries as a canonical file."""
    mem = MemoryStore(metadata=metadata)
    for name, dtype, shape, values in entries:
        dtype = DType.parse(dtype)
        arr = np.asarray(values)
        shape = tuple(int(d) for d in shape)
        if arr.size != element_count(shape):
            raise UsageError(f"tensor {name!r}: {arr.size} values for shape {list(shape)}")
        if dtype.is_float:
            arr = np.asarray(arr, dtype=np.float32)
        mem.add(name, arr.reshape(shape), dtype)
    return save(mem, path)


def write_text_atomic(path: str | os.PathLike, text: str) -> Path:
    """Write UTF-8 text so that ``path`` never holds a partial document."""
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    try:
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    return path


def file_digest(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return "sha256:" + h.hexdigest()
