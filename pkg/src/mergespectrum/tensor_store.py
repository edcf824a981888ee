"""Bit-exact reading and writing of checkpoint containers.

Container layout (byte-compatible with the de-facto community format, so
published checkpoints load unmodified):

    8 bytes  little-endian unsigned header length N
    N bytes  JSON: tensor name -> {"dtype", "shape", "data_offsets"},
             plus an optional "__metadata__" object of string values
    rest     raw little-endian tensor payload

A sharded checkpoint is a directory holding shard files plus an index JSON
with a "weight_map" object mapping tensor name -> shard filename.

Opening a checkpoint parses metadata only; payload bytes are read lazily,
one tensor at a time, always through :func:`_read_payload`. Element values
are widened to float32 on load; global statistics elsewhere accumulate in
float64. Narrowing on write rounds to nearest-even.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from .errors import (
    CorruptTensor,
    DataError,
    DuplicateTensorName,
    MalformedHeader,
    MissingShard,
    OverlappingRanges,
    ShardLimitExceeded,
    TensorSetMismatch,
    UnknownTensor,
    UnsupportedDType,
)

INDEX_FILENAME = "model.safetensors.index.json"
SINGLE_FILENAME = "model.safetensors"

_HEADER_LEN_BYTES = 8
_COPY_CHUNK = 1 << 20


class DType(Enum):
    BF16 = "BF16"
    F16 = "F16"
    F32 = "F32"

    @property
    def width(self) -> int:
        return 2 if self in (DType.BF16, DType.F16) else 4


class Role(Enum):
    BASE = "base"
    DIRECT = "direct"
    THINKING = "thinking"
    MERGED = "merged"


@dataclass(frozen=True)
class TensorMeta:
    name: str
    dtype: DType
    shape: tuple[int, ...]
    byte_range: tuple[int, int]  # half-open, relative to the shard's data buffer

    @property
    def n_elements(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1

    @property
    def nbytes(self) -> int:
        return self.byte_range[1] - self.byte_range[0]


@dataclass(frozen=True)
class TensorBuffer:
    meta: TensorMeta
    values: np.ndarray  # float32, shaped per meta.shape


@dataclass(frozen=True)
class Checkpoint:
    path: Path                      # file for single-file, directory for sharded
    tensors: dict[str, TensorMeta]
    shards: dict[str, str]          # tensor name -> shard filename
    role: Role
    param_count: int
    data_starts: dict[str, int] = field(repr=False, default_factory=dict)

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def load(self, name: str) -> TensorBuffer:
        return load_tensor(self, name)

    @property
    def root_dir(self) -> Path:
        return self.path if self.path.is_dir() else self.path.parent

    def shard_files(self) -> list[Path]:
        return [self.root_dir / fn for fn in sorted(set(self.shards.values()))]


# --- dtype conversion ---------------------------------------------------------

def decode_to_f32(raw: bytes, dtype: DType) -> np.ndarray:
    """Widen stored bytes to float32. Exact for all three dtypes."""
    if dtype is DType.F32:
        return np.frombuffer(raw, dtype="<f4").astype(np.float32, copy=True)
    if dtype is DType.F16:
        return np.frombuffer(raw, dtype="<f2").astype(np.float32)
    bits = np.frombuffer(raw, dtype="<u2").astype(np.uint32) << 16
    return bits.view(np.float32).copy()


def encode_from_f32(values: np.ndarray, dtype: DType) -> bytes:
    """Narrow float32 values to the target dtype, rounding to nearest-even.

    Rejects inputs that are non-finite or whose rounded value overflows the
    target dtype, keeping stored payloads finite by construction.
    """
    flat = np.ascontiguousarray(values, dtype="<f4").reshape(-1)
    if not np.all(np.isfinite(flat)):
        raise CorruptTensor("refusing to store non-finite values")
    if dtype is DType.F32:
        return flat.tobytes()
    if dtype is DType.F16:
        with np.errstate(over="ignore"):
            narrowed = flat.astype("<f2")
        if not np.all(np.isfinite(narrowed)):
            raise CorruptTensor("values overflow the F16 range")
        return narrowed.tobytes()
    bits = flat.view(np.uint32)
    rounding_bias = ((bits >> 16) & 1) + np.uint32(0x7FFF)
    encoded = ((bits + rounding_bias) >> 16).astype(np.uint16)
    if np.any((encoded & np.uint16(0x7F80)) == np.uint16(0x7F80)):
        raise CorruptTensor("values overflow the BF16 range")
    return encoded.astype("<u2").tobytes()


def narrow_f32(values: np.ndarray, dtype: DType) -> np.ndarray:
    """Round-trip float32 values through `dtype` (narrow, then widen back)."""
    return decode_to_f32(encode_from_f32(values, dtype), dtype).reshape(values.shape)


# --- reading ------------------------------------------------------------------

def _reject_duplicate_keys(pairs):
    seen = set()
    out = {}
    for key, value in pairs:
        if key in seen:
            raise DuplicateTensorName(f"duplicate tensor name in header: {key!r}")
        seen.add(key)
        out[key] = value
    return out

def _read_header(path: Path) -> tuple[dict, int, int]:
    """Return (header json, data start offset, data size). No payload reads."""
    file_size = os.path.getsize(path)
    with open(path, "rb") as fh:
        prefix = fh.read(_HEADER_LEN_BYTES)
        if len(prefix) < _HEADER_LEN_BYTES:
            raise MalformedHeader(f"{path}: truncated header length field")
        header_len = int.from_bytes(prefix, "little")
        if _HEADER_LEN_BYTES + header_len > file_size:
            raise MalformedHeader(f"{path}: header length {header_len} exceeds file size")
        raw = fh.read(header_len)
    try:
        header = json.loads(raw.decode("utf-8"), object_pairs_hook=_reject_duplicate_keys)
    except DuplicateTensorName:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"{path}: header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise MalformedHeader(f"{path}: header must be a JSON object")
    data_start = _HEADER_LEN_BYTES + header_len
    return header, data_start, file_size - data_start


def _parse_metas(header: dict, data_size: int, path: Path) -> dict[str, TensorMeta]:
    metas: dict[str, TensorMeta] = {}
    for name, entry in header.items():
        if name == "__metadata__":
            continue
        if not isinstance(entry, dict):
            raise MalformedHeader(f"{path}: entry for {name!r} is not an object")
        try:
            dtype = DType(entry["dtype"])
        except ValueError:
            raise UnsupportedDType(f"{path}: tensor {name!r} has dtype {entry.get('dtype')!r}")
        except KeyError:
            raise MalformedHeader(f"{path}: tensor {name!r} missing dtype")
        shape = entry.get("shape")
        offsets = entry.get("data_offsets")
        if (not isinstance(shape, list) or any(not isinstance(d, int) or d < 0 for d in shape)
                or not isinstance(offsets, list) or len(offsets) != 2):
            raise MalformedHeader(f"{path}: tensor {name!r} has malformed shape/data_offsets")
        begin, end = int(offsets[0]), int(offsets[1])
        n_elements = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if end - begin != n_elements * dtype.width:
            raise MalformedHeader(
                f"{path}: tensor {name!r} byte range {end - begin} does not match "
                f"{n_elements} x {dtype.width} bytes")
        if begin < 0 or end > data_size or begin > end:
            raise OverlappingRanges(f"{path}: tensor {name!r} byte range out of bounds")
        metas[name] = TensorMeta(name=name, dtype=dtype, shape=tuple(shape), byte_range=(begin, end))
    ordered = sorted(metas.values(), key=lambda m: m.byte_range)
    for prev, cur in zip(ordered, ordered[1:]):
        if cur.byte_range[0] < prev.byte_range[1] and cur.nbytes > 0 and prev.nbytes > 0:
            raise OverlappingRanges(
                f"{path}: tensors {prev.name!r} and {cur.name!r} overlap in the data buffer")
    return metas


def open_checkpoint(path: str | Path, role: Role) -> Checkpoint:
    """Parse checkpoint metadata without touching tensor payload bytes.

    `path` may be a single container file or a directory holding either a
    shard index or exactly one container file.
    """
    path = Path(path)
    if path.is_dir():
        index_path = path / INDEX_FILENAME
        if not index_path.exists():
            candidates = sorted(path.glob("*.safetensors.index.json"))
            if candidates:
                index_path = candidates[0]
            else:
                solo = sorted(path.glob("*.safetensors"))
                if len(solo) == 1:
                    return _open_single(solo[0], role, opened_as=path)
                raise MalformedHeader(f"{path}: no shard index and no single container file")
        return _open_sharded(path, index_path, role)
    if not path.exists():
        raise FileNotFoundError(path)
    return _open_single(path, role)


def _open_single(path: Path, role: Role, opened_as: Path | None = None) -> Checkpoint:
    header, data_start, data_size = _read_header(path)
    metas = _parse_metas(header, data_size, path)
    return Checkpoint(
        path=opened_as if opened_as is not None else path,
        tensors=metas,
        shards={name: path.name for name in metas},
        role=role,
        param_count=sum(m.n_elements for m in metas.values()),
        data_starts={path.name: data_start},
    )


def _open_sharded(root: Path, index_path: Path, role: Role) -> Checkpoint:
    try:
        with open(index_path, "r", encoding="utf-8") as fh:
            index = json.load(fh)
    except json.JSONDecodeError as exc:
        raise MalformedHeader(f"{index_path}: invalid JSON: {exc}") from exc
    weight_map = index.get("weight_map")
    if not isinstance(weight_map, dict):
        raise MalformedHeader(f"{index_path}: missing 'weight_map' object")

    metas: dict[str, TensorMeta] = {}
    shards: dict[str, str] = {}
    data_starts: dict[str, int] = {}
    for shard_name in sorted(set(weight_map.values())):
        shard_path = root / shard_name
        if not shard_path.exists():
            raise MissingShard(f"{root}: shard file {shard_name!r} not found")
        header, data_start, data_size = _read_header(shard_path)
        data_starts[shard_name] = data_start
        shard_metas = _parse_metas(header, data_size, shard_path)
        expected = {n for n, s in weight_map.items() if s == shard_name}
        if set(shard_metas) != expected:
            raise MalformedHeader(
                f"{shard_path}: tensor set disagrees with the index weight_map")
        for name, meta in shard_metas.items():
            if name in metas:
                raise DuplicateTensorName(f"{root}: tensor {name!r} present in multiple shards")
            metas[name] = meta
            shards[name] = shard_name
    return Checkpoint(
        path=root,
        tensors=metas,
        shards=shards,
        role=role,
        param_count=sum(m.n_elements for m in metas.values()),
        data_starts=data_starts,
    )


def _read_payload(path: Path, data_start: int, begin: int, end: int) -> bytes:
    """Single entry point for tensor payload reads (lazy-load accounting)."""
    with open(path, "rb") as fh:
        fh.seek(data_start + begin)
        raw = fh.read(end - begin)
    if len(raw) != end - begin:
        raise MalformedHeader(f"{path}: payload truncated")
    return raw


def load_tensor(ckpt: Checkpoint, name: str) -> TensorBuffer:
    """Read one tensor and widen it to float32."""
    meta = ckpt.tensors.get(name)
    if meta is None:
        raise UnknownTensor(f"no tensor named {name!r} in {ckpt.path}")
    shard_name = ckpt.shards[name]
    shard_path = ckpt.root_dir / shard_name if ckpt.path.is_dir() else ckpt.path
    raw = _read_payload(shard_path, ckpt.data_starts[shard_name], *meta.byte_range)
    values = decode_to_f32(raw, meta.dtype)
    if not np.all(np.isfinite(values)):
        raise CorruptTensor(f"tensor {name!r} contains NaN/Inf values")
    return TensorBuffer(meta=meta, values=values.reshape(meta.shape))


def iter_tensors(ckpt: Checkpoint) -> Iterator[TensorBuffer]:
    """Yield tensors one at a time in name-sorted order."""
    for name in ckpt.names():
        yield load_tensor(ckpt, name)


def iter_tensor_slices(ckpt: Checkpoint, name: str, max_elements: int) -> Iterator[np.ndarray]:
    """Yield one tensor as flat float32 slices of at most max_elements each,
    reading only the corresponding byte ranges. Lets statistics passes keep
    peak memory far below the largest tensor."""
    meta = ckpt.tensors.get(name)
    if meta is None:
        raise UnknownTensor(f"no tensor named {name!r} in {ckpt.path}")
    shard_name = ckpt.shards[name]
    shard_path = ckpt.root_dir / shard_name if ckpt.path.is_dir() else ckpt.path
    data_start = ckpt.data_starts[shard_name]
    begin, end = meta.byte_range
    width = meta.dtype.width
    step = max(1, max_elements) * width
    for offset in range(begin, end, step):
        raw = _read_payload(shard_path, data_start, offset, min(offset + step, end))
        values = decode_to_f32(raw, meta.dtype)
        if not np.all(np.isfinite(values)):
            raise CorruptTensor(f"tensor {name!r} contains NaN/Inf values")
        yield values


# --- writing ------------------------------------------------------------------

class _ShardSpool:
    """Accumulates one shard's payload in a temp file next to the target."""

    def __init__(self, directory: Path, ordinal: int):
        self.metas: list[TensorMeta] = []
        self.nbytes = 0
        self.tmp_path = directory / f".shard-{ordinal}.payload.tmp"
        self._fh = open(self.tmp_path, "wb")

    def append(self, name: str, dtype: DType, shape: tuple[int, ...], payload: bytes) -> None:
        begin = self.nbytes
        self._fh.write(payload)
        self.nbytes += len(payload)
        self.metas.append(TensorMeta(name=name, dtype=dtype, shape=shape,
                                     byte_range=(begin, self.nbytes)))

    def finalize(self, final_path: Path, metadata: Mapping[str, str] | None) -> None:
        self._fh.close()
        header: dict = {}
        if metadata:
            header["__metadata__"] = {str(k): str(v) for k, v in metadata.items()}
        for meta in self.metas:
            header[meta.name] = {
                "dtype": meta.dtype.value,
                "shape": list(meta.shape),
                "data_offsets": list(meta.byte_range),
            }
        blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
        tmp_final = final_path.with_name(final_path.name + ".tmp")
        with open(tmp_final, "wb") as out:
            out.write(len(blob).to_bytes(_HEADER_LEN_BYTES, "little"))
            out.write(blob)
            with open(self.tmp_path, "rb") as payload:
                while chunk := payload.read(_COPY_CHUNK):
                    out.write(chunk)
        os.replace(tmp_final, final_path)
        os.unlink(self.tmp_path)

    def abort(self) -> None:
        self._fh.close()
        if self.tmp_path.exists():
            os.unlink(self.tmp_path)


def write_checkpoint(
    tensors: Iterable[tuple[str, np.ndarray]],
    out_path: str | Path,
    target_dtypes: Mapping[str, DType] | DType | None = None,
    shard_limit_bytes: int | None = None,
    role: Role = Role.MERGED,
    metadata: Mapping[str, str] | None = None,
) -> Checkpoint:
    """Stream float32 tensors into one or more container files.

    `out_path` ending in ``.safetensors`` forces a single file; otherwise it
    is treated as a directory. A shard index is emitted only when more than
    one shard results. Returns the re-opened (metadata-only) checkpoint.
    """
    out_path = Path(out_path)
    single_file = out_path.suffix == ".safetensors"
    directory = out_path.parent if single_file else out_path
    directory.mkdir(parents=True, exist_ok=True)
    limit = shard_limit_bytes if shard_limit_bytes is not None else math.inf

    def dtype_for(name: str) -> DType:
        if target_dtypes is None:
            return DType.F32
        if isinstance(target_dtypes, DType):
            return target_dtypes
        return target_dtypes.get(name, DType.F32)

    spools: list[_ShardSpool] = [_ShardSpool(directory, 0)]
    seen: set[str] = set()
    try:
        for name, values in tensors:
            if name in seen:
                raise DuplicateTensorName(f"tensor {name!r} supplied twice")
            seen.add(name)
            dtype = dtype_for(name)
            payload = encode_from_f32(np.asarray(values), dtype)
            if len(payload) > limit:
                raise ShardLimitExceeded(
                    f"tensor {name!r} ({len(payload)} bytes) exceeds shard limit {shard_limit_bytes}")
            if spools[-1].nbytes and spools[-1].nbytes + len(payload) > limit:
                spools.append(_ShardSpool(directory, len(spools)))
            spools[-1].append(name, dtype, tuple(np.asarray(values).shape), payload)
    except BaseException:
        for spool in spools:
            spool.abort()
        raise

    if len(spools) == 1:
        final = out_path if single_file else directory / SINGLE_FILENAME
        spools[0].finalize(final, metadata)
        return open_checkpoint(final if single_file else directory, role)

    if single_file:
        for spool in spools:
            spool.abort()
        raise ShardLimitExceeded(
            f"{out_path}: shard limit forces {len(spools)} shards; pass a directory instead")

    total = len(spools)
    weight_map: dict[str, str] = {}
    total_bytes = 0
    for i, spool in enumerate(spools):
        shard_name = f"model-{i + 1:05d}-of-{total:05d}.safetensors"
        spool.finalize(directory / shard_name, metadata)
        for meta in spool.metas:
            weight_map[meta.name] = shard_name
        total_bytes += spool.nbytes
    index = {"metadata": {"total_size": total_bytes}, "weight_map": weight_map}
    tmp_index = directory / (INDEX_FILENAME + ".tmp")
    with open(tmp_index, "w", encoding="utf-8") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
    os.replace(tmp_index, directory / INDEX_FILENAME)
    return open_checkpoint(directory, role)


# --- digests ------------------------------------------------------------------

def content_digest(ckpt: Checkpoint) -> str:
    """256-bit digest over header and payload of every shard, in sorted
    shard-file order. Filenames themselves do not enter the digest, so the
    same content at a different path digests identically."""
    combined = hashlib.sha256()
    for shard_path in ckpt.shard_files():
        file_hash = hashlib.sha256()
        with open(shard_path, "rb") as fh:
            while chunk := fh.read(_COPY_CHUNK):
                file_hash.update(chunk)
        combined.update(file_hash.digest())
    return combined.hexdigest()


def validate_aligned(*checkpoints: Checkpoint) -> None:
    """Require identical tensor name/shape sets across checkpoints."""
    first = checkpoints[0]
    for other in checkpoints[1:]:
        if set(first.tensors) != set(other.tensors):
            missing = sorted(set(first.tensors) ^ set(other.tensors))
            raise TensorSetMismatch(f"checkpoints disagree on tensors: {missing[:8]}")
        for name, meta in first.tensors.items():
            if other.tensors[name].shape != meta.shape:
                raise DataError(
                    f"tensor {name!r} shape differs: {meta.shape} vs {other.tensors[name].shape}")
