"""Parallelism-agnostic shard metadata: geometry, irregular-range
decomposition, coverage validation, and the canonical global-metadata codec.

All types are immutable values; all operations are pure functions.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .errors import MetadataError, PreconditionError, RangeError, VersionError

METADATA_FILE = ".metadata"
METADATA_VERSION = 1


class Dtype(enum.Enum):
    F32 = 4
    F64 = 8
    I32 = 4
    I64 = 8
    U8 = 1

    @property
    def element_size(self) -> int:
        return self.value


def volume(lengths: Iterable[int]) -> int:
    v = 1
    for n in lengths:
        v *= n
    return v


def row_major_stride(shape: Iterable[int]) -> tuple[int, ...]:
    """Canonical row-major element strides (stride[last] == 1)."""
    shape = tuple(shape)
    stride = [1] * len(shape)
    for i in range(len(shape) - 2, -1, -1):
        stride[i] = stride[i + 1] * shape[i + 1]
    return tuple(stride)


def unravel(flat: int, shape: tuple[int, ...]) -> tuple[int, ...]:
    coord = [0] * len(shape)
    for i in range(len(shape) - 1, -1, -1):
        flat, coord[i] = divmod(flat, shape[i])
    return tuple(coord)


@dataclass(frozen=True)
class ShardMeta:
    """Index tuple locating a regular shard inside its global tensor."""

    fqn: str
    nd_offsets: tuple[int, ...]
    nd_lengths: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "nd_offsets", tuple(self.nd_offsets))
        object.__setattr__(self, "nd_lengths", tuple(self.nd_lengths))
        if len(self.nd_offsets) != len(self.nd_lengths):
            raise PreconditionError(f"{self.fqn}: offsets/lengths rank mismatch")
        if any(o < 0 for o in self.nd_offsets) or any(n <= 0 for n in self.nd_lengths):
            raise PreconditionError(f"{self.fqn}: offsets must be >= 0 and lengths > 0")

    @property
    def volume(self) -> int:
        return volume(self.nd_lengths)

    def sort_key(self) -> tuple:
        return (self.fqn, self.nd_offsets, self.nd_lengths)


@dataclass(frozen=True)
class BasicMeta:
    """Runtime facts of a tensor shard: housing shape, dtype, stride, device."""

    fqn: str
    global_shape: tuple[int, ...]
    dtype: Dtype
    stride: tuple[int, ...]
    device_tag: str = "cpu"

    def __post_init__(self):
        object.__setattr__(self, "global_shape", tuple(self.global_shape))
        object.__setattr__(self, "stride", tuple(self.stride))
        if self.stride != row_major_stride(self.global_shape):
            raise PreconditionError(f"{self.fqn}: stride is not canonical row-major for {self.global_shape}")


def basic_meta(fqn: str, global_shape: Iterable[int], dtype: Dtype, device_tag: str = "cpu") -> BasicMeta:
    shape = tuple(global_shape)
    return BasicMeta(fqn, shape, dtype, row_major_stride(shape), device_tag)


@dataclass(frozen=True)
class ByteMeta:
    """Absolute byte location of one shard payload inside a storage file."""

    file_name: str
    byte_offset: int
    byte_length: int

    def __post_init__(self):
        if self.byte_offset < 0 or self.byte_length <= 0:
            raise PreconditionError(f"{self.file_name}: bad byte range ({self.byte_offset}, {self.byte_length})")


@dataclass(frozen=True)
class ShardEntry:
    """One saved shard: position + runtime facts + storage location."""

    shard: ShardMeta
    basic: BasicMeta
    byte: ByteMeta
    writer_rank: int

    def __post_init__(self):
        if self.shard.fqn != self.basic.fqn:
            raise PreconditionError(f"entry fqn mismatch: {self.shard.fqn} vs {self.basic.fqn}")
        expect = self.shard.volume * self.basic.dtype.element_size
        if self.byte.byte_length != expect:
            raise PreconditionError(
                f"{self.shard.fqn}: byte_length {self.byte.byte_length} != volume*element_size {expect}"
            )


@dataclass(frozen=True)
class GlobalMetadata:
    """The single global metadata file of a checkpoint."""

    version: int = METADATA_VERSION
    tensor_map: dict[str, tuple[ShardEntry, ...]] = field(default_factory=dict)
    loader_map: dict[int, ByteMeta] = field(default_factory=dict)
    replicated_loader_file: Optional[str] = None
    extra_state_files: dict[int, str] = field(default_factory=dict)


@dataclass(frozen=True)
class Overlap:
    """Intersection of a saved and a wanted shard, in global coordinates,
    plus where that region sits inside each shard."""

    region: ShardMeta
    src_rel_offsets: tuple[int, ...]
    dst_rel_offsets: tuple[int, ...]


def overlap(saved: ShardMeta, wanted: ShardMeta) -> Optional[Overlap]:
    """Per-axis interval intersection, or None when disjoint on any axis."""
    if saved.fqn != wanted.fqn:
        raise PreconditionError(f"overlap across tensors: {saved.fqn} vs {wanted.fqn}")
    if len(saved.nd_offsets) != len(wanted.nd_offsets):
        raise PreconditionError(f"{saved.fqn}: axis count mismatch")
    offsets, lengths, src_rel, dst_rel = [], [], [], []
    for so, sl, wo, wl in zip(saved.nd_offsets, saved.nd_lengths, wanted.nd_offsets, wanted.nd_lengths):
        lo = max(so, wo)
        hi = min(so + sl, wo + wl)
        if hi <= lo:
            return None
        offsets.append(lo)
        lengths.append(hi - lo)
        src_rel.append(lo - so)
        dst_rel.append(lo - wo)
    return Overlap(ShardMeta(saved.fqn, tuple(offsets), tuple(lengths)), tuple(src_rel), tuple(dst_rel))


def decompose_flat_range(global_shape: Iterable[int], flat_start: int, flat_end: int, fqn: str) -> list[ShardMeta]:
    """Decompose a row-major flat index range into regular shards.

    Greedy: at a row boundary, emit one block spanning as many whole trailing
    rows as fit contiguously along the next-outer axis; otherwise emit the
    partial row. Blocks come out disjoint, sorted, and contiguous.
    """
    shape = tuple(global_shape)
    vol = volume(shape)
    if flat_end > vol:
        raise RangeError(f"{fqn}: flat range end {flat_end} exceeds tensor volume {vol}")
    if flat_start < 0 or flat_end <= flat_start:
        raise PreconditionError(f"{fqn}: bad flat range [{flat_start}, {flat_end})")
    if len(shape) == 1:
        return [ShardMeta(fqn, (flat_start,), (flat_end - flat_start,))]

    row = shape[-1]
    rank = len(shape)
    blocks: list[ShardMeta] = []
    cursor = flat_start
    while cursor < flat_end:
        coord = unravel(cursor, shape)
        remaining = flat_end - cursor
        if coord[-1] == 0 and remaining >= row:
            rows = min(remaining // row, shape[-2] - coord[-2])
            offsets = coord[:-1] + (0,)
            lengths = (1,) * (rank - 2) + (rows, row)
            cursor += rows * row
        else:
            offsets = coord
            lengths = (1,) * (rank - 1) + (min(row - coord[-1], remaining),)
            cursor += lengths[-1]
        blocks.append(ShardMeta(fqn, offsets, lengths))
    return blocks


# --- coverage validation ---


@dataclass(frozen=True)
class Violation:
    kind: str  # "gap" | "double-coverage" | "basic-mismatch" | "bounds" | "naming"
    fqn: str
    message: str
    region: Optional[ShardMeta] = None

    def __str__(self) -> str:
        return f"[{self.kind}] {self.fqn}: {self.message}"


def validate_coverage(meta: GlobalMetadata) -> list[Violation]:
    """Check that every tensor's shards tile its global shape exactly once.

    Exactness is the element-count identity (sum of shard volumes equals the
    global volume) plus zero pairwise overlap volume.
    """
    out: list[Violation] = []
    for fqn, entries in meta.tensor_map.items():
        if not entries:
            out.append(Violation("gap", fqn, "no shards recorded"))
            continue
        ref = entries[0].basic
        for e in entries:
            if e.shard.fqn != fqn:
                out.append(Violation("naming", fqn, f"entry named {e.shard.fqn}"))
            b = e.basic
            if (b.global_shape, b.dtype, b.stride) != (ref.global_shape, ref.dtype, ref.stride):
                out.append(Violation("basic-mismatch", fqn, f"writer {e.writer_rank} disagrees on shape/dtype/stride"))
            for o, n, g in zip(e.shard.nd_offsets, e.shard.nd_lengths, ref.global_shape):
                if o + n > g:
                    out.append(Violation("bounds", fqn, f"shard {e.shard.nd_offsets}/{e.shard.nd_lengths} exceeds {ref.global_shape}"))
                    break
        total = sum(e.shard.volume for e in entries)
        expect = volume(ref.global_shape)
        if total != expect:
            out.append(Violation("gap", fqn, f"shard volumes sum to {total}, global volume is {expect}"))
        for i in range(len(entries)):
            for j in range(i + 1, len(entries)):
                ov = overlap(entries[i].shard, entries[j].shard)
                if ov is not None:
                    out.append(
                        Violation(
                            "double-coverage",
                            fqn,
                            f"shards {i} and {j} both cover offsets {ov.region.nd_offsets} lengths {ov.region.nd_lengths}",
                            ov.region,
                        )
                    )
    return out


# --- canonical codec ---

_TOP_KEYS = {"version", "tensor_map", "loader_map", "replicated_loader_file", "extra_state_files"}


def _entry_obj(e: ShardEntry) -> dict:
    return {
        "shard": {"fqn": e.shard.fqn, "nd_offsets": list(e.shard.nd_offsets), "nd_lengths": list(e.shard.nd_lengths)},
        "basic": {
            "fqn": e.basic.fqn,
            "global_shape": list(e.basic.global_shape),
            "dtype": e.basic.dtype.name,
            "stride": list(e.basic.stride),
            "device_tag": e.basic.device_tag,
        },
        "byte": {"file_name": e.byte.file_name, "byte_offset": e.byte.byte_offset, "byte_length": e.byte.byte_length},
        "writer_rank": e.writer_rank,
    }


def encode_metadata(meta: GlobalMetadata) -> bytes:
    """Canonical UTF-8 JSON: sorted keys, no insignificant whitespace.

    Equal metadata values encode to identical bytes regardless of map
    insertion order.
    """
    obj = {
        "version": meta.version,
        "tensor_map": {fqn: [_entry_obj(e) for e in entries] for fqn, entries in meta.tensor_map.items()},
        "loader_map": {
            str(dp): {"file_name": bm.file_name, "byte_offset": bm.byte_offset, "byte_length": bm.byte_length}
            for dp, bm in meta.loader_map.items()
        },
        "replicated_loader_file": meta.replicated_loader_file,
        "extra_state_files": {str(r): f for r, f in meta.extra_state_files.items()},
    }
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def _need(obj: dict, key: str, kind) -> object:
    if key not in obj:
        raise MetadataError(f"missing key {key!r}")
    val = obj[key]
    if kind is int and isinstance(val, bool) or not isinstance(val, kind):
        raise MetadataError(f"key {key!r} has wrong type {type(val).__name__}")
    return val


def _decode_entry(obj: dict) -> ShardEntry:
    shard_o = _need(obj, "shard", dict)
    basic_o = _need(obj, "basic", dict)
    byte_o = _need(obj, "byte", dict)
    dtype_name = _need(basic_o, "dtype", str)
    try:
        dtype = Dtype[dtype_name]
    except KeyError:
        raise MetadataError(f"unknown dtype {dtype_name!r}") from None
    try:
        shard = ShardMeta(
            _need(shard_o, "fqn", str),
            tuple(_need(shard_o, "nd_offsets", list)),
            tuple(_need(shard_o, "nd_lengths", list)),
        )
        basic = BasicMeta(
            _need(basic_o, "fqn", str),
            tuple(_need(basic_o, "global_shape", list)),
            dtype,
            tuple(_need(basic_o, "stride", list)),
            _need(basic_o, "device_tag", str),
        )
        byte = ByteMeta(
            _need(byte_o, "file_name", str),
            _need(byte_o, "byte_offset", int),
            _need(byte_o, "byte_length", int),
        )
        return ShardEntry(shard, basic, byte, _need(obj, "writer_rank", int))
    except PreconditionError as e:
        raise MetadataError(str(e)) from None


def decode_metadata(data: bytes) -> GlobalMetadata:
    try:
        obj = json.loads(data.decode("utf-8"))
    except UnicodeDecodeError as e:
        raise MetadataError("metadata is not UTF-8", byte_offset=e.start) from None
    except json.JSONDecodeError as e:
        raise MetadataError(f"malformed JSON: {e.msg}", byte_offset=e.pos) from None
    if not isinstance(obj, dict):
        raise MetadataError("metadata root is not an object")
    if set(obj) != _TOP_KEYS:
        raise MetadataError(f"top-level keys {sorted(obj)} != {sorted(_TOP_KEYS)}")
    version = _need(obj, "version", int)
    if version != METADATA_VERSION:
        raise VersionError(f"unsupported metadata version {version}")

    tensor_map: dict[str, tuple[ShardEntry, ...]] = {}
    for fqn, entries in _need(obj, "tensor_map", dict).items():
        if not isinstance(entries, list):
            raise MetadataError(f"tensor_map[{fqn!r}] is not a list")
        tensor_map[fqn] = tuple(_decode_entry(e) for e in entries)

    loader_map: dict[int, ByteMeta] = {}
    for dp, bm in _need(obj, "loader_map", dict).items():
        if not isinstance(bm, dict):
            raise MetadataError(f"loader_map[{dp!r}] is not an object")
        loader_map[int(dp)] = ByteMeta(
            _need(bm, "file_name", str), _need(bm, "byte_offset", int), _need(bm, "byte_length", int)
        )

    repl = obj["replicated_loader_file"]
    if repl is not None and not isinstance(repl, str):
        raise MetadataError("replicated_loader_file must be a string or null")
    extra: dict[int, str] = {}
    for r, f in _need(obj, "extra_state_files", dict).items():
        if not isinstance(f, str):
            raise MetadataError(f"extra_state_files[{r!r}] is not a string")
        extra[int(r)] = f
    return GlobalMetadata(version, tensor_map, loader_map, repl, extra)
