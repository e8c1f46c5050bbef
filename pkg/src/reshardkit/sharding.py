"""Synthetic models and deterministic per-rank shard layouts.

Stands in for training-framework sharding specifications: TP splits one axis
evenly, PP assigns whole tensors to stages, DP replicates, and the ZeRO mode
flattens + concatenates each (pp, tp) group's optimizer state before sharding
it across the DP group. Tensor content is a pure hash of (seed, fqn, element
index), so any two ranks materialize bit-identical values.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels
from .errors import LayoutError, LookupError_, PreconditionError, RangeError
from .meta import BasicMeta, Dtype, ShardMeta, basic_meta, decompose_flat_range, row_major_stride, volume

OPTIM_PREFIX = "optim/"
EXTRA_STATE_BYTES = 64


@dataclass(frozen=True)
class TensorSpec:
    fqn: str
    global_shape: tuple[int, ...]
    dtype: Dtype
    tp_shard_axis: Optional[int] = None
    pp_stage: int = 0

    def __post_init__(self):
        object.__setattr__(self, "global_shape", tuple(self.global_shape))
        if self.tp_shard_axis is not None and not (0 <= self.tp_shard_axis < len(self.global_shape)):
            raise PreconditionError(f"{self.fqn}: tp_shard_axis {self.tp_shard_axis} out of range")
        if self.pp_stage < 0:
            raise PreconditionError(f"{self.fqn}: negative pp_stage")


@dataclass(frozen=True)
class ModelSpec:
    tensors: tuple[TensorSpec, ...]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tensors", tuple(self.tensors))
        fqns = [t.fqn for t in self.tensors]
        if len(set(fqns)) != len(fqns):
            raise PreconditionError("duplicate tensor fqns in model spec")

    def tensor(self, fqn: str) -> TensorSpec:
        base = fqn[len(OPTIM_PREFIX):] if fqn.startswith(OPTIM_PREFIX) else fqn
        for t in self.tensors:
            if t.fqn == base:
                return t
        raise LookupError_(f"unknown tensor {fqn!r}")


class ZeroMode(enum.Enum):
    NONE = "none"
    FLATTEN_CONCAT_SHARD = "flatten_concat_shard"


@dataclass(frozen=True)
class ShardingSpec:
    """Parallelism degrees. Rank order: TP fastest, then DP, then PP."""

    tp: int = 1
    dp: int = 1
    pp: int = 1
    zero_mode: ZeroMode = ZeroMode.NONE

    def __post_init__(self):
        if min(self.tp, self.dp, self.pp) < 1:
            raise PreconditionError("parallelism degrees must be >= 1")

    @property
    def world_size(self) -> int:
        return self.tp * self.dp * self.pp

    def coords(self, global_rank: int) -> tuple[int, int, int]:
        """(tp_idx, dp_idx, pp_idx) of a global rank."""
        if not (0 <= global_rank < self.world_size):
            raise PreconditionError(f"rank {global_rank} outside world size {self.world_size}")
        return global_rank % self.tp, (global_rank // self.tp) % self.dp, global_rank // (self.dp * self.tp)

    def rank_of(self, tp_idx: int, dp_idx: int, pp_idx: int) -> int:
        return pp_idx * (self.dp * self.tp) + dp_idx * self.tp + tp_idx

    def describe(self) -> str:
        text = f"tp={self.tp},dp={self.dp},pp={self.pp}"
        return text + ",zero" if self.zero_mode is ZeroMode.FLATTEN_CONCAT_SHARD else text

    @classmethod
    def parse(cls, text: str) -> "ShardingSpec":
        """Parse 'tp=A,dp=B,pp=C[,zero]'."""
        degrees = {"tp": 1, "dp": 1, "pp": 1}
        zero = ZeroMode.NONE
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            if part == "zero":
                zero = ZeroMode.FLATTEN_CONCAT_SHARD
                continue
            key, _, value = part.partition("=")
            if key not in degrees or not value.isdigit():
                raise PreconditionError(f"bad parallelism token {part!r} (expected tp=A,dp=B,pp=C[,zero])")
            degrees[key] = int(value)
        return cls(degrees["tp"], degrees["dp"], degrees["pp"], zero)


@dataclass(frozen=True)
class RankLayout:
    global_rank: int
    model_shards: tuple[tuple[ShardMeta, BasicMeta], ...]
    optimizer_shards: tuple[tuple[ShardMeta, BasicMeta], ...]
    holds_dataloader_state: bool

    @property
    def shards(self) -> tuple[tuple[ShardMeta, BasicMeta], ...]:
        return self.model_shards + self.optimizer_shards


def _tp_shard(tensor: TensorSpec, tp: int, tp_idx: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Offsets/lengths of a tensor's TP-local piece (whole tensor if unsplit)."""
    offsets = [0] * len(tensor.global_shape)
    lengths = list(tensor.global_shape)
    if tensor.tp_shard_axis is not None and tp > 1:
        axis = tensor.tp_shard_axis
        size = tensor.global_shape[axis]
        if size % tp != 0:
            raise LayoutError(f"{tensor.fqn}: axis {axis} size {size} not divisible by tp={tp}")
        lengths[axis] = size // tp
        offsets[axis] = tp_idx * lengths[axis]
    return tuple(offsets), tuple(lengths)


def layout_for_rank(model: ModelSpec, spec: ShardingSpec, global_rank: int) -> RankLayout:
    tp_idx, dp_idx, pp_idx = spec.coords(global_rank)
    device = f"sim-gpu:{global_rank}"

    stage_tensors = [t for t in model.tensors if t.pp_stage == pp_idx]
    for t in model.tensors:
        if t.pp_stage >= spec.pp:
            raise LayoutError(f"{t.fqn}: pp_stage {t.pp_stage} >= pp degree {spec.pp}")

    model_shards = []
    for t in stage_tensors:
        offsets, lengths = _tp_shard(t, spec.tp, tp_idx)
        model_shards.append((ShardMeta(t.fqn, offsets, lengths), basic_meta(t.fqn, t.global_shape, t.dtype, device)))

    optim_shards = []
    if spec.zero_mode is ZeroMode.NONE:
        for t in stage_tensors:
            offsets, lengths = _tp_shard(t, spec.tp, tp_idx)
            fqn = OPTIM_PREFIX + t.fqn
            optim_shards.append((ShardMeta(fqn, offsets, lengths), basic_meta(fqn, t.global_shape, t.dtype, device)))
    else:
        # Flatten each tensor's TP-local piece row-major, concatenate in
        # declaration order, split into dp contiguous flat ranges (last rank
        # absorbs the remainder), then re-express this rank's range as
        # regular shards per constituent tensor.
        pieces = [(t, *_tp_shard(t, spec.tp, tp_idx)) for t in stage_tensors]
        total = sum(volume(lengths) for _, _, lengths in pieces)
        base = total // spec.dp
        lo = dp_idx * base
        hi = total if dp_idx == spec.dp - 1 else (dp_idx + 1) * base
        cum = 0
        for t, tp_offsets, tp_lengths in pieces:
            size = volume(tp_lengths)
            a, b = max(lo - cum, 0), min(hi - cum, size)
            cum += size
            if b <= a:
                continue
            fqn = OPTIM_PREFIX + t.fqn
            for block in decompose_flat_range(tp_lengths, a, b, fqn):
                offsets = tuple(o + rel for o, rel in zip(tp_offsets, block.nd_offsets))
                optim_shards.append(
                    (ShardMeta(fqn, offsets, block.nd_lengths), basic_meta(fqn, t.global_shape, t.dtype, device))
                )

    return RankLayout(
        global_rank=global_rank,
        model_shards=tuple(model_shards),
        optimizer_shards=tuple(optim_shards),
        holds_dataloader_state=(tp_idx == 0 and pp_idx == 0),
    )


def all_layouts(model: ModelSpec, spec: ShardingSpec) -> list[RankLayout]:
    return [layout_for_rank(model, spec, r) for r in range(spec.world_size)]


def hashes_to_bytes(hashes: np.ndarray, element_size: int) -> bytes:
    """Truncate 64-bit hashes to little-endian elements of the given width."""
    le = hashes.astype("<u8", copy=False)
    if element_size == 8:
        return le.tobytes()
    return le.view(np.uint8).reshape(-1, 8)[:, :element_size].tobytes()


def materialize_shard(model: ModelSpec, shard: ShardMeta) -> bytes:
    """Row-major little-endian bytes of a shard's synthetic elements."""
    tensor = model.tensor(shard.fqn)
    shape = tensor.global_shape
    if len(shard.nd_offsets) != len(shape):
        raise PreconditionError(f"{shard.fqn}: shard rank {len(shard.nd_offsets)} != tensor rank {len(shape)}")
    for o, n, g in zip(shard.nd_offsets, shard.nd_lengths, shape):
        if o + n > g:
            raise RangeError(f"{shard.fqn}: shard exceeds global shape {shape}")
    base = _kernels.stream_base(model.seed, shard.fqn)
    stride = row_major_stride(shape)
    hashes = _kernels.hash_region(base, stride, shard.nd_offsets, shard.nd_lengths)
    return hashes_to_bytes(hashes, tensor.dtype.element_size)


def materialize_full(model: ModelSpec, fqn: str) -> bytes:
    tensor = model.tensor(fqn)
    whole = ShardMeta(fqn, (0,) * len(tensor.global_shape), tensor.global_shape)
    return materialize_shard(model, whole)


def extra_state_blob(model: ModelSpec, global_rank: int) -> bytes:
    """Opaque per-rank extra state (RNG etc. stand-in), deterministic."""
    base = _kernels.stream_base(model.seed, f"extra/rank{global_rank}")
    return hashes_to_bytes(_kernels.hash_flat_range(base, 0, EXTRA_STATE_BYTES // 8), 8)


# --- model spec JSON config ---


def model_spec_to_json(model: ModelSpec) -> str:
    obj = {
        "seed": model.seed,
        "tensors": [
            {
                "fqn": t.fqn,
                "shape": list(t.global_shape),
                "dtype": t.dtype.name,
                "tp_shard_axis": t.tp_shard_axis,
                "pp_stage": t.pp_stage,
            }
            for t in model.tensors
        ],
    }
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def model_spec_from_json(text: str) -> ModelSpec:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise PreconditionError(f"malformed model spec JSON: {e.msg} at {e.pos}") from None
    tensors = []
    for item in obj.get("tensors", []):
        tensors.append(
            TensorSpec(
                fqn=item["fqn"],
                global_shape=tuple(item["shape"]),
                dtype=Dtype[item.get("dtype", "F32")],
                tp_shard_axis=item.get("tp_shard_axis"),
                pp_stage=item.get("pp_stage", 0),
            )
        )
    return ModelSpec(tensors=tuple(tensors), seed=obj.get("seed", 0))
