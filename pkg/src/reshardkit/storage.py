"""Pluggable storage backends and the I/O primitives built on them.

Three backends ship: in-memory (testing), local directory, and a
"chunked-remote" emulator that enforces part-write + concat semantics with
injectable latency and metadata-op accounting. On top of the backend
interface live fixed-size chunked writes with metadata-level concatenation,
offset-parallel range reads, and hot/cold cool-down migration.
"""

from __future__ import annotations

import os
import threading
import time
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .errors import PreconditionError, RangeError, StorageFailure

# Checkpoint directory layout. All locating information for tensor payloads
# lives in the global metadata file; storage files are headerless byte
# streams.
COMPLETE_MARKER = "COMPLETE"
REPLICATED_LOADER_FILE = "loader_replicated.bin"
PART_SUFFIX = ".__part"


def model_file(rank: int) -> str:
    return f"model_{rank}.bin"


def optim_file(rank: int) -> str:
    return f"optim_{rank}.bin"


def extra_file(rank: int) -> str:
    return f"extra_{rank}.bin"


def loader_file(dp_rank: int) -> str:
    return f"loader_{dp_rank}.bin"


def part_name(file_name: str, index: int) -> str:
    return f"{file_name}{PART_SUFFIX}{index:05d}"


@dataclass
class OpCounters:
    """Thread-safe operation counts, queryable by tests."""

    writes: int = 0
    reads: int = 0
    concats: int = 0
    lists: int = 0
    stats: int = 0
    deletes: int = 0
    metadata_ops: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def bump(self, name: str, amount: int = 1) -> None:
        with self._lock:
            setattr(self, name, getattr(self, name) + amount)

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return {
                k: getattr(self, k)
                for k in ("writes", "reads", "concats", "lists", "stats", "deletes", "metadata_ops")
            }


@dataclass(frozen=True)
class FileStat:
    size: int
    last_modified: float


@dataclass(frozen=True)
class RetryPolicy:
    """Exponential backoff for transient write/upload failures."""

    retries: int = 3
    backoff_base_s: float = 0.05

    def delays(self) -> list[float]:
        return [self.backoff_base_s * (2**i) for i in range(self.retries)]


class StorageBackend(ABC):
    """Byte-addressed file store.

    After write_file or concat, read_range returns exactly the written bytes
    for any in-bounds range. Concurrent operations on distinct files and
    concurrent range reads on one file must be safe; concurrent writes to the
    same file name are a caller error.
    """

    supports_range_read = True
    supports_concat = True

    def __init__(self, track_reads: bool = False):
        self.counters = OpCounters()
        self.read_log: Optional[list[tuple[str, int, int]]] = [] if track_reads else None
        self.fault_hook: Optional[Callable[[str, str], None]] = None
        self._log_lock = threading.Lock()

    def _op(self, op: str, name: str) -> None:
        if self.fault_hook is not None:
            self.fault_hook(op, name)

    def _log_read(self, name: str, offset: int, length: int) -> None:
        self.counters.bump("reads")
        if self.read_log is not None:
            with self._log_lock:
                self.read_log.append((name, offset, length))

    @abstractmethod
    def write_file(self, name: str, data: bytes) -> None: ...

    @abstractmethod
    def read_range(self, name: str, offset: int, length: int) -> bytes: ...

    @abstractmethod
    def concat(self, dest: str, parts: list[str]) -> None: ...

    @abstractmethod
    def list(self) -> list[str]: ...

    @abstractmethod
    def stat(self, name: str) -> FileStat: ...

    @abstractmethod
    def delete(self, name: str) -> None: ...

    def exists(self, name: str) -> bool:
        try:
            self.stat(name)
            return True
        except StorageFailure:
            return False

    def read_file(self, name: str) -> bytes:
        return self.read_range(name, 0, self.stat(name).size)

    def _check_range(self, name: str, size: int, offset: int, length: int) -> None:
        if offset < 0 or length < 0 or offset + length > size:
            raise RangeError(f"{name}: range ({offset}, {length}) outside file of {size} bytes")


class MemoryBackend(StorageBackend):
    """In-process store; the default for tests and `mem://` URIs."""

    def __init__(self, track_reads: bool = False, clock: Callable[[], float] = time.time):
        super().__init__(track_reads)
        self._clock = clock
        self._files: dict[str, bytes] = {}
        self._mtimes: dict[str, float] = {}
        self._lock = threading.RLock()

    def write_file(self, name: str, data: bytes) -> None:
        self._op("write", name)
        with self._lock:
            self._files[name] = bytes(data)
            self._mtimes[name] = self._clock()
        self.counters.bump("writes")

    def read_range(self, name: str, offset: int, length: int) -> bytes:
        self._op("read", name)
        with self._lock:
            if name not in self._files:
                raise StorageFailure(f"no such file: {name}")
            data = self._files[name]
            self._check_range(name, len(data), offset, length)
            out = data[offset : offset + length]
        self._log_read(name, offset, length)
        return out

    def concat(self, dest: str, parts: list[str]) -> None:
        self._op("concat", dest)
        with self._lock:
            missing = [p for p in parts if p not in self._files]
            if missing:
                raise StorageFailure(f"concat of missing parts: {missing}")
            self._files[dest] = b"".join(self._files[p] for p in parts)
            self._mtimes[dest] = self._clock()
            for p in parts:
                del self._files[p]
                del self._mtimes[p]
        self.counters.bump("concats")

    def list(self) -> list[str]:
        self._op("list", "")
        self.counters.bump("lists")
        with self._lock:
            return sorted(self._files)

    def stat(self, name: str) -> FileStat:
        self._op("stat", name)
        self.counters.bump("stats")
        with self._lock:
            if name not in self._files:
                raise StorageFailure(f"no such file: {name}")
            return FileStat(len(self._files[name]), self._mtimes[name])

    def delete(self, name: str) -> None:
        self._op("delete", name)
        with self._lock:
            if name not in self._files:
                raise StorageFailure(f"no such file: {name}")
            del self._files[name]
            del self._mtimes[name]
        self.counters.bump("deletes")


class LocalDirBackend(StorageBackend):
    """Files under a root directory; `file://` URIs."""

    def __init__(self, root: str | Path, track_reads: bool = False):
        super().__init__(track_reads)
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, name: str) -> Path:
        p = (self.root / name).resolve()
        if self.root.resolve() not in p.parents and p != self.root.resolve():
            raise PreconditionError(f"file name escapes backend root: {name}")
        return p

    def write_file(self, name: str, data: bytes) -> None:
        self._op("write", name)
        path = self._path(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp~")
        tmp.write_bytes(data)
        os.replace(tmp, path)
        self.counters.bump("writes")

    def read_range(self, name: str, offset: int, length: int) -> bytes:
        self._op("read", name)
        path = self._path(name)
        if not path.is_file():
            raise StorageFailure(f"no such file: {name}")
        self._check_range(name, path.stat().st_size, offset, length)
        with open(path, "rb") as f:
            f.seek(offset)
            out = f.read(length)
        self._log_read(name, offset, length)
        return out

    def concat(self, dest: str, parts: list[str]) -> None:
        self._op("concat", dest)
        path = self._path(dest)
        path.parent.mkdir(parents=True, exist_ok=True)
        part_paths = [self._path(p) for p in parts]
        missing = [str(p) for n, p in zip(parts, part_paths) if not p.is_file()]
        if missing:
            raise StorageFailure(f"concat of missing parts: {missing}")
        tmp = path.with_name(path.name + ".tmp~")
        try:
            with open(tmp, "wb") as out:
                for p in part_paths:
                    out.write(p.read_bytes())
            os.replace(tmp, path)
        except OSError as e:
            tmp.unlink(missing_ok=True)
            raise StorageFailure(f"concat into {dest} failed: {e}") from e
        for p in part_paths:
            p.unlink()
        self.counters.bump("concats")

    def list(self) -> list[str]:
        self._op("list", "")
        self.counters.bump("lists")
        out = []
        for dirpath, _, names in os.walk(self.root):
            for n in names:
                if n.endswith(".tmp~"):
                    continue
                out.append(str((Path(dirpath) / n).relative_to(self.root)))
        return sorted(out)

    def stat(self, name: str) -> FileStat:
        self._op("stat", name)
        self.counters.bump("stats")
        path = self._path(name)
        if not path.is_file():
            raise StorageFailure(f"no such file: {name}")
        st = path.stat()
        return FileStat(st.st_size, st.st_mtime)

    def delete(self, name: str) -> None:
        self._op("delete", name)
        path = self._path(name)
        if not path.is_file():
            raise StorageFailure(f"no such file: {name}")
        path.unlink()
        self.counters.bump("deletes")


@dataclass(frozen=True)
class RemoteLatency:
    """Injectable per-operation delays for the chunked-remote emulator."""

    write_fixed_s: float = 0.0
    write_per_mib_s: float = 0.0
    read_fixed_s: float = 0.0
    read_per_mib_s: float = 0.0
    metadata_op_s: float = 0.0


class ChunkedRemoteBackend(StorageBackend):
    """Remote-store emulator: append-only files published via part uploads
    plus metadata-level concatenation.

    Part files are hidden from list() until concatenated (atomic publish).
    Every namespace operation (write create, stat, list, delete, concat)
    counts as a metadata op; concat costs one metadata op per part when
    `serial_concat` is set, mirroring a serialized namespace-server
    implementation, and a single op otherwise.
    """

    def __init__(
        self,
        inner: Optional[StorageBackend] = None,
        latency: RemoteLatency = RemoteLatency(),
        serial_concat: bool = False,
        track_reads: bool = False,
    ):
        super().__init__(track_reads)
        self.inner = inner if inner is not None else MemoryBackend()
        self.latency = latency
        self.serial_concat = serial_concat

    def _pay(self, fixed: float, per_mib: float = 0.0, nbytes: int = 0) -> None:
        delay = fixed + per_mib * (nbytes / (1024 * 1024))
        if delay > 0:
            time.sleep(delay)

    def _meta_op(self, count: int = 1) -> None:
        self.counters.bump("metadata_ops", count)
        for _ in range(count if self.serial_concat else min(count, 1)):
            self._pay(self.latency.metadata_op_s)

    def write_file(self, name: str, data: bytes) -> None:
        self._op("write", name)
        self._meta_op()
        self._pay(self.latency.write_fixed_s, self.latency.write_per_mib_s, len(data))
        self.inner.write_file(name, data)
        self.counters.bump("writes")

    def read_range(self, name: str, offset: int, length: int) -> bytes:
        self._op("read", name)
        self._pay(self.latency.read_fixed_s, self.latency.read_per_mib_s, length)
        out = self.inner.read_range(name, offset, length)
        self._log_read(name, offset, length)
        return out

    def concat(self, dest: str, parts: list[str]) -> None:
        self._op("concat", dest)
        self._meta_op(max(len(parts), 1))
        self.inner.concat(dest, parts)
        self.counters.bump("concats")

    def list(self) -> list[str]:
        self._op("list", "")
        self._meta_op()
        self.counters.bump("lists")
        return [n for n in self.inner.list() if PART_SUFFIX not in n]

    def stat(self, name: str) -> FileStat:
        self._op("stat", name)
        self._meta_op()
        self.counters.bump("stats")
        return self.inner.stat(name)

    def delete(self, name: str) -> None:
        self._op("delete", name)
        self._meta_op()
        self.inner.delete(name)
        self.counters.bump("deletes")


# --- chunked write + parallel range read ---


@dataclass(frozen=True)
class ChunkedWriteConfig:
    chunk_size: int = 4 * 1024 * 1024
    max_parallel_parts: int = 8

    def __post_init__(self):
        if self.chunk_size < 1 or self.max_parallel_parts < 1:
            raise PreconditionError("chunk_size and max_parallel_parts must be >= 1")


@dataclass(frozen=True)
class ChunkedWriteReport:
    file_name: str
    parts: int
    total_bytes: int


def chunked_write(
    backend: StorageBackend,
    file_name: str,
    data: bytes,
    cfg: ChunkedWriteConfig = ChunkedWriteConfig(),
    retry: RetryPolicy = RetryPolicy(),
) -> ChunkedWriteReport:
    """Write fixed-size parts concurrently, then merge them under file_name.

    The resulting file is bitwise equal to a single-shot write; parts are no
    longer listed after the concat. On concat failure the parts are retained
    for recovery.
    """
    if not backend.supports_concat:
        raise PreconditionError("backend does not support concat")
    if len(data) == 0:
        backend.write_file(file_name, b"")
        return ChunkedWriteReport(file_name, 0, 0)

    n_parts = (len(data) + cfg.chunk_size - 1) // cfg.chunk_size
    names = [part_name(file_name, i) for i in range(n_parts)]

    def write_part(i: int) -> None:
        payload = data[i * cfg.chunk_size : (i + 1) * cfg.chunk_size]
        last: Exception | None = None
        for delay in [0.0] + retry.delays():
            if delay:
                time.sleep(delay)
            try:
                backend.write_file(names[i], payload)
                return
            except StorageFailure as e:
                last = e
        raise StorageFailure(f"part {names[i]} failed after {retry.retries} retries: {last}")

    with ThreadPoolExecutor(max_workers=min(cfg.max_parallel_parts, n_parts)) as pool:
        for fut in [pool.submit(write_part, i) for i in range(n_parts)]:
            fut.result()

    backend.concat(file_name, names)
    return ChunkedWriteReport(file_name, n_parts, len(data))


def parallel_range_read(
    backend: StorageBackend,
    file_name: str,
    ranges: list[tuple[int, int]],
    max_workers: int = 8,
) -> list[bytes]:
    """Read many (offset, length) ranges of one file concurrently.

    Results are ordered as requested regardless of completion order. Bounds
    are validated up front; no read is issued for an out-of-range request.
    """
    if not backend.supports_range_read:
        raise PreconditionError("backend does not support range reads")
    size = backend.stat(file_name).size
    for offset, length in ranges:
        if offset < 0 or length < 0 or offset + length > size:
            raise RangeError(f"{file_name}: range ({offset}, {length}) outside file of {size} bytes")
    if not ranges:
        return []
    with ThreadPoolExecutor(max_workers=min(max_workers, len(ranges))) as pool:
        futs = [pool.submit(backend.read_range, file_name, o, n) for o, n in ranges]
        return [f.result() for f in futs]


# --- hot/cold tiering ---


@dataclass(frozen=True)
class TierConfig:
    hot_root: str
    cold_root: str
    retention_threshold_s: float

    def __post_init__(self):
        if self.hot_root == self.cold_root:
            raise PreconditionError("hot and cold roots must be disjoint")


@dataclass
class MigrationReport:
    migrated: list[str] = field(default_factory=list)
    failed: list[tuple[str, str]] = field(default_factory=list)


class TieredStore:
    """A hot backend with a cold tier behind a path-mapping table.

    Reads of a migrated file transparently resolve to the cold copy under its
    original path.
    """

    def __init__(self, hot: StorageBackend, cold: StorageBackend):
        self.hot = hot
        self.cold = cold
        self.path_map: dict[str, str] = {}

    def _resolve(self, name: str) -> tuple[StorageBackend, str]:
        if name in self.path_map:
            return self.cold, self.path_map[name]
        return self.hot, name

    def read_file(self, name: str) -> bytes:
        backend, resolved = self._resolve(name)
        return backend.read_file(resolved)

    def read_range(self, name: str, offset: int, length: int) -> bytes:
        backend, resolved = self._resolve(name)
        return backend.read_range(resolved, offset, length)

    def stat(self, name: str) -> FileStat:
        backend, resolved = self._resolve(name)
        return backend.stat(resolved)

    def list(self) -> list[str]:
        return sorted(set(self.hot.list()) | set(self.path_map))

    @classmethod
    def from_config(cls, cfg: TierConfig) -> "TieredStore":
        return cls(backend_for_uri(cfg.hot_root), backend_for_uri(cfg.cold_root))


def cool_down(store: TieredStore, retention_threshold_s: float, now: float) -> MigrationReport:
    """Migrate hot files older than the retention threshold to the cold tier.

    A file is deleted from hot storage only after its cold copy verifies
    bitwise; failures leave the file hot and are reported. Idempotent for a
    fixed `now`.
    """
    report = MigrationReport()
    for name in store.hot.list():
        if store.hot.stat(name).last_modified >= now - retention_threshold_s:
            continue
        try:
            data = store.hot.read_file(name)
            store.cold.write_file(name, data)
            if store.cold.read_file(name) != data:
                raise StorageFailure("cold copy verification mismatch")
            store.hot.delete(name)
            store.path_map[name] = name
            report.migrated.append(name)
        except StorageFailure as e:
            report.failed.append((name, str(e)))
    return report


# --- URI scheme resolution ---

_MEM_STORES: dict[str, MemoryBackend] = {}
_MEM_LOCK = threading.Lock()


def reset_memory_stores() -> None:
    with _MEM_LOCK:
        _MEM_STORES.clear()


def backend_for_uri(uri: str, track_reads: bool = False) -> StorageBackend:
    """Select a backend from a checkpoint path.

    `mem://name` shares one in-process store per name; `file:///dir` is a
    local directory; `chunked:///dir` adds the remote-store part/concat
    emulation. A bare path behaves like `file://`.
    """
    if uri.startswith("mem://"):
        name = uri[len("mem://") :]
        with _MEM_LOCK:
            if name not in _MEM_STORES:
                _MEM_STORES[name] = MemoryBackend(track_reads=track_reads)
            return _MEM_STORES[name]
    if uri.startswith("file://"):
        return LocalDirBackend(uri[len("file://") :], track_reads=track_reads)
    if uri.startswith("chunked://"):
        return ChunkedRemoteBackend(
            inner=LocalDirBackend(uri[len("chunked://") :]), track_reads=track_reads
        )
    if "://" in uri:
        raise PreconditionError(f"unknown storage scheme in {uri!r}")
    return LocalDirBackend(uri, track_reads=track_reads)
