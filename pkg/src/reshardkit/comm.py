"""Emulated coordination: tree-structured gather/scatter among simulated
ranks, message accounting, fault injection, and the asynchronous integrity
barrier.

Transport is in-process; a "message" is one payload bundle crossing one tree
edge. The coordinator is the tree root (always global rank 0 by
construction).
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from .errors import CommError, PreconditionError

DEFAULT_BARRIER_DEADLINE_S = 30.0


@dataclass(frozen=True)
class Topology:
    """Tree over global ranks: machine-local subtrees under local rank 0,
    then machine roots grouped iteratively until a single coordinator."""

    world_size: int
    workers_per_machine: int
    group_size: int
    parent: dict[int, int]  # child -> parent; the root has no entry

    @property
    def coordinator(self) -> int:
        return 0

    @property
    def edges(self) -> int:
        return len(self.parent)

    def children(self, rank: int) -> list[int]:
        return sorted(c for c, p in self.parent.items() if p == rank)

    def max_fan_in(self) -> int:
        counts: dict[int, int] = {}
        for p in self.parent.values():
            counts[p] = counts.get(p, 0) + 1
        return max(counts.values(), default=0)

    def subtree(self, rank: int) -> set[int]:
        out = {rank}
        frontier = [rank]
        while frontier:
            nxt = []
            for r in frontier:
                for c in self.children(r):
                    out.add(c)
                    nxt.append(c)
            frontier = nxt
        return out

    def depth_order(self) -> list[int]:
        """Ranks ordered leaves-first (children before parents)."""
        depth = {self.coordinator: 0}
        pending = [r for r in range(self.world_size) if r != self.coordinator]
        while pending:
            rest = []
            for r in pending:
                p = self.parent[r]
                if p in depth:
                    depth[r] = depth[p] + 1
                else:
                    rest.append(r)
            pending = rest
        return sorted(range(self.world_size), key=lambda r: -depth[r])


def build_topology(world_size: int, workers_per_machine: int, group_size: int) -> Topology:
    if world_size < 1 or workers_per_machine < 1:
        raise PreconditionError("world_size and workers_per_machine must be >= 1")
    parent: dict[int, int] = {}
    roots: list[int] = []
    for start in range(0, world_size, workers_per_machine):
        machine = list(range(start, min(start + workers_per_machine, world_size)))
        roots.append(machine[0])
        for r in machine[1:]:
            parent[r] = machine[0]
    while len(roots) > 1:
        if group_size < 2:
            raise PreconditionError("group_size must be >= 2 to merge multiple machines")
        merged = []
        for i in range(0, len(roots), group_size):
            group = roots[i : i + group_size]
            for r in group[1:]:
                parent[r] = group[0]
            merged.append(group[0])
        roots = merged
    return Topology(world_size, workers_per_machine, group_size, parent)


@dataclass
class GatherResult:
    payloads: dict[int, Any]
    missing: set[int]
    messages: int


@dataclass
class ScatterResult:
    delivered: dict[int, Any]
    missing: set[int]
    messages: int


class CommGroup:
    """One topology plus message counters and fault-injection hooks."""

    def __init__(self, topology: Topology):
        self.topology = topology
        self.dead: set[int] = set()
        self._lock = threading.Lock()
        self.gather_messages = 0
        self.scatter_messages = 0

    @property
    def total_messages(self) -> int:
        return self.gather_messages + self.scatter_messages

    def kill(self, rank: int) -> None:
        self.dead.add(rank)

    def revive(self, rank: int) -> None:
        self.dead.discard(rank)

    def gather(self, payloads: dict[int, Any]) -> GatherResult:
        """Deliver every rank's payload to the coordinator via tree edges.

        A dead rank neither sends nor forwards, so its whole subtree goes
        missing; everything else arrives. One message per live child edge.
        """
        topo = self.topology
        bundles: dict[int, dict[int, Any]] = {r: {} for r in range(topo.world_size)}
        messages = 0
        for r in topo.depth_order():
            if r in self.dead:
                continue
            bundles[r][r] = payloads.get(r)
            if r != topo.coordinator:
                parent = topo.parent[r]
                messages += 1
                if parent not in self.dead:
                    bundles[parent].update(bundles[r])
        with self._lock:
            self.gather_messages += messages
        received = bundles[topo.coordinator] if topo.coordinator not in self.dead else {}
        missing = set(range(topo.world_size)) - set(received)
        return GatherResult(received, missing, messages)

    def scatter(self, values: dict[int, Any]) -> ScatterResult:
        """Mirror of gather: coordinator routes each rank its own slot."""
        topo = self.topology
        delivered: dict[int, Any] = {}
        messages = 0
        if topo.coordinator not in self.dead:
            if topo.coordinator in values:
                delivered[topo.coordinator] = values[topo.coordinator]
            order = list(reversed(topo.depth_order()))
            reachable = {topo.coordinator}
            for r in order:
                if r == topo.coordinator:
                    continue
                parent = topo.parent[r]
                if parent in reachable and parent not in self.dead:
                    messages += 1
                    if r not in self.dead:
                        reachable.add(r)
                        if r in values:
                            delivered[r] = values[r]
        with self._lock:
            self.scatter_messages += messages
        missing = set(values) - set(delivered)
        return ScatterResult(delivered, missing, messages)


# --- asynchronous integrity barrier ---


@dataclass(frozen=True)
class FailureRecord:
    rank: int
    stage: str
    reason: str


@dataclass(frozen=True)
class BarrierResolution:
    checkpoint_id: str
    state: str  # "complete" | "incomplete" | "timeout"
    failures: tuple[FailureRecord, ...]
    unreported: tuple[int, ...]


class BarrierTicket:
    """Collects per-rank completion reports for one checkpoint and resolves
    exactly once: complete, incomplete (with failure log), or timeout.

    Reporting never blocks on other ranks; whoever files the last report (or
    the deadline timer) performs the resolution, so the training loop is
    never stalled by integrity checking.
    """

    def __init__(
        self,
        checkpoint_id: str,
        world: Iterable[int],
        deadline_s: float = DEFAULT_BARRIER_DEADLINE_S,
        on_resolve: Optional[Callable[[BarrierResolution], None]] = None,
    ):
        self.checkpoint_id = checkpoint_id
        self.world = set(world)
        if not self.world:
            raise PreconditionError("barrier needs at least one rank")
        self.deadline_s = deadline_s
        self._on_resolve = on_resolve
        self._ok: dict[int, bool] = {}
        self.failures: list[FailureRecord] = []
        self._lock = threading.Lock()
        self._resolved = threading.Event()
        self._resolution: Optional[BarrierResolution] = None
        self._timer = threading.Timer(deadline_s, self._timeout)
        self._timer.daemon = True
        self._timer.start()

    def report_success(self, rank: int) -> None:
        self._report(rank, True, None)

    def report_failure(self, rank: int, stage: str, reason: str) -> None:
        self._report(rank, False, FailureRecord(rank, stage, reason))

    def _report(self, rank: int, ok: bool, failure: Optional[FailureRecord]) -> None:
        if rank not in self.world:
            raise PreconditionError(f"rank {rank} not in barrier world")
        resolution = None
        with self._lock:
            if self._resolution is not None or rank in self._ok:
                return  # late or duplicate report; resolution is final
            self._ok[rank] = ok
            if failure is not None:
                self.failures.append(failure)
            if len(self._ok) == len(self.world):
                state = "complete" if all(self._ok.values()) else "incomplete"
                resolution = self._finalize(state)
        if resolution is not None:
            self._notify(resolution)

    def _timeout(self) -> None:
        resolution = None
        with self._lock:
            if self._resolution is None:
                resolution = self._finalize("timeout")
        if resolution is not None:
            self._notify(resolution)

    def _finalize(self, state: str) -> BarrierResolution:
        unreported = tuple(sorted(self.world - set(self._ok)))
        self._resolution = BarrierResolution(self.checkpoint_id, state, tuple(self.failures), unreported)
        return self._resolution

    def _notify(self, resolution: BarrierResolution) -> None:
        self._timer.cancel()
        if self._on_resolve is not None:
            self._on_resolve(resolution)
        self._resolved.set()

    def wait(self, timeout: Optional[float] = None) -> BarrierResolution:
        if not self._resolved.wait(timeout):
            raise CommError(f"barrier {self.checkpoint_id} unresolved after {timeout}s wait")
        assert self._resolution is not None
        return self._resolution

    @property
    def resolved(self) -> bool:
        return self._resolved.is_set()


def async_barrier(
    checkpoint_id: str,
    world: Iterable[int],
    deadline_s: float = DEFAULT_BARRIER_DEADLINE_S,
    on_resolve: Optional[Callable[[BarrierResolution], None]] = None,
) -> BarrierTicket:
    """Open an integrity barrier; callers report and move on."""
    return BarrierTicket(checkpoint_id, world, deadline_s, on_resolve)
