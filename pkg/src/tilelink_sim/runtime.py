"""Simulated multi-rank machine.

A :class:`World` owns ``R`` ranks.  Every rank has a :class:`SignalBoard`
(barrier channels), a slot in each :class:`SymmetricTensor` and a
:class:`~tilelink_sim.transfer.CopyEngine`.  Kernels run as a set of
:class:`Task` callables, one thread per (rank, unit, worker), and talk to
each other only through the signal and data primitives on
:class:`Context`.

Board layout, per rank::

    [ producer/consumer: groups * R * C | peer: peer_tiles * R | host: R | copy-done: 1 ]

Notifies carry release semantics and waits acquire semantics: both go
through the board lock, and the optional :class:`RaceChecker`
publishes a context's pending writes at each notify.
"""

from __future__ import annotations

import bisect
import itertools
import logging
import os
import threading
import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .errors import (ConfigError, DeadlockError, DomainError, RaceViolation, SignalError,
                     TileLinkError, WorldAborted)
from .mapping import (DynamicMapping, ShapeRange, StaticMapping, dynamic_lookup,
                      static_channel, static_shape_range, static_src_rank)

log = logging.getLogger(__name__)

HOST, COMPUTE, COPY = "host", "compute", "copy"
UNITS = (HOST, COMPUTE, COPY)
P2P, BROADCAST = "p2p", "broadcast"
NOTIFY_MODES = (P2P, BROADCAST)

TIMEOUT_ENV = "TILELINK_SIM_TIMEOUT_MS"
DEFAULT_TIMEOUT_S = 10.0
DEFAULT_GROUPS = 4
DEFAULT_PEER_TILES = 1 << 16


def default_timeout() -> float:
    raw = os.environ.get(TIMEOUT_ENV)
    if raw is None or raw == "":
        return DEFAULT_TIMEOUT_S
    try:
        ms = float(raw)
    except ValueError:
        raise ConfigError(f"{TIMEOUT_ENV}={raw!r} is not a number") from None
    if ms <= 0:
        raise ConfigError(f"{TIMEOUT_ENV} must be positive, got {raw}")
    return ms / 1000.0


@dataclass(frozen=True)
class ChannelLayout:
    """Index arithmetic for one signal board."""

    R: int
    C: int
    groups: int = DEFAULT_GROUPS
    peer_tiles: int = DEFAULT_PEER_TILES

    @property
    def num_channels(self) -> int:
        return self.R * self.C

    @property
    def peer_base(self) -> int:
        return self.num_channels * self.groups

    @property
    def host_base(self) -> int:
        return self.peer_base + self.peer_tiles * self.R

    @property
    def copy_done(self) -> int:
        return self.host_base + self.R

    @property
    def size(self) -> int:
        return self.copy_done + 1

    def pc(self, channel: int, group: int = 0) -> int:
        if not 0 <= channel < self.num_channels:
            raise DomainError(f"channel {channel} outside [0, {self.num_channels})")
        if not 0 <= group < self.groups:
            raise DomainError(f"channel group {group} outside [0, {self.groups})")
        return group * self.num_channels + channel

    def peer(self, tile: int, rank: int) -> int:
        if not 0 <= tile < self.peer_tiles:
            raise DomainError(f"peer tile {tile} outside [0, {self.peer_tiles})")
        self._check_rank(rank)
        return self.peer_base + tile * self.R + rank

    def host(self, src_rank: int) -> int:
        self._check_rank(src_rank)
        return self.host_base + src_rank

    def region(self, index: int) -> str:
        if index < self.peer_base:
            return "pc"
        if index < self.host_base:
            return "peer"
        if index < self.copy_done:
            return "host"
        return "copy"

    def _check_rank(self, rank: int) -> None:
        if not 0 <= rank < self.R:
            raise DomainError(f"rank {rank} outside [0, {self.R})")


class SignalBoard:
    """Arrival counters of one rank, tagged with the epoch that last wrote them.

    An arrival may carry a landing time in the future (a signal ordered
    behind an in-flight transfer); it counts from that moment on.  Each
    waiter parks on its own condition (sharing the board lock) and is woken
    only once its counter can reach the level it needs, so an arrival costs
    at most one thread wakeup.
    """

    def __init__(self, rank: int, layout: ChannelLayout):
        self.rank = rank
        self.layout = layout
        self.lock = threading.Lock()
        self.epoch = 0
        self._count: dict[int, int] = {}
        self._tag: dict[int, int] = {}
        self._expected: dict[int, int] = {}
        self._landing: dict[int, list[float]] = {}
        self._waiters: dict[int, list[tuple[int, threading.Condition]]] = {}

    def start_epoch(self, epoch: int, expected: dict[int, int]) -> None:
        with self.lock:
            self.epoch = epoch
            self._expected = dict(expected)
            self._landing.clear()
            self._wake_all()

    def _total(self, index: int) -> int:
        return self._count.get(index, 0) if self._tag.get(index) == self.epoch else 0

    def counter(self, index: int) -> int:
        """Landed arrivals in the current epoch (hold ``lock`` for a stable read)."""
        total = self._total(index)
        landing = self._landing.get(index)
        if landing:
            now = time.monotonic()
            while landing and landing[0] <= now:
                landing.pop(0)
            return total - len(landing)
        return total

    def expected(self, index: int) -> int | None:
        return self._expected.get(index)

    def arrive(self, index: int, epoch: int, n: int = 1, at: float | None = None) -> bool:
        """Add ``n`` arrivals landing at monotonic time ``at`` (default now).

        Returns False when ``epoch`` is stale.
        """
        with self.lock:
            if epoch != self.epoch:
                return False
            count = self._total(index) + n
            limit = self._expected.get(index)
            if limit is not None and count > limit:
                raise SignalError(
                    f"rank {self.rank} channel {index} ({self.layout.region(index)}) "
                    f"reached {count} arrivals, expected {limit}")
            self._count[index] = count
            self._tag[index] = epoch
            if at is not None and at > time.monotonic():
                for _ in range(n):
                    bisect.insort(self._landing.setdefault(index, []), at)
            for need, cv in self._waiters.get(index, ()):
                if count >= need:
                    cv.notify()
            return True

    def _lands_at(self, index: int, need: int) -> float | None:
        """When the counter reaches ``need`` given the arrivals so far, else None."""
        total = self._total(index)
        if total < need:
            return None
        landing = self._landing.get(index, [])
        short = need - (total - len(landing))
        return landing[short - 1] if short > 0 else 0.0

    def await_count(self, index: int, need: int, deadline: float,
                    aborted: threading.Event) -> tuple[bool, int]:
        """Block until ``index`` holds ``need`` arrivals or ``deadline`` passes.

        Returns ``(reached, count)``; raises :class:`WorldAborted` if
        ``aborted`` gets set meanwhile.
        """
        with self.lock:
            count = self.counter(index)
            if count >= need:
                return True, count
            entry = (need, threading.Condition(self.lock))
            parked = self._waiters.setdefault(index, [])
            parked.append(entry)
            try:
                while True:
                    if aborted.is_set():
                        raise WorldAborted(f"aborted while waiting on channel {index}")
                    count = self.counter(index)
                    if count >= need:
                        return True, count
                    now = time.monotonic()
                    remaining = deadline - now
                    if remaining <= 0:
                        return False, count
                    lands = self._lands_at(index, need)
                    if lands is not None:
                        remaining = min(remaining, max(lands - now, 0.0))
                    entry[1].wait(min(remaining, 0.05))
            finally:
                parked.remove(entry)

    def wake_all(self) -> None:
        with self.lock:
            self._wake_all()

    def _wake_all(self) -> None:
        for parked in self._waiters.values():
            for _, cv in parked:
                cv.notify()

    def snapshot(self) -> dict[int, int]:
        with self.lock:
            return {i: self.counter(i) for i in self._count if self._tag.get(i) == self.epoch}


class SymmetricTensor:
    """Identically shaped buffer on every rank of a world."""

    def __init__(self, world: World, tensor_id: int, shape: tuple[int, ...], dtype):
        self.world = world
        self.id = tensor_id
        self.shape = shape
        self.dtype = np.dtype(dtype)
        self.buffers = [np.zeros(shape, dtype=self.dtype) for _ in range(world.R)]

    def __repr__(self) -> str:
        return f"SymmetricTensor(id={self.id}, shape={self.shape}, dtype={self.dtype})"

    @property
    def rows(self) -> int:
        return self.shape[0]

    def local(self, rank: int) -> np.ndarray:
        """Raw buffer of ``rank``; bypasses signalling and race checking."""
        return self.buffers[rank]

    def load(self, rank: int, data, rows=slice(None)) -> None:
        """Host-side initialisation before a kernel; the rows count as published."""
        self.buffers[rank][rows] = data
        if self.world.checker is not None:
            self.world.checker.on_load(self, rank, rows)

    def invalidate(self) -> None:
        """Mark every row unwritten again (for buffers reused across epochs)."""
        if self.world.checker is not None:
            self.world.checker.on_alloc(self)


class RaceChecker:
    """Per-row state machine: unwritten -> written -> published -> consumed.

    A write is pending for its writer until the writer's next notify (its
    release); only then do other contexts see the rows as published.
    Reading rows that are neither published nor the reader's own pending
    writes is a violation.
    """

    UNWRITTEN, WRITTEN, PUBLISHED, CONSUMED = 0, 1, 2, 3

    def __init__(self):
        self._lock = threading.Lock()
        self._state: dict[tuple[int, int], np.ndarray] = {}
        self._writer: dict[tuple[int, int], np.ndarray] = {}
        self._pending: dict[int, list[tuple[tuple[int, int], Any]]] = defaultdict(list)
        self.violations: list[str] = []

    def on_alloc(self, tensor: SymmetricTensor) -> None:
        with self._lock:
            for rank in range(tensor.world.R):
                self._state[(tensor.id, rank)] = np.zeros(tensor.rows, dtype=np.int8)
                self._writer[(tensor.id, rank)] = np.full(tensor.rows, -1, dtype=np.int64)

    def on_free(self, tensor: SymmetricTensor) -> None:
        with self._lock:
            for rank in range(tensor.world.R):
                self._state.pop((tensor.id, rank), None)
                self._writer.pop((tensor.id, rank), None)

    def on_load(self, tensor: SymmetricTensor, rank: int, rows) -> None:
        with self._lock:
            self._state[(tensor.id, rank)][rows] = self.PUBLISHED
            self._writer[(tensor.id, rank)][rows] = -1

    def on_write(self, ctx_id: int, tensor: SymmetricTensor, rank: int, rows) -> None:
        key = (tensor.id, rank)
        with self._lock:
            self._state[key][rows] = self.WRITTEN
            self._writer[key][rows] = ctx_id
            self._pending[ctx_id].append((key, rows))

    def on_release(self, ctx_id: int) -> None:
        with self._lock:
            for key, rows in self._pending.pop(ctx_id, ()):
                state, writer = self._state.get(key), self._writer.get(key)
                if state is None:
                    continue
                mine = writer[rows] == ctx_id
                idx = np.arange(len(state))[rows][mine]
                state[idx] = np.maximum(state[idx], self.PUBLISHED)

    def on_read(self, ctx_id: int, label: str, tensor: SymmetricTensor, rank: int, rows) -> None:
        key = (tensor.id, rank)
        with self._lock:
            state, writer = self._state[key], self._writer[key]
            sel_state, sel_writer = state[rows], writer[rows]
            bad = (sel_state < self.PUBLISHED) & (sel_writer != ctx_id)
            if np.any(bad):
                first = int(np.arange(len(state))[rows][bad][0])
                self.violations.append(
                    f"{label} read tensor {tensor.id} on rank {rank} row {first} "
                    f"in state {int(state[first])} before it was published")
                return
            idx = np.arange(len(state))[rows]
            published = state[idx] == self.PUBLISHED
            state[idx[published]] = self.CONSUMED


@dataclass(frozen=True)
class BlockChannel:
    """Mapping context handed to the primitives.

    ``rows`` is the shape mapping, ``source`` the rank mapping (whose buffer
    a pull reads), ``channels`` the channel mapping and ``target`` the
    consumer-side rank used by p2p pushes and notifies.  Channels are
    global indices in ``[0, R*C)`` inside channel group ``group``.
    """

    rows: Callable[[int], ShapeRange]
    source: Callable[[int], int]
    channels: Callable[[int], tuple[int, ...]]
    target: Callable[[int], int] | None = None
    group: int = 0

    @classmethod
    def static(cls, m: StaticMapping, *, target: int | Callable[[int], int] | None = None,
               group: int = 0) -> BlockChannel:
        return cls(rows=lambda t: static_shape_range(t, m),
                   source=lambda t: static_src_rank(t, m),
                   channels=lambda t: (static_channel(t, m),),
                   target=_as_target(target), group=group)

    @classmethod
    def row_tiles(cls, m: StaticMapping, tile_rows: int, *,
                  target: int | Callable[[int], int] | None = None,
                  group: int = 0) -> BlockChannel:
        """Tiles of ``tile_rows`` rows over the channel blocks of ``m``.

        A tile covers every channel its rows intersect, so tiles of a
        different size than ``m.Tm`` still synchronise correctly.
        """
        if tile_rows < 1:
            raise ConfigError(f"tile rows must be >= 1, got {tile_rows}")

        def rows(t: int) -> ShapeRange:
            if t < 0 or t * tile_rows >= m.M:
                raise DomainError(f"tile {t} outside grid of {-(-m.M // tile_rows)} tiles")
            return ShapeRange(t * tile_rows, min((t + 1) * tile_rows, m.M))

        return cls(rows=rows,
                   source=lambda t: min(rows(t).lo // m.m_per_rank, m.R - 1),
                   channels=lambda t: m.channels_for_rows(*rows(t)),
                   target=_as_target(target), group=group)

    @classmethod
    def dynamic(cls, d: DynamicMapping, *, target: int | Callable[[int], int] | None = None,
                group: int = 0) -> BlockChannel:
        return cls(rows=lambda t: dynamic_lookup(t, d)[0],
                   source=lambda t: dynamic_lookup(t, d)[1],
                   channels=lambda t: (dynamic_lookup(t, d)[2],),
                   target=_as_target(target), group=group)

    def to(self, target: int | Callable[[int], int]) -> BlockChannel:
        return replace(self, target=_as_target(target))

    def resolve_target(self, t: int) -> int:
        if self.target is None:
            raise ConfigError("p2p primitive on a block channel without a target mapping")
        return self.target(t)


def _as_target(target) -> Callable[[int], int] | None:
    if target is None or callable(target):
        return target
    fixed = int(target)
    return lambda t: fixed


@dataclass
class Expectation:
    """Expected arrival counts registered at kernel launch, per rank."""

    layout: ChannelLayout
    counts: dict[int, dict[int, int]] = field(default_factory=lambda: defaultdict(dict))

    def add_index(self, rank: int, index: int, n: int = 1) -> None:
        self.counts[rank][index] = self.counts[rank].get(index, 0) + n

    def add_pc(self, rank: int, channel: int, n: int = 1, group: int = 0) -> None:
        self.add_index(rank, self.layout.pc(channel, group), n)

    def add_peer(self, rank: int, tile: int, from_rank: int, n: int = 1) -> None:
        self.add_index(rank, self.layout.peer(tile, from_rank), n)

    def add_host(self, rank: int, from_rank: int, n: int = 1) -> None:
        self.add_index(rank, self.layout.host(from_rank), n)

    def merge(self, other: Expectation) -> Expectation:
        for rank, entries in other.counts.items():
            for index, n in entries.items():
                self.add_index(rank, index, n)
        return self


@dataclass(frozen=True)
class Task:
    rank: int
    unit: str
    fn: Callable[[Context], Any]
    worker: int = 0


_ctx_ids = itertools.count()


class Context:
    """One execution unit (host thread, compute/comm worker or copy engine)."""

    def __init__(self, world: World, rank: int, unit: str, worker: int = 0):
        if unit not in UNITS:
            raise ConfigError(f"unknown unit {unit!r}")
        world.layout._check_rank(rank)
        self.world = world
        self.rank = rank
        self.unit = unit
        self.worker = worker
        self.epoch = world.epoch
        self.id = next(_ctx_ids)
        self.label = f"rank {rank} {unit}[{worker}]"
        self.link_free = 0.0
        self._rng = np.random.default_rng((world.seed, self.epoch, rank, UNITS.index(unit), worker))

    # -- bookkeeping -------------------------------------------------------

    def trace(self, kind: str, tile: int | None = None, channel: int | None = None,
              t_ns: int | None = None) -> None:
        tracer = self.world.tracer
        if tracer is not None:
            tracer.record(self.rank, self.unit, kind, tile, channel, t_ns)

    def occupy_link(self) -> tuple[float, float]:
        """Reserve this unit's link for one transfer; returns its (start, landing) times.

        Transfers of one unit are serialised; the unit itself moves on at
        once, and its later signals are held back until the transfer lands.
        """
        start = max(time.monotonic(), self.link_free)
        self.link_free = start + self.world.comm_delay
        return start, self.link_free

    @contextmanager
    def tile(self, tile: int):
        """Trace one compute tile, then give up the CPU.

        Units that run in parallel on hardware share the host's cores here;
        yielding at tile boundaries lets them interleave at tile granularity
        instead of whole scheduler slices.
        """
        self.trace("tile_start", tile)
        yield
        self.trace("tile_end", tile)
        os.sched_yield()

    def maybe_yield(self) -> None:
        """Randomised scheduling noise when the world has jitter enabled."""
        n = self.world.jitter
        if n:
            for _ in range(int(self._rng.integers(0, n + 1))):
                time.sleep(0)

    def read(self, tensor: SymmetricTensor, rows=slice(None), rank: int | None = None,
             cols=slice(None)) -> np.ndarray:
        """Copy rows (optionally a column block) out of ``tensor`` on ``rank``."""
        rank = self.rank if rank is None else rank
        checker = self.world.checker
        if checker is not None:
            checker.on_read(self.id, self.label, tensor, rank, rows)
        out = tensor.buffers[rank][rows]
        if cols != slice(None):
            out = out[:, cols]
        return out.copy()

    def write(self, tensor: SymmetricTensor, rows, data, rank: int | None = None,
              cols=slice(None)) -> None:
        rank = self.rank if rank is None else rank
        buf = tensor.buffers[rank]
        checker = self.world.checker
        if checker is not None:
            checker.on_write(self.id, tensor, rank, rows)
        data = np.asarray(data)
        if self.world.jitter and isinstance(rows, slice):
            # row by row so a missing barrier shows up as a torn tile
            lo, hi, _ = rows.indices(buf.shape[0])
            for i, r in enumerate(range(lo, hi)):
                buf[r, cols] = data[i]
                self.maybe_yield()
        elif cols == slice(None):
            buf[rows] = data
        else:
            buf[rows, cols] = data

    # -- signal primitives -------------------------------------------------

    def _arrive(self, target: int, index: int, tile: int | None) -> None:
        world = self.world
        if world.should_drop_notify():
            log.debug("%s dropped notify tile=%s index=%s", self.label, tile, index)
            self.trace("notify", tile, index)
            return
        if world.checker is not None:
            world.checker.on_release(self.id)
        at = self.link_free if self.link_free > time.monotonic() else None
        world.boards[target].arrive(index, self.epoch, at=at)
        self.trace("notify", tile, index, t_ns=None if at is None else int(at * 1e9))

    def _await(self, index: int, need: int, tile: int | None) -> None:
        self.trace("wait_start", tile, index)
        self.world.wait_for(self, index, need)
        self.trace("wait_end", tile, index)

    def producer_tile_notify(self, block: BlockChannel, t: int, mode: str = P2P) -> None:
        if mode not in NOTIFY_MODES:
            raise ConfigError(f"unknown notify mode {mode!r}")
        channels = block.channels(t)
        targets = [block.resolve_target(t)] if mode == P2P else range(self.world.R)
        for target in targets:
            for ch in channels:
                self._arrive(target, self.world.layout.pc(ch, block.group), t)

    def consumer_tile_wait(self, block: BlockChannel, t: int) -> None:
        board = self.world.boards[self.rank]
        for ch in block.channels(t):
            index = self.world.layout.pc(ch, block.group)
            self._await(index, board.expected(index) or 0, t)

    def peer_tile_notify(self, t: int, rank: int) -> None:
        layout = self.world.layout
        layout._check_rank(rank)
        self._arrive(rank, layout.peer(t, self.rank), t)

    def peer_tile_wait(self, t: int, rank: int) -> None:
        layout = self.world.layout
        layout._check_rank(rank)
        index = layout.peer(t, rank)
        expected = self.world.boards[self.rank].expected(index)
        self._await(index, 1 if expected is None else expected, t)

    def wait_copy_completions(self, n: int) -> None:
        """Block until this rank's copy engine has completed ``n`` copies."""
        self._await(self.world.layout.copy_done, n, None)

    # -- data primitives (implemented in transfer) ---------------------------

    def tile_push_data(self, block: BlockChannel, tensor: SymmetricTensor, t: int, data,
                       mode: str = P2P) -> None:
        from .transfer import tile_push_data
        tile_push_data(self, block, tensor, t, data, mode)

    def tile_pull_data(self, block: BlockChannel, tensor: SymmetricTensor, t: int,
                       mode: str = P2P) -> np.ndarray:
        from .transfer import tile_pull_data
        return tile_pull_data(self, block, tensor, t, mode)


class HostContext(Context):
    """Per-rank control thread; drives the rank's copy engine."""

    def __init__(self, world: World, rank: int, worker: int = 0):
        super().__init__(world, rank, HOST, worker)
        self.engine = world.engines[rank]

    def rank_copy_data(self, src, dst, tile: int | None = None) -> None:
        from .transfer import rank_copy_data
        rank_copy_data(self, src, dst, tile)

    def rank_notify(self, t: int, rank: int, block: BlockChannel | None = None) -> None:
        """Tell ``rank`` that data at tile ``t`` is ready, in copy-stream order.

        With ``block`` the notify arrives on the tile's producer/consumer
        channels on ``rank`` instead of the host channel, so device-side
        consumers can wait on it.
        """
        self.world.layout._check_rank(rank)
        src = self.rank

        def op(engine_ctx: Context) -> None:
            layout = engine_ctx.world.layout
            if block is None:
                engine_ctx._arrive(rank, layout.host(src), t)
                return
            for ch in block.channels(t):
                engine_ctx._arrive(rank, layout.pc(ch, block.group), t)

        self.engine.submit_signal(op)

    def rank_wait(self, rank: int, count: int | None = None) -> None:
        layout = self.world.layout
        layout._check_rank(rank)
        index = layout.host(rank)
        if count is None:
            count = self.world.boards[self.rank].expected(index) or 1
        self._await(index, count, None)

    def stream_wait(self, index: int, count: int) -> None:
        """Make the copy stream wait for ``count`` arrivals on a local channel."""
        self.engine.submit_wait(index, count)

    def synchronize(self) -> None:
        """Block the host until every copy it issued has completed."""
        self.wait_copy_completions(self.engine.issued)


class World:
    """``R`` simulated ranks with ``C`` barrier channels each."""

    def __init__(self, R: int, C: int, *, timeout: float | None = None, race_check: bool = False,
                 tracer=None, comm_delay: float = 0.0, jitter: int = 0, seed: int = 0,
                 groups: int = DEFAULT_GROUPS, peer_tiles: int = DEFAULT_PEER_TILES):
        if R < 1 or C < 1:
            raise ConfigError(f"world needs R >= 1 and C >= 1, got R={R} C={C}")
        from .transfer import CopyEngine

        self.R = R
        self.C = C
        self.layout = ChannelLayout(R, C, groups, peer_tiles)
        self.timeout = default_timeout() if timeout is None else float(timeout)
        if self.timeout <= 0:
            raise ConfigError(f"timeout must be positive, got {timeout}")
        self.checker = RaceChecker() if race_check else None
        self.tracer = tracer
        self.comm_delay = float(comm_delay)
        self.jitter = int(jitter)
        self.seed = int(seed)
        self.epoch = 0
        self.boards = [SignalBoard(r, self.layout) for r in range(R)]
        self.engines = [CopyEngine(self, r) for r in range(R)]
        self.heap: dict[int, SymmetricTensor] = {}
        self._next_tensor = 0
        self._blocked: dict[int, tuple] = {}
        self._abort = threading.Event()
        self._fault_lock = threading.Lock()
        self._drop_notifies = 0
        self._running = threading.Lock()

    def __repr__(self) -> str:
        return f"World(R={self.R}, C={self.C}, epoch={self.epoch})"

    @property
    def num_channels(self) -> int:
        return self.R * self.C

    # -- heap --------------------------------------------------------------

    def alloc(self, shape, dtype=np.float32) -> SymmetricTensor:
        shape = tuple(int(s) for s in (shape if isinstance(shape, Iterable) else (shape,)))
        if not shape:
            raise ConfigError("symmetric tensors need at least one dimension")
        if any(s <= 0 for s in shape):
            raise ConfigError(f"zero-sized dimension in shape {shape}")
        dtype = np.dtype(dtype)
        if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise ConfigError(f"symmetric tensors hold 32- or 64-bit reals, got {dtype}")
        tensor = SymmetricTensor(self, self._next_tensor, shape, dtype)
        self._next_tensor += 1
        self.heap[tensor.id] = tensor
        if self.checker is not None:
            self.checker.on_alloc(tensor)
        return tensor

    def free(self, tensor: SymmetricTensor) -> None:
        self.heap.pop(tensor.id, None)
        if self.checker is not None:
            self.checker.on_free(tensor)

    # -- faults ------------------------------------------------------------

    def drop_next_notifies(self, n: int = 1) -> None:
        """Test hook: silently discard the next ``n`` notifies."""
        with self._fault_lock:
            self._drop_notifies += n

    def should_drop_notify(self) -> bool:
        if not self._drop_notifies:
            return False
        with self._fault_lock:
            if self._drop_notifies:
                self._drop_notifies -= 1
                return True
        return False

    # -- waiting -----------------------------------------------------------

    def wait_for(self, ctx: Context, index: int, need: int) -> None:
        board = self.boards[ctx.rank]
        deadline = time.monotonic() + self.timeout
        entry = (ctx.rank, ctx.unit, self.layout.region(index), index, need)
        self._blocked[ctx.id] = entry
        try:
            reached, count = board.await_count(index, need, deadline, self._abort)
        except WorldAborted:
            raise WorldAborted(f"{ctx.label} aborted while waiting on channel {index}") from None
        finally:
            self._blocked.pop(ctx.id, None)
        if reached:
            return
        # report outside the board lock: it takes every other board's lock
        blocked = self._blocked_report(extra=[entry])
        lines = [f"  rank {r} {u}: {reg} channel {i} counter {c} expected {n}"
                 for r, u, reg, i, c, n in blocked]
        err = DeadlockError(
            f"deadlock: {ctx.label} timed out after {self.timeout:g}s on "
            f"{self.layout.region(index)} channel {index} (counter {count}, expected {need}); "
            f"blocked units:\n" + "\n".join(lines),
            rank=ctx.rank, unit=ctx.unit, channel=index, counter=count, expected=need,
            blocked=blocked)
        self.abort()
        raise err

    def _blocked_report(self, extra=()) -> list[tuple]:
        out = []
        for rank, unit, region, index, need in [*self._blocked.values(), *extra]:
            board = self.boards[rank]
            with board.lock:
                count = board.counter(index)
            out.append((rank, unit, region, index, count, need))
        return sorted(out)

    def abort(self) -> None:
        self._abort.set()
        for board in self.boards:
            board.wake_all()

    @property
    def aborted(self) -> bool:
        return self._abort.is_set()

    # -- execution ---------------------------------------------------------

    def context(self, rank: int, unit: str = COMPUTE, worker: int = 0) -> Context:
        if unit == HOST:
            return HostContext(self, rank, worker)
        return Context(self, rank, unit, worker)

    def launch(self, expected: Expectation | None = None) -> int:
        """Open a new epoch and register its expected arrival counts."""
        self.epoch += 1
        counts = expected.counts if expected is not None else {}
        for board in self.boards:
            board.start_epoch(self.epoch, counts.get(board.rank, {}))
        for engine in self.engines:
            engine.reset()
        self._abort.clear()
        return self.epoch

    def run(self, tasks: Sequence[Task], expected: Expectation | None = None) -> float:
        """Launch a new epoch and run ``tasks`` concurrently; returns wall seconds.

        Re-raises the root-cause error of the run (a deadlock in preference
        to the aborts it triggered) and raises :class:`RaceViolation` when
        the race checker recorded anything.
        """
        if not self._running.acquire(blocking=False):
            raise TileLinkError("kernels are not reentrant on one world")
        try:
            self.launch(expected)
            seen = len(self.checker.violations) if self.checker is not None else 0
            errors: list[BaseException] = []
            contexts = [self.context(task.rank, task.unit, task.worker) for task in tasks]
            host_ranks = sorted({task.rank for task in tasks if task.unit == HOST})
            threads = []

            def body(task: Task, ctx: Context) -> None:
                try:
                    task.fn(ctx)
                except BaseException as exc:  # noqa: BLE001 - reported by run()
                    errors.append(exc)
                    self.abort()
                finally:
                    if task.unit == HOST:
                        ctx.engine.close()

            for task, ctx in zip(tasks, contexts):
                threads.append(threading.Thread(target=body, args=(task, ctx),
                                                name=ctx.label, daemon=True))
            for rank in host_ranks:
                engine_ctx = Context(self, rank, COPY)
                contexts.append(engine_ctx)
                engine_task = Task(rank, COPY, self.engines[rank].serve)
                threads.append(threading.Thread(target=body, args=(engine_task, engine_ctx),
                                                name=engine_ctx.label, daemon=True))

            start = time.perf_counter()
            for th in threads:
                th.start()
            for th in threads:
                th.join()
            # the kernel is done once its last transfer has landed
            lag = max((ctx.link_free for ctx in contexts), default=0.0) - time.monotonic()
            if lag > 0 and not errors:
                time.sleep(lag)
            elapsed = time.perf_counter() - start

            if errors:
                root = next((e for e in errors if isinstance(e, DeadlockError)), None)
                root = root or next((e for e in errors if not isinstance(e, WorldAborted)), errors[0])
                raise root
            if self.checker is not None and len(self.checker.violations) > seen:
                raise RaceViolation("; ".join(self.checker.violations[seen:]))
            return elapsed
        finally:
            self._running.release()


def init_world(R: int, C: int, **kwargs) -> World:
    return World(R, C, **kwargs)


def alloc_symmetric(world: World, shape, dtype=np.float32) -> SymmetricTensor:
    return world.alloc(shape, dtype)
