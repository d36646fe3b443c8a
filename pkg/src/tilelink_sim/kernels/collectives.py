"""Communication halves shared by the overlapped kernels.

:class:`AllGather` fills a row-sharded symmetric tensor on every rank and
signals consumer channels per communication tile.  :class:`RingReduceScatter`
sums per-rank partials around a ring whose data flows from rank ``r`` to
``r - 1``.  Both produce a list of :class:`Task` plus the
:class:`Expectation` their waits rely on, for every (mode, binding) pair.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..mapping import StaticMapping, static_channel, static_shape_range
from ..runtime import (BROADCAST, COMPUTE, HOST, P2P, BlockChannel, Context, Expectation,
                       HostContext, SymmetricTensor, Task, World)
from ..transfer import COPY_ENGINE, CORE, HYBRID, PULL, PUSH, Region
from .common import bind, split
from .config import ALL2ALL, tile_schedule

Op = tuple[int, int, int]  # (tile, src rank, dst rank)


@dataclass
class AllGather:
    """Gather the row shards of ``tensors`` (sharded per ``mapping``) onto every rank.

    ``notify_channels`` maps a communication tile to the consumer channels
    it satisfies; by default the static channel of the tile.  Every rank
    receives one arrival per (tile, channel) pair, local tiles included.
    """

    world: World
    tensors: Sequence[SymmetricTensor]
    mapping: StaticMapping
    order: str
    mode: str
    binding: str
    group: int = 0
    workers: int = 1
    notify_channels: Callable[[int], tuple[int, ...]] | None = None
    worker_base: int = 0
    block: BlockChannel = field(init=False)

    def __post_init__(self):
        self.mapping.require_aligned()
        m = self.mapping
        chans = self.notify_channels or (lambda t: (static_channel(t, m),))
        self.block = BlockChannel(rows=lambda t: static_shape_range(t, m),
                                  source=BlockChannel.static(m).source,
                                  channels=chans, group=self.group)

    def expectation(self) -> Expectation:
        exp = Expectation(self.world.layout)
        for t in self.mapping.tiles():
            for ch in self.block.channels(t):
                for r in range(self.world.R):
                    exp.add_pc(r, ch, group=self.group)
        return exp

    def ops(self, r: int) -> list[Op]:
        """Transfers issued by rank ``r`` in tile order (local ones included)."""
        m, R = self.mapping, self.world.R
        if self.mode == PULL:
            return [(t, src, r) for src in tile_schedule(self.order, r, R)
                    for t in m.tiles_of_rank(src)]
        mine = m.tiles_of_rank(r)
        return [(t, r, dst) for dst in tile_schedule(self.order, r, R) for t in mine]

    def tasks(self) -> list[Task]:
        out: list[Task] = []
        for r in range(self.world.R):
            ops = self.ops(r)
            if self.binding == CORE:
                if self.mode == PUSH and self.order == ALL2ALL:
                    chunks = split(self.mapping.tiles_of_rank(r), self.workers)
                    body = self._core_broadcast
                else:
                    chunks = split(ops, self.workers)
                    body = self._core
                for w, chunk in enumerate(chunks):
                    out.append(Task(r, COMPUTE, bind(body, chunk), self.worker_base + w))
            else:
                out.append(Task(r, HOST, bind(self._host, ops)))
                if self.binding == HYBRID:
                    out.append(Task(r, COMPUTE, bind(self._hybrid_signal, ops), self.worker_base))
        return out

    # -- bodies ------------------------------------------------------------

    def _core(self, ctx: Context, ops: list[Op]) -> None:
        for t, src, dst in ops:
            rows = self.block.rows(t).rows
            if src != dst:
                for tensor in self.tensors:
                    if self.mode == PULL:
                        data = ctx.tile_pull_data(self.block, tensor, t)
                        ctx.write(tensor, rows, data)
                    else:
                        data = ctx.read(tensor, rows)
                        ctx.tile_push_data(self.block.to(dst), tensor, t, data)
            ctx.producer_tile_notify(self.block.to(dst), t, P2P)

    def _core_broadcast(self, ctx: Context, tiles: list[int]) -> None:
        for t in tiles:
            rows = self.block.rows(t).rows
            for tensor in self.tensors:
                ctx.tile_push_data(self.block, tensor, t, ctx.read(tensor, rows), BROADCAST)
            ctx.producer_tile_notify(self.block, t, BROADCAST)

    def _host(self, host: HostContext, ops: list[Op]) -> None:
        for t, src, dst in ops:
            rows = self.block.rows(t).rows
            if src != dst:
                for tensor in self.tensors:
                    host.rank_copy_data(Region(tensor, src, rows), Region(tensor, dst, rows), tile=t)
            if self.binding == COPY_ENGINE:
                host.rank_notify(t, dst, self.block)

    def _hybrid_signal(self, ctx: Context, ops: list[Op]) -> None:
        done = 0
        for t, src, dst in ops:
            if src != dst:
                done += len(self.tensors)
                ctx.wait_copy_completions(done)
            ctx.producer_tile_notify(self.block.to(dst), t, P2P)


@dataclass
class RingReduceScatter:
    """Ring reduce-scatter of ``partial`` rows, chunked per rank block of ``mapping``.

    At step ``s`` rank ``r`` handles chunk ``(r + 1 + s) % R``: it waits for
    its own producer tiles (``producer`` channels), adds the running sum
    received from ``r + 1`` and forwards it to ``r - 1``.  After ``R - 1``
    steps rank ``r`` holds the full sum of chunk ``r`` in ``outputs[r]``.

    Channel groups: ``recv_group`` carries "received tile ready" signals
    for the copy-engine bindings; per-tile hand-offs use peer channels.
    """

    world: World
    partial: SymmetricTensor
    mapping: StaticMapping
    producer: BlockChannel
    mode: str
    binding: str
    recv_group: int
    workers: int = 1
    worker_base: int = 0
    outputs: list[np.ndarray] = field(init=False)

    def __post_init__(self):
        self.mapping.require_aligned()
        shape = self.partial.shape
        self.recv = self.world.alloc(shape, self.partial.dtype)
        self.acc = self.world.alloc(shape, self.partial.dtype)
        self.block = BlockChannel.static(self.mapping)
        self.recv_block = BlockChannel.static(self.mapping, group=self.recv_group)
        self.outputs = []
        for r in range(self.world.R):
            lo, hi = self.mapping.rank_rows(r)
            self.outputs.append(np.zeros((hi - lo,) + shape[1:], dtype=self.partial.dtype))

    def free(self) -> None:
        self.world.free(self.recv)
        self.world.free(self.acc)

    def steps(self, r: int) -> list[tuple[int, int, int]]:
        """``(step, chunk, tile)`` in processing order for rank ``r``."""
        R = self.world.R
        return [(s, (r + 1 + s) % R, t) for s in range(R)
                for t in self.mapping.tiles_of_rank((r + 1 + s) % R)]

    def expectation(self) -> Expectation:
        exp = Expectation(self.world.layout)
        if self.binding == CORE:
            return exp
        R = self.world.R
        for r in range(R):
            for s, _, t in self.steps(r):
                if s > 0:
                    exp.add_pc(r, static_channel(t, self.mapping), group=self.recv_group)
        return exp

    def sends(self, r: int) -> list[tuple[int, int]]:
        """``(tile, dst)`` copies issued by the copy engine of rank ``r``."""
        R = self.world.R
        if self.mode == PUSH:
            return [(t, (r - 1) % R) for s, _, t in self.steps(r) if s < R - 1]
        # pull: r copies the running sums of r + 1 into its own recv buffer
        return [(t, r) for s, _, t in self.steps(r) if s > 0]

    def tasks(self) -> list[Task]:
        out: list[Task] = []
        R = self.world.R
        for r in range(R):
            per_pos: dict[int, list] = {}
            for s, c, t in self.steps(r):
                pos = t - self.mapping.tiles_of_rank(c)[0]
                per_pos.setdefault(pos % self.workers, []).append((s, c, t))
            for w in range(self.workers):
                out.append(Task(r, COMPUTE, bind(self._reduce, per_pos.get(w, [])),
                                self.worker_base + w))
            if self.binding != CORE and R > 1:
                out.append(Task(r, HOST, bind(self._host, self.sends(r))))
                if self.binding == HYBRID:
                    out.append(Task(r, COMPUTE, bind(self._hybrid_signal, self.sends(r)),
                                    self.worker_base + self.workers))
        return out

    # -- bodies ------------------------------------------------------------

    def _reduce(self, ctx: Context, work: list[tuple[int, int, int]]) -> None:
        R, r = self.world.R, ctx.rank
        prev, nxt = (r - 1) % R, (r + 1) % R
        base = self.mapping.rank_rows(r)[0]
        from_next = dataclasses.replace(self.block, source=lambda _t: nxt)
        for s, _, t in work:
            rows = self.block.rows(t)
            ctx.consumer_tile_wait(self.producer_view, t)
            if s > 0:
                if self.binding == CORE:
                    ctx.peer_tile_wait(t, nxt)
                else:
                    ctx.consumer_tile_wait(self.recv_block, t)
            with ctx.tile(t):
                val = ctx.read(self.partial, rows.rows)
                if s > 0:
                    if self.binding == CORE and self.mode == PULL:
                        incoming = ctx.tile_pull_data(from_next, self.acc, t)
                    else:
                        incoming = ctx.read(self.recv, rows.rows)
                    val = incoming + val
                if s == R - 1:
                    self.outputs[r][rows.lo - base:rows.hi - base] = val
                elif self.binding == CORE and self.mode == PUSH:
                    ctx.tile_push_data(self.block.to(prev), self.recv, t, val)
                else:
                    ctx.write(self.acc, rows.rows, val)
            if s == R - 1:
                continue
            # core push: r - 1 reads its recv buffer; copy-engine push: our own
            # engine forwards acc; pull: r - 1 fetches acc
            if self.binding == CORE and self.mode == PUSH:
                ctx.peer_tile_notify(t, prev)
            else:
                ctx.peer_tile_notify(t, r if self.mode == PUSH else prev)

    @property
    def producer_view(self) -> BlockChannel:
        """Producer channels indexed by communication tile."""
        m, prod = self.mapping, self.producer
        return BlockChannel(rows=self.block.rows, source=self.block.source,
                            channels=lambda t: m.channels_for_rows(*static_shape_range(t, m)),
                            group=prod.group)

    def _host(self, host: HostContext, sends: list[tuple[int, int]]) -> None:
        layout = self.world.layout
        R, r = self.world.R, host.rank
        for t, dst in sends:
            rows = self.block.rows(t).rows
            if self.mode == PUSH:
                host.stream_wait(layout.peer(t, r), 1)
                host.rank_copy_data(Region(self.acc, r, rows), Region(self.recv, dst, rows), tile=t)
            else:
                nxt = (r + 1) % R
                host.stream_wait(layout.peer(t, nxt), 1)
                host.rank_copy_data(Region(self.acc, nxt, rows), Region(self.recv, r, rows), tile=t)
            if self.binding == COPY_ENGINE:
                host.rank_notify(t, dst, self.recv_block)

    def _hybrid_signal(self, ctx: Context, sends: list[tuple[int, int]]) -> None:
        for i, (t, dst) in enumerate(sends):
            ctx.wait_copy_completions(i + 1)
            ctx.producer_tile_notify(self.recv_block.to(dst), t, P2P)
