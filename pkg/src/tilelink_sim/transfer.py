"""Data primitives: core-driven tile push/pull and the per-rank copy engine."""

from __future__ import annotations

import queue
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable

import numpy as np

from .errors import ConfigError, ShapeMismatch, WorldAborted
from .runtime import BROADCAST, NOTIFY_MODES, P2P

if TYPE_CHECKING:
    from .runtime import BlockChannel, Context, HostContext, SymmetricTensor, World

PUSH, PULL = "push", "pull"
TRANSFER_MODES = (PUSH, PULL)
CORE, COPY_ENGINE, HYBRID = "core", "copy_engine", "hybrid"
BINDINGS = (CORE, COPY_ENGINE, HYBRID)


@dataclass(frozen=True)
class Region:
    """Rows of a symmetric tensor on one rank; ``rows`` is a slice or index array."""

    tensor: SymmetricTensor
    rank: int
    rows: slice | np.ndarray

    def indices(self) -> np.ndarray:
        return np.arange(self.tensor.rows)[self.rows]

    @property
    def size(self) -> int:
        inner = int(np.prod(self.tensor.shape[1:], dtype=np.int64))
        return len(self.indices()) * inner


def _check_mode(mode: str) -> None:
    if mode not in NOTIFY_MODES:
        raise ConfigError(f"unknown mode {mode!r}, expected one of {NOTIFY_MODES}")


def _transfer(ctx: Context, t: int | None) -> None:
    """Trace one transfer on ``ctx``'s link, lasting the world's injected delay."""
    if ctx.world.comm_delay > 0:
        start, end = ctx.occupy_link()
        ctx.trace("copy_start", t, t_ns=int(start * 1e9))
        ctx.trace("copy_end", t, t_ns=int(end * 1e9))
    else:
        ctx.trace("copy_start", t)
        ctx.trace("copy_end", t)


def tile_push_data(ctx: Context, block: BlockChannel, tensor: SymmetricTensor, t: int, data,
                   mode: str = P2P) -> None:
    """Write ``data`` into rows ``f_S(t)`` of the target rank (p2p) or every rank."""
    _check_mode(mode)
    rng = block.rows(t)
    data = np.asarray(data)
    want = (len(rng),) + tensor.shape[1:]
    if data.shape != want:
        raise ShapeMismatch(f"tile {t} expects data of shape {want}, got {data.shape}")
    targets = [block.resolve_target(t)] if mode == P2P else range(ctx.world.R)
    for target in targets:
        ctx.write(tensor, rng.rows, data, rank=target)
        _transfer(ctx, t)


def tile_pull_data(ctx: Context, block: BlockChannel, tensor: SymmetricTensor, t: int,
                   mode: str = P2P) -> np.ndarray:
    """Read rows ``f_S(t)`` from rank ``f_R(t)`` (p2p) or from all ranks in rank order."""
    _check_mode(mode)
    rng = block.rows(t)
    sources = [block.source(t)] if mode == P2P else range(ctx.world.R)
    parts = []
    for src in sources:
        parts.append(ctx.read(tensor, rng.rows, rank=src))
        _transfer(ctx, t)
    return parts[0] if mode == P2P else np.concatenate(parts, axis=0)


def rank_copy_data(host: HostContext, src: Region, dst: Region, tile: int | None = None) -> None:
    """Enqueue ``src -> dst`` on the issuing rank's copy engine.

    Either side may be remote; the engine of the issuing host performs the
    copy.  Completion arrives on the issuer's copy-done counter.
    """
    if src.size != dst.size or src.tensor.shape[1:] != dst.tensor.shape[1:]:
        raise ShapeMismatch(f"copy of {src.size} elements into {dst.size}")
    if src.tensor is dst.tensor and src.rank == dst.rank:
        if np.intersect1d(src.indices(), dst.indices()).size:
            raise ConfigError("overlapping source and destination rows on the same buffer")
    host.engine.submit_copy(src, dst, tile)


class CopyEngine:
    """FIFO DMA queue of one rank, drained by that rank's copy unit.

    Besides copies the stream carries signal ops (run in order, after every
    earlier copy has landed) and stream waits on a local channel.
    """

    _CLOSE = object()

    def __init__(self, world: World, rank: int):
        self.world = world
        self.rank = rank
        self.reset()

    def reset(self) -> None:
        self._queue: queue.SimpleQueue = queue.SimpleQueue()
        self.issued = 0
        self.completed = 0

    def submit_copy(self, src: Region, dst: Region, tile: int | None = None) -> None:
        self.issued += 1
        self._queue.put(("copy", src, dst, tile))

    def submit_signal(self, op: Callable[[Context], None]) -> None:
        self._queue.put(("signal", op))

    def submit_wait(self, index: int, count: int) -> None:
        self._queue.put(("wait", index, count))

    def close(self) -> None:
        self._queue.put(self._CLOSE)

    def serve(self, ctx: Context) -> None:
        while True:
            try:
                item = self._queue.get(timeout=0.05)
            except queue.Empty:
                if self.world.aborted:
                    raise WorldAborted(f"{ctx.label} aborted") from None
                continue
            if item is self._CLOSE:
                return
            kind = item[0]
            if kind == "copy":
                _, src, dst, tile = item
                data = ctx.read(src.tensor, src.rows, rank=src.rank)
                ctx.write(dst.tensor, dst.rows, data.reshape((-1,) + dst.tensor.shape[1:]),
                          rank=dst.rank)
                _transfer(ctx, tile)
                self.completed += 1
                ctx._arrive(self.rank, self.world.layout.copy_done, tile)
            elif kind == "signal":
                item[1](ctx)
            else:
                _, index, count = item
                ctx._await(index, count, None)
