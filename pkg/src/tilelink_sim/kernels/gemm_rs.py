"""GEMM + ring ReduceScatter with tile-level overlap.

Each rank computes its partial product tile by tile into a symmetric
buffer, notifying the channels its rows cover.  Reduce workers start on a
chunk as soon as all producer tiles touching it are done, so the ring runs
behind the GEMM instead of after it.  Producer tiles are issued in the
order the ring consumes chunks.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import ShapeMismatch
from ..mapping import StaticMapping
from ..runtime import COMPUTE, P2P, BlockChannel, Context, Expectation, Task, World
from .collectives import RingReduceScatter
from .common import (COMM_ONLY, COMP_ONLY, DTYPE, FULL, KernelRun, bind, blocks, check_phase,
                     check_world, safe_indices, split, tiled_matmul, world_for)
from .config import KernelConfig

PRODUCER_GROUP, RECV_GROUP = 0, 1


def gemm_rs_mapping(cfg: KernelConfig) -> StaticMapping:
    m = StaticMapping(cfg.M, cfg.world_size, cfg.channels, cfg.tm_comm)
    m.require_aligned()
    return m


def producer_expectation(world: World, block: BlockChannel, n_row_tiles: int, n_cols: int,
                         ranks: range) -> Expectation:
    """One arrival per (row tile, column block) on every channel the row tile covers."""
    exp = Expectation(world.layout)
    for r in ranks:
        for i in range(n_row_tiles):
            for ch in block.channels(i):
                exp.add_pc(r, ch, n_cols, group=block.group)
    return exp


def gemm_ring_rs(cfg: KernelConfig, a: Sequence[np.ndarray], b: Sequence[np.ndarray], *,
                 world: World | None = None, phase: str = FULL) -> KernelRun:
    """Rank ``r`` ends with rows ``rank_rows(r)`` of ``sum_q a[q] @ b[q]``."""
    check_phase(phase)
    m = gemm_rs_mapping(cfg)
    world = world or world_for(cfg)
    check_world(world, cfg)
    R = cfg.world_size
    if len(a) != R or len(b) != R:
        raise ShapeMismatch(f"expected {R} A and B matrices, got {len(a)} and {len(b)}")
    for r in range(R):
        if np.shape(a[r]) != (cfg.M, cfg.K) or np.shape(b[r]) != (cfg.K, cfg.N):
            raise ShapeMismatch(f"rank {r}: A {np.shape(a[r])} and B {np.shape(b[r])} do not "
                                f"match M={cfg.M} K={cfg.K} N={cfg.N}")

    partial = world.alloc((cfg.M, cfg.N), DTYPE)
    producer = BlockChannel.row_tiles(m, cfg.tm_comp, target=lambda t: 0, group=PRODUCER_GROUP)
    rs = RingReduceScatter(world, partial, m, producer, cfg.mode, cfg.binding,
                           recv_group=RECV_GROUP, workers=cfg.comm_workers,
                           worker_base=cfg.comp_workers)
    try:
        col_blocks = blocks(cfg.N, cfg.tn_comp)
        n_row_tiles = -(-cfg.M // cfg.tm_comp)
        notify = phase != COMP_ONLY
        math_on = phase != COMM_ONLY
        comp_out = [np.zeros((cfg.M, cfg.N), dtype=DTYPE) for _ in range(R)]

        def compute(ctx: Context, row_tiles: list[int]) -> None:
            r = ctx.rank
            ar, br = np.asarray(a[r], dtype=DTYPE), np.asarray(b[r], dtype=DTYPE)
            to_self = producer.to(r)
            for i in row_tiles:
                rows = producer.rows(i).rows
                for j, cols in enumerate(col_blocks):
                    tid = i * len(col_blocks) + j
                    with ctx.tile(tid):
                        if math_on:
                            tile = tiled_matmul(ar[rows], br[:, cols], cfg.tk_comp)
                        else:
                            tile = np.zeros((rows.stop - rows.start, cols.stop - cols.start), DTYPE)
                        if notify:
                            ctx.write(partial, rows, tile, cols=cols)
                        else:
                            comp_out[r][rows, cols] = tile
                    if notify:
                        ctx.producer_tile_notify(to_self, i, P2P)

        tasks: list[Task] = []
        for r in range(R):
            # chunks in the order the ring reduces them: r + 1, r + 2, ..., r
            pos = {(r + 1 + s) % R: s for s in range(R)}
            ordered = sorted(range(n_row_tiles), key=lambda i: (pos[producer.source(i)], i))
            for w, chunk in enumerate(split(ordered, cfg.comp_workers)):
                tasks.append(Task(r, COMPUTE, bind(compute, chunk), w))
        expected = Expectation(world.layout)
        if phase != COMP_ONLY:
            tasks.extend(rs.tasks())
            expected = producer_expectation(world, producer, n_row_tiles, len(col_blocks),
                                            range(R)).merge(rs.expectation())

        elapsed = world.run(tasks, expected)
        if phase == COMP_ONLY:
            outputs = [comp_out[r][slice(*m.rank_rows(r))] for r in range(R)]
        else:
            outputs = rs.outputs
    finally:
        rs.free()
        world.free(partial)

    layout = world.layout

    def notify_indices(t: int) -> set[int]:
        out = safe_indices(lambda i: {layout.pc(ch, PRODUCER_GROUP) for ch in producer.channels(i)})(t)
        return out | safe_indices(lambda i: {layout.pc(ch, RECV_GROUP)
                                             for ch in rs.recv_block.channels(i)})(t)

    return KernelRun(outputs, elapsed, world, notify_indices)
