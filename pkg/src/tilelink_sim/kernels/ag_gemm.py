"""AllGather + GEMM with tile-level overlap.

The row-sharded ``A`` is gathered into a symmetric buffer by
:class:`AllGather` (communication tiles of ``tm_comm`` rows) while compute
workers multiply row tiles of ``tm_comp`` rows as soon as every channel
covering those rows has been signalled.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import ShapeMismatch
from ..mapping import StaticMapping
from ..runtime import COMPUTE, BlockChannel, Context, Expectation, Task, World
from .collectives import AllGather
from .common import (COMM_ONLY, COMP_ONLY, DTYPE, FULL, KernelRun, bind, blocks, check_phase,
                     check_world, safe_indices, schedule_rank, split, tiled_matmul, world_for)
from .config import KernelConfig


def ag_gemm_mapping(cfg: KernelConfig) -> StaticMapping:
    m = StaticMapping(cfg.M, cfg.world_size, cfg.channels, cfg.tm_comm)
    m.require_aligned()
    return m


def ag_gemm(cfg: KernelConfig, a_shards: Sequence[np.ndarray], b: Sequence[np.ndarray], *,
            world: World | None = None, phase: str = FULL) -> KernelRun:
    """Every rank computes ``concat(a_shards) @ b[rank]``.

    ``phase`` selects the measurement variant: ``comm`` keeps the gather and
    all waits but skips the math, ``comp`` starts from pre-gathered inputs
    and never waits.
    """
    check_phase(phase)
    m = ag_gemm_mapping(cfg)
    world = world or world_for(cfg)
    check_world(world, cfg)
    R = cfg.world_size
    if len(a_shards) != R or len(b) != R:
        raise ShapeMismatch(f"expected {R} A shards and B matrices, got {len(a_shards)} and {len(b)}")
    for r in range(R):
        lo, hi = m.rank_rows(r)
        if np.shape(a_shards[r]) != (hi - lo, cfg.K):
            raise ShapeMismatch(f"A shard of rank {r} has shape {np.shape(a_shards[r])}, "
                                f"expected {(hi - lo, cfg.K)}")
        if np.shape(b[r]) != (cfg.K, cfg.N):
            raise ShapeMismatch(f"B of rank {r} has shape {np.shape(b[r])}, expected {(cfg.K, cfg.N)}")

    a = world.alloc((cfg.M, cfg.K), DTYPE)
    try:
        for r in range(R):
            if phase == COMP_ONLY:
                for q in range(R):
                    lo, hi = m.rank_rows(q)
                    if hi > lo:
                        a.load(r, a_shards[q], slice(lo, hi))
            else:
                lo, hi = m.rank_rows(r)
                if hi > lo:
                    a.load(r, a_shards[r], slice(lo, hi))

        gather = AllGather(world, [a], m, cfg.order, cfg.mode, cfg.binding,
                           workers=cfg.comm_workers, worker_base=cfg.comp_workers)
        consumer = BlockChannel.row_tiles(m, cfg.tm_comp)
        col_blocks = blocks(cfg.N, cfg.tn_comp)
        n_row_tiles = -(-cfg.M // cfg.tm_comp)
        outputs = [np.zeros((cfg.M, cfg.N), dtype=DTYPE) for _ in range(R)]
        wait = phase != COMP_ONLY
        math_on = phase != COMM_ONLY

        def compute(ctx: Context, row_tiles: list[int]) -> None:
            r = ctx.rank
            br = np.asarray(b[r], dtype=DTYPE)
            for i in row_tiles:
                if wait:
                    ctx.consumer_tile_wait(consumer, i)
                rows = consumer.rows(i).rows
                tile_a = ctx.read(a, rows)
                for j, cols in enumerate(col_blocks):
                    tid = i * len(col_blocks) + j
                    with ctx.tile(tid):
                        if math_on:
                            outputs[r][rows, cols] = tiled_matmul(tile_a, br[:, cols], cfg.tk_comp)

        # communication units start first so transfers are in flight early
        tasks: list[Task] = []
        expected = Expectation(world.layout)
        if phase != COMP_ONLY:
            tasks.extend(gather.tasks())
            expected = gather.expectation()
        for r in range(R):
            pos = schedule_rank(cfg.order, r, R)
            ordered = sorted(range(n_row_tiles), key=lambda i: (pos[consumer.source(i)], i))
            for w, chunk in enumerate(split(ordered, cfg.comp_workers)):
                tasks.append(Task(r, COMPUTE, bind(compute, chunk), w))

        elapsed = world.run(tasks, expected)
    finally:
        world.free(a)

    layout = world.layout
    notify = safe_indices(lambda t: {layout.pc(ch, gather.group) for ch in gather.block.channels(t)})
    return KernelRun(outputs, elapsed, world, notify)
