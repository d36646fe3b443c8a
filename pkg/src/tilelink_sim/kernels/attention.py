"""AllGather of the KV cache overlapped with streaming-softmax attention.

Keys and values are sequence-sharded.  While they are gathered, each rank
walks its query blocks over KV tiles in schedule order, folding every tile
into a running max, running normaliser and running output as soon as the
tile's channels have been signalled.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..errors import ConfigError, ShapeMismatch
from ..mapping import StaticMapping
from ..runtime import COMPUTE, BlockChannel, Context, Expectation, Task, World
from .collectives import AllGather
from .common import (COMM_ONLY, COMP_ONLY, DTYPE, FULL, KernelRun, bind, blocks, check_phase,
                     check_world, safe_indices, schedule_rank, split, world_for)
from .config import KernelConfig


def kv_mapping(cfg: KernelConfig) -> StaticMapping:
    if cfg.seq % cfg.world_size:
        raise ConfigError(f"seq={cfg.seq} must split evenly over {cfg.world_size} ranks")
    m = StaticMapping(cfg.seq, cfg.world_size, cfg.channels, cfg.tm_comm)
    m.require_aligned()
    return m


class OnlineSoftmax:
    """Running softmax-weighted sum over KV tiles for one block of queries."""

    def __init__(self, q: np.ndarray, scale: float):
        nq, heads, dim = q.shape
        self.q = q
        self.scale = DTYPE(scale)
        self.row_max = np.full((heads, nq), -np.inf, dtype=DTYPE)
        self.denom = np.zeros((heads, nq), dtype=DTYPE)
        self.acc = np.zeros((heads, nq, dim), dtype=DTYPE)

    def update(self, k: np.ndarray, v: np.ndarray) -> None:
        s = np.einsum("qhd,khd->hqk", self.q, k) * self.scale
        new_max = np.maximum(self.row_max, s.max(axis=-1))
        rescale = np.exp(self.row_max - new_max)
        p = np.exp(s - new_max[..., None])
        self.denom = self.denom * rescale + p.sum(axis=-1)
        self.acc = self.acc * rescale[..., None] + np.einsum("hqk,khd->hqd", p, v)
        self.row_max = new_max

    def result(self) -> np.ndarray:
        return (self.acc / self.denom[..., None]).transpose(1, 0, 2)


def ag_kv_attention(cfg: KernelConfig, q: Sequence[np.ndarray], k_shards: Sequence[np.ndarray],
                    v_shards: Sequence[np.ndarray], *, world: World | None = None,
                    phase: str = FULL) -> KernelRun:
    """Rank ``r``'s queries ``(seq / R, heads, head_dim)`` attend over the full sequence."""
    check_phase(phase)
    m = kv_mapping(cfg)
    world = world or world_for(cfg)
    check_world(world, cfg)
    R = cfg.world_size
    local = cfg.seq // R
    want = (local, cfg.heads, cfg.head_dim)
    if not len(q) == len(k_shards) == len(v_shards) == R:
        raise ShapeMismatch(f"expected {R} query, key and value shards")
    for r in range(R):
        for name, arr in (("Q", q[r]), ("K", k_shards[r]), ("V", v_shards[r])):
            if np.shape(arr) != want:
                raise ShapeMismatch(f"{name} of rank {r} has shape {np.shape(arr)}, expected {want}")

    shape = (cfg.seq, cfg.heads, cfg.head_dim)
    keys, values = world.alloc(shape, DTYPE), world.alloc(shape, DTYPE)
    try:
        for r in range(R):
            for src in (range(R) if phase == COMP_ONLY else (r,)):
                rows = slice(*m.rank_rows(src))
                keys.load(r, k_shards[src], rows)
                values.load(r, v_shards[src], rows)

        gather = AllGather(world, [keys, values], m, cfg.order, cfg.mode, cfg.binding,
                           workers=cfg.comm_workers, worker_base=cfg.comp_workers)
        kv_block = BlockChannel.row_tiles(m, cfg.tn_comp)
        n_kv = -(-cfg.seq // cfg.tn_comp)
        q_blocks = blocks(local, cfg.tm_comp)
        outputs = [np.zeros(want, dtype=DTYPE) for _ in range(R)]
        scale = 1.0 / math.sqrt(cfg.head_dim)
        wait = phase != COMP_ONLY
        math_on = phase != COMM_ONLY

        def compute(ctx: Context, job: tuple[list[int], list[int]]) -> None:
            r = ctx.rank
            my_blocks, kv_order = job
            for b in my_blocks:
                qb = q_blocks[b]
                state = OnlineSoftmax(np.asarray(q[r][qb], dtype=DTYPE), scale)
                for t in kv_order:
                    if wait:
                        ctx.consumer_tile_wait(kv_block, t)
                    rows = kv_block.rows(t).rows
                    tid = b * n_kv + t
                    with ctx.tile(tid):
                        kt, vt = ctx.read(keys, rows), ctx.read(values, rows)
                        if math_on:
                            state.update(kt, vt)
                if math_on:
                    outputs[r][qb] = state.result()

        # communication units start first so transfers are in flight early
        tasks: list[Task] = []
        expected = Expectation(world.layout)
        if phase != COMP_ONLY:
            tasks.extend(gather.tasks())
            expected = gather.expectation()
        for r in range(R):
            pos = schedule_rank(cfg.order, r, R)
            kv_order = sorted(range(n_kv), key=lambda t: (pos[kv_block.source(t)], t))
            for w, mine in enumerate(split(list(range(len(q_blocks))), cfg.comp_workers)):
                tasks.append(Task(r, COMPUTE, bind(compute, (mine, kv_order)), w))
        elapsed = world.run(tasks, expected)
    finally:
        world.free(keys)
        world.free(values)

    layout = world.layout
    notify = safe_indices(lambda t: {layout.pc(ch, gather.group) for ch in gather.block.channels(t)})
    return KernelRun(outputs, elapsed, world, notify)
