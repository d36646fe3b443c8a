"""Mixture-of-experts layer split into two overlapped kernels.

:func:`ag_moe` gathers the token shards and runs the first grouped GEMM
with the gather fused into the tile loads: each expert tile reads its
tokens straight out of the gathered buffer through the dynamic row table.

:func:`moe_second_half` chains three stages with producer/consumer
signals: grouped GEMM, top-k combine per token tile, ring ReduceScatter.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import ConfigError, ShapeMismatch
from ..mapping import (DynamicMapping, RoutingTable, StaticMapping, build_dynamic_mapping,
                       static_shape_range)
from ..runtime import COMPUTE, P2P, BlockChannel, Context, Expectation, Task, World
from .collectives import AllGather, RingReduceScatter
from .common import (COMM_ONLY, COMP_ONLY, DTYPE, FULL, KernelRun, bind, check_phase, check_world,
                     safe_indices, schedule_rank, split, tiled_matmul, world_for)
from .config import KernelConfig

EXPERT_GROUP, COMBINE_GROUP, RECV_GROUP = 0, 1, 2


def token_mapping(cfg: KernelConfig) -> StaticMapping:
    R = cfg.world_size
    if cfg.tokens % R:
        raise ConfigError(f"tokens={cfg.tokens} must split evenly over {R} ranks")
    if cfg.intermediate % R:
        raise ConfigError(f"intermediate={cfg.intermediate} must split evenly over {R} ranks")
    if cfg.topk > cfg.experts:
        raise ConfigError(f"topk={cfg.topk} exceeds experts={cfg.experts}")
    m = StaticMapping(cfg.tokens, R, cfg.channels, cfg.tm_comm)
    m.require_aligned()
    return m


def row_tiles_of(d: DynamicMapping) -> np.ndarray:
    """Dynamic tile owning every grouped row."""
    out = np.full(d.num_rows, -1, dtype=np.int64)
    for t in d.tiles():
        out[d.f_s_low[t]:d.f_s_high[t]] = t
    return out


def token_channels(d: DynamicMapping, owner: np.ndarray, lo: int, hi: int) -> tuple[int, ...]:
    """Channels of the expert tiles holding any routed row of tokens ``[lo, hi)``."""
    rows = d.inverse[lo:hi].ravel()
    return tuple(sorted({int(d.f_c[t]) for t in owner[rows]}))


@dataclass
class MoeRun(KernelRun):
    mapping: DynamicMapping | None = None

    def unrouted(self, rank: int) -> np.ndarray:
        """Grouped rows of ``rank`` back in token order: ``(tokens, topk, cols)``."""
        return self.outputs[rank][self.mapping.inverse]


def _check_routing(cfg: KernelConfig, routing: RoutingTable) -> None:
    if (routing.num_tokens != cfg.tokens or routing.topk != cfg.topk
            or routing.num_experts != cfg.experts):
        raise ShapeMismatch(f"routing ({routing.num_tokens} tokens, k={routing.topk}, "
                            f"E={routing.num_experts}) does not match the config")
    if routing.s_local != cfg.tokens // cfg.world_size:
        raise ShapeMismatch(f"routing shards of {routing.s_local} tokens, expected "
                            f"{cfg.tokens // cfg.world_size}")


def ag_moe(cfg: KernelConfig, x_shards: Sequence[np.ndarray], w1: Sequence[np.ndarray],
           routing: RoutingTable, *, world: World | None = None, phase: str = FULL,
           mapping: DynamicMapping | None = None) -> MoeRun:
    """First expert GEMM on gathered tokens, output in the grouped layout.

    ``outputs[r]`` is ``(tokens * topk, intermediate / R)``; row ``g`` holds
    token ``mapping.row_token[g]`` multiplied by its expert's weights.
    """
    check_phase(phase)
    m = token_mapping(cfg)
    _check_routing(cfg, routing)
    world = world or world_for(cfg)
    check_world(world, cfg)
    R, S, H = cfg.world_size, cfg.tokens, cfg.hidden
    i_local = cfg.intermediate // R
    if len(x_shards) != R or len(w1) != R:
        raise ShapeMismatch(f"expected {R} token shards and weight sets")
    for r in range(R):
        if np.shape(x_shards[r]) != (S // R, H):
            raise ShapeMismatch(f"token shard of rank {r} has shape {np.shape(x_shards[r])}")
        if np.shape(w1[r]) != (cfg.experts, H, i_local):
            raise ShapeMismatch(f"expert weights of rank {r} have shape {np.shape(w1[r])}")
    d = mapping or build_dynamic_mapping(routing, cfg.tm_comp, R, cfg.channels)
    owner = row_tiles_of(d)

    x = world.alloc((S, H), DTYPE)
    try:
        for r in range(R):
            for q in (range(R) if phase == COMP_ONLY else (r,)):
                x.load(r, x_shards[q], slice(*m.rank_rows(q)))

        gather = AllGather(world, [x], m, cfg.order, cfg.mode, cfg.binding,
                           workers=cfg.comm_workers, worker_base=cfg.comp_workers,
                           notify_channels=lambda t: token_channels(
                               d, owner, *static_shape_range(t, m)),
                           group=EXPERT_GROUP)
        consumer = BlockChannel.dynamic(d, group=EXPERT_GROUP)
        outputs = [np.zeros((d.num_rows, i_local), dtype=DTYPE) for _ in range(R)]
        wait = phase != COMP_ONLY
        math_on = phase != COMM_ONLY

        def compute(ctx: Context, tiles: list[int]) -> None:
            r = ctx.rank
            for t in tiles:
                if wait:
                    ctx.consumer_tile_wait(consumer, t)
                rows = consumer.rows(t).rows
                tokens = d.row_token[rows]
                with ctx.tile(t):
                    xs = ctx.read(x, tokens)
                    if math_on:
                        weights = np.asarray(w1[r][d.f_e[t]], dtype=DTYPE)
                        outputs[r][rows] = tiled_matmul(xs, weights, cfg.tk_comp)

        # communication units start first so transfers are in flight early
        tasks: list[Task] = []
        expected = Expectation(world.layout)
        if phase != COMP_ONLY:
            tasks.extend(gather.tasks())
            expected = gather.expectation()
        for r in range(R):
            pos = schedule_rank(cfg.order, r, R)
            ordered = sorted(d.tiles(), key=lambda t: (pos[int(d.f_r[t])], t))
            for w, chunk in enumerate(split(ordered, cfg.comp_workers)):
                tasks.append(Task(r, COMPUTE, bind(compute, chunk), w))
        elapsed = world.run(tasks, expected)
    finally:
        world.free(x)

    layout = world.layout
    notify = safe_indices(lambda t: {layout.pc(ch, EXPERT_GROUP) for ch in gather.block.channels(t)})
    return MoeRun(outputs, elapsed, world, notify, mapping=d)


def moe_second_half(cfg: KernelConfig, grouped: Sequence[np.ndarray], w2: Sequence[np.ndarray],
                    routing: RoutingTable, *, mapping: DynamicMapping | None = None,
                    world: World | None = None, phase: str = FULL) -> KernelRun:
    """Grouped GEMM, top-k combine (uniform ``1/k``) and ReduceScatter over token shards.

    ``outputs[r]`` is ``(tokens / R, hidden)``: the combined expert output
    of rank ``r``'s tokens summed over every rank's intermediate slice.
    """
    check_phase(phase)
    m = token_mapping(cfg)
    _check_routing(cfg, routing)
    world = world or world_for(cfg)
    check_world(world, cfg)
    R, S, H, k = cfg.world_size, cfg.tokens, cfg.hidden, cfg.topk
    i_local = cfg.intermediate // R
    d = mapping or build_dynamic_mapping(routing, cfg.tm_comp, R, cfg.channels)
    if len(grouped) != R or len(w2) != R:
        raise ShapeMismatch(f"expected {R} grouped activations and weight sets")
    for r in range(R):
        if np.shape(grouped[r]) != (d.num_rows, i_local):
            raise ShapeMismatch(f"grouped activations of rank {r} have shape {np.shape(grouped[r])}")
        if np.shape(w2[r]) != (cfg.experts, i_local, H):
            raise ShapeMismatch(f"expert weights of rank {r} have shape {np.shape(w2[r])}")
    owner = row_tiles_of(d)

    expert_out = world.alloc((d.num_rows, H), DTYPE)
    combined = world.alloc((S, H), DTYPE)
    expert_block = BlockChannel.dynamic(d, group=EXPERT_GROUP)
    token_block = BlockChannel.row_tiles(m, cfg.tm_comp, group=COMBINE_GROUP)
    needs = BlockChannel(rows=token_block.rows, source=token_block.source,
                         channels=lambda i: token_channels(d, owner, *token_block.rows(i)),
                         group=EXPERT_GROUP)
    rs = RingReduceScatter(world, combined, m, token_block, cfg.mode, cfg.binding,
                           recv_group=RECV_GROUP, workers=cfg.comm_workers,
                           worker_base=cfg.comp_workers + 1)
    n_token_tiles = -(-S // cfg.tm_comp)
    signals = phase != COMP_ONLY
    math_on = phase != COMM_ONLY
    scale = np.asarray(1.0 / k, dtype=DTYPE)
    # without signals both stages stay in plain per-rank arrays
    local = [np.zeros((S, H), dtype=DTYPE) for _ in range(R)]
    local_expert = [np.zeros((d.num_rows, H), dtype=DTYPE) for _ in range(R)]
    try:
        def expert_gemm(ctx: Context, tiles: list[int]) -> None:
            r = ctx.rank
            to_self = expert_block.to(r)
            for t in tiles:
                rows = expert_block.rows(t).rows
                with ctx.tile(t):
                    if math_on:
                        weights = np.asarray(w2[r][d.f_e[t]], dtype=DTYPE)
                        y = tiled_matmul(np.asarray(grouped[r][rows], dtype=DTYPE), weights,
                                         cfg.tk_comp)
                    else:
                        y = np.zeros((rows.stop - rows.start, H), dtype=DTYPE)
                    if signals:
                        ctx.write(expert_out, rows, y)
                    else:
                        local_expert[r][rows] = y
                if signals:
                    ctx.producer_tile_notify(to_self, t, P2P)

        def combine(ctx: Context, token_tiles: list[int]) -> None:
            r = ctx.rank
            to_self = token_block.to(r)
            for i in token_tiles:
                if signals:
                    ctx.consumer_tile_wait(needs, i)
                lo, hi = token_block.rows(i)
                with ctx.tile(i):
                    acc = np.zeros((hi - lo, H), dtype=DTYPE)
                    for j in range(k):
                        rows = d.inverse[lo:hi, j]
                        y = ctx.read(expert_out, rows) if signals else local_expert[r][rows]
                        if math_on:
                            acc += scale * y
                    if signals:
                        ctx.write(combined, slice(lo, hi), acc)
                    else:
                        local[r][lo:hi] = acc
                if signals:
                    ctx.producer_tile_notify(to_self, i, P2P)

        tasks: list[Task] = []
        for r in range(R):
            pos = {(r + 1 + s) % R: s for s in range(R)}
            ordered = sorted(d.tiles(), key=lambda t: (pos[int(d.f_r[t])], t))
            for w, chunk in enumerate(split(ordered, cfg.comp_workers)):
                tasks.append(Task(r, COMPUTE, bind(expert_gemm, chunk), w))
            token_order = sorted(range(n_token_tiles), key=lambda i: (pos[token_block.source(i)], i))
            if signals:
                tasks.append(Task(r, COMPUTE, bind(combine, token_order), cfg.comp_workers))
        expected = Expectation(world.layout)
        if signals:
            tasks.extend(rs.tasks())
            for r in range(R):
                for t in d.tiles():
                    expected.add_pc(r, int(d.f_c[t]), group=EXPERT_GROUP)
                for i in range(n_token_tiles):
                    for ch in token_block.channels(i):
                        expected.add_pc(r, ch, group=COMBINE_GROUP)
            expected.merge(rs.expectation())
            elapsed = world.run(tasks, expected)
        else:
            # without signals the combine must run after every expert tile
            elapsed = world.run(tasks, expected)
            elapsed += world.run([Task(r, COMPUTE, bind(combine, list(range(n_token_tiles))))
                                  for r in range(R)])
        outputs = rs.outputs if signals else [local[r][slice(*m.rank_rows(r))] for r in range(R)]
    finally:
        rs.free()
        world.free(expert_out)
        world.free(combined)

    layout = world.layout

    def notify_indices(t: int) -> set[int]:
        out = safe_indices(lambda i: {layout.pc(ch, EXPERT_GROUP) for ch in expert_block.channels(i)})(t)
        out |= safe_indices(lambda i: {layout.pc(ch, COMBINE_GROUP) for ch in token_block.channels(i)})(t)
        return out | safe_indices(lambda i: {layout.pc(ch, RECV_GROUP)
                                             for ch in rs.recv_block.channels(i)})(t)

    return KernelRun(outputs, elapsed, world, notify_indices)


def moe(cfg: KernelConfig, x_shards, w1, w2, routing: RoutingTable, *,
        world: World | None = None, phase: str = FULL) -> KernelRun:
    """Both halves back to back on one world (two launches)."""
    world = world or world_for(cfg)
    first = ag_moe(cfg, x_shards, w1, routing, world=world, phase=phase)
    second = moe_second_half(cfg, first.outputs, w2, routing, mapping=first.mapping,
                             world=world, phase=phase)
    first_idx, second_idx = first.notify_indices, second.notify_indices
    return KernelRun(second.outputs, first.elapsed + second.elapsed, world,
                     lambda t: first_idx(t) | second_idx(t))
