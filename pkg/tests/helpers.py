"""Small kernels and fixtures shared by the test modules."""

from __future__ import annotations

import numpy as np

from tilelink_sim.mapping import StaticMapping
from tilelink_sim.runtime import COMPUTE, BlockChannel, Expectation, Task, World


def tile_values(run: int, t: int, rows: int, cols: int) -> np.ndarray:
    """Distinct payload per (run, tile) so a stale or torn tile changes the checksum."""
    base = (run * 131 + t * 17) % 997
    return (base + np.arange(rows * cols, dtype=np.float64).reshape(rows, cols)) % 4093


def checksum_kernel(world: World, run: int, *, tiles: int = 4, tile_rows: int = 4,
                    cols: int = 4, skip_wait: bool = False) -> tuple[float, float]:
    """Rank 0 pushes ``tiles`` tiles to rank 1, which sums each tile after its wait.

    Returns ``(observed, expected)`` checksums.  With jitter enabled the
    producer writes row by row with random yields, so a consumer that read
    before the barrier would see a torn tile.  ``skip_wait`` removes the
    consumer's wait, as a negative control.
    """
    m = StaticMapping(tiles * tile_rows, 1, 1, tile_rows)
    block = BlockChannel.static(m, target=1)
    buf = world.alloc((m.M, cols), np.float64)
    expect = Expectation(world.layout)
    for t in m.tiles():
        expect.add_pc(1, block.channels(t)[0])
    # one channel collects every tile's notify, so tile t waits for t + 1 arrivals
    seen = []

    def produce(ctx):
        for t in m.tiles():
            ctx.maybe_yield()
            ctx.tile_push_data(block, buf, t, tile_values(run, t, tile_rows, cols))
            ctx.producer_tile_notify(block, t)

    def consume(ctx):
        index = world.layout.pc(0)
        for t in m.tiles():
            if not skip_wait:
                ctx._await(index, t + 1, t)
            seen.append(float(ctx.read(buf, block.rows(t).rows).sum()))
            ctx.maybe_yield()

    try:
        world.run([Task(0, COMPUTE, produce), Task(1, COMPUTE, consume)], expect)
    finally:
        world.free(buf)
    want = sum(float(tile_values(run, t, tile_rows, cols).sum()) for t in m.tiles())
    return sum(seen), want
