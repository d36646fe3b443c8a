import threading
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import checksum_kernel
from tilelink_sim.errors import (ConfigError, DeadlockError, DomainError, RaceViolation,
                                 SignalError, TileLinkError)
from tilelink_sim.mapping import StaticMapping, static_src_rank
from tilelink_sim.runtime import (BROADCAST, COMPUTE, HOST, TIMEOUT_ENV, BlockChannel,
                                  ChannelLayout, Expectation, SignalBoard, Task, World,
                                  alloc_symmetric, default_timeout, init_world)

MLP = StaticMapping(8192, 8, 4, 128)


def run_tasks(world, fns, expected=None):
    return world.run([Task(rank, unit, fn) for rank, unit, fn in fns], expected)


class TestWorld:
    def test_single_rank(self):
        w = init_world(1, 1)
        assert w.R == 1 and w.num_channels == 1 and len(w.boards) == 1

    def test_channel_count(self):
        assert init_world(8, 4).num_channels == 32

    @pytest.mark.parametrize("R,C", [(0, 1), (1, 0), (-2, 3)])
    def test_bad_sizes(self, R, C):
        with pytest.raises(ConfigError):
            init_world(R, C)

    def test_alloc_zeros(self):
        w = init_world(2, 1)
        t = alloc_symmetric(w, (4, 4))
        assert len(t.buffers) == 2
        assert all(b.shape == (4, 4) and b.size == 16 and not b.any() for b in t.buffers)

    def test_alloc_ids(self):
        w = init_world(2, 1)
        a, b = alloc_symmetric(w, (4,)), alloc_symmetric(w, (4,))
        assert a.id < b.id
        assert list(w.heap) == [a.id, b.id]

    @pytest.mark.parametrize("shape", [(0, 4), (), (3, -1)])
    def test_alloc_bad_shape(self, shape):
        with pytest.raises(ConfigError):
            alloc_symmetric(init_world(2, 1), shape)

    def test_alloc_bad_dtype(self):
        with pytest.raises(ConfigError):
            alloc_symmetric(init_world(1, 1), (2,), np.int32)

    def test_timeout_env(self, monkeypatch):
        monkeypatch.setenv(TIMEOUT_ENV, "250")
        assert default_timeout() == 0.25
        assert init_world(1, 1).timeout == 0.25
        monkeypatch.setenv(TIMEOUT_ENV, "soon")
        with pytest.raises(ConfigError):
            default_timeout()
        monkeypatch.setenv(TIMEOUT_ENV, "-1")
        with pytest.raises(ConfigError):
            default_timeout()

    def test_not_reentrant(self):
        w = init_world(1, 1)
        inner = []

        def fn(ctx):
            with pytest.raises(TileLinkError, match="reentrant"):
                w.run([])
            inner.append(True)

        run_tasks(w, [(0, COMPUTE, fn)])
        assert inner == [True]

    def test_task_error_propagates(self):
        w = init_world(2, 1)

        def boom(ctx):
            raise KeyError("boom")

        with pytest.raises(KeyError):
            run_tasks(w, [(0, COMPUTE, boom)])


class TestLayout:
    def test_regions_are_disjoint(self):
        lay = ChannelLayout(3, 2, groups=2, peer_tiles=4)
        pcs = {lay.pc(c, g) for c in range(6) for g in range(2)}
        peers = {lay.peer(t, r) for t in range(4) for r in range(3)}
        hosts = {lay.host(r) for r in range(3)}
        assert len(pcs) == 12 and len(peers) == 12 and len(hosts) == 3
        every = pcs | peers | hosts | {lay.copy_done}
        assert every == set(range(lay.size))
        assert {lay.region(i) for i in pcs} == {"pc"}
        assert {lay.region(i) for i in peers} == {"peer"}
        assert {lay.region(i) for i in hosts} == {"host"}
        assert lay.region(lay.copy_done) == "copy"

    @pytest.mark.parametrize("call", [lambda l: l.pc(6), lambda l: l.pc(0, 2), lambda l: l.peer(4, 0),
                                      lambda l: l.peer(0, 3), lambda l: l.host(-1)])
    def test_out_of_range(self, call):
        with pytest.raises(DomainError):
            call(ChannelLayout(3, 2, groups=2, peer_tiles=4))


class TestNotifyWait:
    def test_broadcast_bumps_every_rank(self):
        w = init_world(4, 1)
        block = BlockChannel.static(StaticMapping(16, 4, 1, 4))
        run_tasks(w, [(0, COMPUTE, lambda ctx: ctx.producer_tile_notify(block, 0, BROADCAST))])
        assert [b.snapshot() for b in w.boards] == [{0: 1}] * 4

    def test_p2p_hits_the_mapped_rank(self):
        w = init_world(8, 4)
        # the consumer is the rank owning the tile's offset in the global view
        block = BlockChannel.static(MLP, target=lambda t: static_src_rank(t, MLP))
        run_tasks(w, [(3, COMPUTE, lambda ctx: ctx.producer_tile_notify(block, 9))])
        hit = [r for r, b in enumerate(w.boards) if b.snapshot()]
        assert hit == [1]
        assert w.boards[1].snapshot() == {w.layout.pc(4): 1}

    def test_p2p_needs_a_target(self):
        w = init_world(2, 1)
        block = BlockChannel.static(StaticMapping(8, 2, 1, 4))
        with pytest.raises(ConfigError, match="target"):
            run_tasks(w, [(0, COMPUTE, lambda ctx: ctx.producer_tile_notify(block, 0))])

    def test_waits_for_expected_count(self):
        w = init_world(2, 1)
        m = StaticMapping(8, 2, 1, 4)
        block = BlockChannel.static(m, target=1)
        expect = Expectation(w.layout)
        expect.add_pc(1, 0, 2)
        order = []

        def producer(ctx):
            for _ in range(2):
                time.sleep(0.01)
                order.append("notify")
                ctx.producer_tile_notify(block, 0)

        def consumer(ctx):
            ctx.consumer_tile_wait(block, 0)
            order.append("woke")

        run_tasks(w, [(0, COMPUTE, producer), (1, COMPUTE, consumer)], expect)
        assert order == ["notify", "notify", "woke"]

    def test_zero_expected_returns(self):
        w = init_world(1, 1, timeout=0.05)
        block = BlockChannel.static(StaticMapping(4, 1, 1, 4))
        t0 = time.monotonic()
        run_tasks(w, [(0, COMPUTE, lambda ctx: ctx.consumer_tile_wait(block, 0))])
        assert time.monotonic() - t0 < 0.05

    def test_wait_without_producer_times_out(self):
        w = init_world(2, 1, timeout=0.1)
        block = BlockChannel.static(StaticMapping(8, 2, 1, 4))
        expect = Expectation(w.layout)
        expect.add_pc(1, 1)
        with pytest.raises(DeadlockError) as info:
            run_tasks(w, [(1, COMPUTE, lambda ctx: ctx.consumer_tile_wait(block, 1))], expect)
        err = info.value
        assert (err.rank, err.channel, err.counter, err.expected) == (1, w.layout.pc(1), 0, 1)
        assert "channel 1" in str(err)

    def test_deadlock_names_every_blocked_unit(self):
        w = init_world(2, 1, timeout=0.2)
        expect = Expectation(w.layout)
        expect.add_peer(0, 0, 1)
        expect.add_peer(1, 0, 0)
        with pytest.raises(DeadlockError) as info:
            run_tasks(w, [(0, COMPUTE, lambda ctx: ctx.peer_tile_wait(0, 1)),
                          (1, COMPUTE, lambda ctx: ctx.peer_tile_wait(0, 0))], expect)
        ranks = {b[0] for b in info.value.blocked}
        assert ranks == {0, 1}
        assert "rank 0 compute" in str(info.value) and "rank 1 compute" in str(info.value)

    def test_over_limit_arrival_is_an_error(self):
        w = init_world(1, 1)
        block = BlockChannel.static(StaticMapping(4, 1, 1, 4), target=0)
        expect = Expectation(w.layout)
        expect.add_pc(0, 0, 1)

        def twice(ctx):
            ctx.producer_tile_notify(block, 0)
            ctx.producer_tile_notify(block, 0)

        with pytest.raises(SignalError, match="expected 1"):
            run_tasks(w, [(0, COMPUTE, twice)], expect)

    def test_unknown_mode(self):
        w = init_world(1, 1)
        block = BlockChannel.static(StaticMapping(4, 1, 1, 4), target=0)
        with pytest.raises(ConfigError):
            run_tasks(w, [(0, COMPUTE, lambda ctx: ctx.producer_tile_notify(block, 0, "multicast"))])


class TestPeerAndHost:
    def test_self_notify_then_wait(self):
        w = init_world(2, 1, timeout=0.5)

        def fn(ctx):
            ctx.peer_tile_notify(3, 0)
            ctx.peer_tile_wait(3, 0)

        run_tasks(w, [(0, COMPUTE, fn)])

    def test_never_notified_peer_times_out(self):
        w = init_world(2, 1, timeout=0.1)
        with pytest.raises(DeadlockError, match="peer"):
            run_tasks(w, [(0, COMPUTE, lambda ctx: ctx.peer_tile_wait(0, 1))])

    def test_ring_chain(self):
        R = 4
        w = init_world(R, 1, timeout=2)
        finished = []
        lock = threading.Lock()

        # rank R-1 starts; each rank waits for its successor, then passes to r - 1
        def step(ctx):
            r = ctx.rank
            if r != R - 1:
                ctx.peer_tile_wait(0, r + 1)
            with lock:
                finished.append(r)
            if r > 0:
                ctx.peer_tile_notify(0, r - 1)

        run_tasks(w, [(r, COMPUTE, step) for r in range(R)])
        assert finished == [3, 2, 1, 0]

    def test_rank_wait_after_notify(self):
        w = init_world(2, 1, timeout=1)
        expect = Expectation(w.layout)
        expect.add_host(1, 0)

        def host0(ctx):
            ctx.rank_notify(5, 1)

        def host1(ctx):
            ctx.rank_wait(0)

        run_tasks(w, [(0, HOST, host0), (1, HOST, host1)], expect)
        assert w.boards[1].snapshot() == {w.layout.host(0): 1}

    def test_rank_out_of_range(self):
        w = init_world(2, 1)
        with pytest.raises(DomainError):
            run_tasks(w, [(0, HOST, lambda ctx: ctx.rank_notify(0, 2))])
        with pytest.raises(DomainError):
            run_tasks(w, [(0, HOST, lambda ctx: ctx.rank_wait(5))])


class TestEpochs:
    def test_stale_arrival_is_ignored(self):
        board = SignalBoard(0, ChannelLayout(1, 1))
        board.start_epoch(1, {})
        assert board.arrive(0, 1)
        board.start_epoch(2, {})
        assert not board.arrive(0, 1)
        assert board.counter(0) == 0

    def test_second_run_does_not_short_circuit(self):
        w = init_world(2, 1, timeout=0.2)
        block = BlockChannel.static(StaticMapping(8, 2, 1, 4), target=1)
        expect = Expectation(w.layout)
        expect.add_pc(1, 0)
        run_tasks(w, [(0, COMPUTE, lambda ctx: ctx.producer_tile_notify(block, 0)),
                      (1, COMPUTE, lambda ctx: ctx.consumer_tile_wait(block, 0))], expect)
        # the first epoch's arrival must not satisfy this wait
        with pytest.raises(DeadlockError):
            run_tasks(w, [(1, COMPUTE, lambda ctx: ctx.consumer_tile_wait(block, 0))], expect)

    def test_counters_never_decrease(self):
        board = SignalBoard(0, ChannelLayout(1, 1))
        board.start_epoch(1, {})
        seen = []
        for _ in range(5):
            board.arrive(0, 1)
            seen.append(board.counter(0))
        assert seen == sorted(seen) == [1, 2, 3, 4, 5]


class TestLandingTimes:
    def test_future_arrival_counts_once_landed(self):
        board = SignalBoard(0, ChannelLayout(1, 1))
        board.start_epoch(1, {})
        board.arrive(0, 1, at=time.monotonic() + 0.05)
        assert board.counter(0) == 0
        reached, count = board.await_count(0, 1, time.monotonic() + 1, threading.Event())
        assert reached and count == 1

    def test_notify_waits_for_in_flight_transfer(self):
        delay = 0.05
        w = init_world(2, 1, comm_delay=delay, timeout=2)
        block = BlockChannel.static(StaticMapping(8, 2, 1, 4), target=1)
        buf = w.alloc((8, 1))
        expect = Expectation(w.layout)
        expect.add_pc(1, 0)
        stamps = {}

        def producer(ctx):
            stamps["sent"] = time.monotonic()
            ctx.tile_push_data(block, buf, 0, np.ones((4, 1)))
            ctx.producer_tile_notify(block, 0)

        def consumer(ctx):
            ctx.consumer_tile_wait(block, 0)
            stamps["woke"] = time.monotonic()

        elapsed = run_tasks(w, [(0, COMPUTE, producer), (1, COMPUTE, consumer)], expect)
        assert stamps["woke"] - stamps["sent"] >= delay * 0.9
        assert elapsed >= delay * 0.9

    def test_link_serialises_transfers(self):
        w = init_world(1, 1, comm_delay=0.01)
        ctx = w.context(0)
        s1, e1 = ctx.occupy_link()
        s2, e2 = ctx.occupy_link()
        assert e1 - s1 == pytest.approx(0.01) and s2 == e1 and e2 - s2 == pytest.approx(0.01)


class TestRaceChecker:
    def test_unpublished_read_flagged(self):
        w = init_world(2, 1, race_check=True)
        buf = w.alloc((4, 2))

        def writer(ctx):
            ctx.write(buf, slice(0, 2), np.ones((2, 2)))

        def reader(ctx):
            time.sleep(0.02)
            ctx.read(buf, slice(0, 2), rank=0)

        with pytest.raises(RaceViolation, match="before it was published"):
            run_tasks(w, [(0, COMPUTE, writer), (1, COMPUTE, reader)])

    def test_own_writes_readable(self):
        w = init_world(1, 1, race_check=True)
        buf = w.alloc((4,))

        def fn(ctx):
            ctx.write(buf, slice(0, 4), np.arange(4))
            assert ctx.read(buf).tolist() == [0, 1, 2, 3]

        run_tasks(w, [(0, COMPUTE, fn)])

    def test_loaded_rows_are_published(self):
        w = init_world(2, 1, race_check=True)
        buf = w.alloc((4,))
        buf.load(0, np.arange(4.0))
        run_tasks(w, [(1, COMPUTE, lambda ctx: ctx.read(buf, rank=0))])

    def test_checksum_stress_short(self):
        w = init_world(2, 1, race_check=True, jitter=3, seed=11, timeout=5)
        for run in range(300):
            observed, expected = checksum_kernel(w, run)
            assert observed == expected
        assert w.checker.violations == []

    def test_missing_wait_is_caught(self):
        w = init_world(2, 1, race_check=True, jitter=3, seed=5, timeout=5)
        caught = 0
        for run in range(200):
            try:
                checksum_kernel(w, run, skip_wait=True)
            except RaceViolation:
                caught += 1
        assert caught > 0


class TestVisibilityProperty:
    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**20), tiles=st.integers(1, 6), rows=st.integers(1, 5),
           jitter=st.integers(0, 4))
    def test_waiter_sees_final_bytes(self, seed, tiles, rows, jitter):
        w = init_world(2, 1, race_check=True, jitter=jitter, seed=seed, timeout=5)
        observed, expected = checksum_kernel(w, seed, tiles=tiles, tile_rows=rows)
        assert observed == expected
