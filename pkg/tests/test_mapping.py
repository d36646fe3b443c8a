import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tilelink_sim.errors import ConfigError, DomainError, MappingNotMaterialized
from tilelink_sim.mapping import (SENTINEL, RoutingTable, ShapeRange, StaticMapping,
                                  build_dynamic_mapping, channel_owner, dynamic_lookup,
                                  static_channel, static_shape_range, static_src_rank)

GRID = list(itertools.product((64, 512, 8192), (1, 2, 4, 8), (1, 2, 4), (16, 128)))


def valid_mappings():
    for M, R, C, Tm in GRID:
        try:
            yield StaticMapping(M, R, C, Tm)
        except ConfigError:
            continue


def brute_force(m: StaticMapping):
    """Per-row enumeration: tile, rank block and channel block of every row."""
    rows = np.arange(m.M)
    tile_of = rows // m.Tm
    rank_of = rows // -(-m.M // m.R)
    chan_of = rows // -(-m.M // (m.R * m.C))
    return tile_of, rank_of, chan_of


class TestStaticExamples:
    mlp = StaticMapping(8192, 8, 4, 128)

    def test_first_tile(self):
        assert tuple(static_shape_range(0, self.mlp)) == (0, 128)
        assert static_src_rank(0, self.mlp) == 0
        assert static_channel(0, self.mlp) == 0

    def test_tile_nine(self):
        assert tuple(static_shape_range(9, self.mlp)) == (1152, 1280)
        assert static_src_rank(9, self.mlp) == 1
        assert static_channel(9, self.mlp) == 4

    def test_last_tile(self):
        assert static_src_rank(63, self.mlp) == 7
        assert static_channel(63, self.mlp) == 31

    def test_clamped_tail(self):
        m = StaticMapping(8100, 1, 1, 128)
        assert tuple(static_shape_range(63, m)) == (8064, 8100)

    def test_ranks_in_blocks_of_eight(self):
        ranks = [static_src_rank(t, self.mlp) for t in self.mlp.tiles()]
        assert ranks == [r for r in range(8) for _ in range(8)]

    def test_every_channel_gets_two_tiles(self):
        chans = [static_channel(t, self.mlp) for t in self.mlp.tiles()]
        assert np.bincount(chans).tolist() == [2] * 32

    def test_out_of_grid(self):
        with pytest.raises(DomainError):
            static_shape_range(64, self.mlp)
        with pytest.raises(DomainError):
            static_src_rank(-1, self.mlp)

    def test_tile_larger_than_rank_block_rejected(self):
        with pytest.raises(ConfigError, match="exceed rows per rank"):
            StaticMapping(64, 8, 1, 16)

    def test_tile_spanning_channels_rejected(self):
        with pytest.raises(ConfigError, match="rows per channel"):
            StaticMapping(512, 2, 4, 128)

    @pytest.mark.parametrize("kw", [dict(M=0, R=1, C=1, Tm=1), dict(M=8, R=0, C=1, Tm=1),
                                    dict(M=8, R=1, C=0, Tm=1), dict(M=8, R=1, C=1, Tm=0)])
    def test_non_positive_rejected(self, kw):
        with pytest.raises(ConfigError):
            StaticMapping(**kw)

    def test_channel_owner(self):
        assert channel_owner(9, 4) == (2, 1)
        with pytest.raises(DomainError):
            channel_owner(-1, 4)


class TestStaticBruteForce:
    @pytest.mark.parametrize("m", list(valid_mappings()), ids=str)
    def test_matches_row_enumeration(self, m):
        tile_of, rank_of, chan_of = brute_force(m)
        covered = np.zeros(m.M, dtype=int)
        for t in m.tiles():
            lo, hi = static_shape_range(t, m)
            covered[lo:hi] += 1
            assert np.all(tile_of[lo:hi] == t)
            assert set(rank_of[lo:hi]) == {static_src_rank(t, m)}
            assert set(chan_of[lo:hi]) == {static_channel(t, m)}
        assert np.all(covered == 1)


@st.composite
def mappings(draw):
    R = draw(st.integers(1, 8))
    C = draw(st.integers(1, 4))
    M = draw(st.integers(R * C, 600))
    m_per_channel = -(-M // (R * C))
    Tm = draw(st.integers(1, m_per_channel))
    try:
        return StaticMapping(M, R, C, Tm)
    except ConfigError:
        return StaticMapping(R * C * Tm, R, C, Tm)


class TestStaticProperties:
    @settings(max_examples=200, deadline=None)
    @given(mappings())
    def test_partition(self, m):
        spans = [tuple(static_shape_range(t, m)) for t in m.tiles()]
        assert spans[0][0] == 0 and spans[-1][1] == m.M
        assert all(a[1] == b[0] for a, b in zip(spans, spans[1:]))

    @settings(max_examples=200, deadline=None)
    @given(mappings())
    def test_monotone(self, m):
        ranks = [static_src_rank(t, m) for t in m.tiles()]
        chans = [static_channel(t, m) for t in m.tiles()]
        assert ranks == sorted(ranks) and chans == sorted(chans)
        assert 0 <= ranks[-1] < m.R and 0 <= chans[-1] < m.R * m.C

    @settings(max_examples=200, deadline=None)
    @given(mappings())
    def test_aligned_tiles_sit_in_their_rank_block(self, m):
        if not m.aligned:
            return
        for t in m.tiles():
            lo, hi = static_shape_range(t, m)
            r_lo, r_hi = m.rank_rows(static_src_rank(t, m))
            assert r_lo <= lo < hi <= r_hi
            assert channel_owner(static_channel(t, m), m.C)[0] == static_src_rank(t, m)


def four_token_routing():
    return RoutingTable(np.array([[0], [1], [0], [1]]), num_experts=2, s_local=2)


class TestDynamicExamples:
    def test_four_tokens(self):
        d = build_dynamic_mapping(four_token_routing(), tile_rows=2, world=2, channels=1)
        assert d.num_filled == 2
        assert d.row_token[0:2].tolist() == [0, 2] and d.f_e[0] == 0
        assert d.row_token[2:4].tolist() == [1, 3] and d.f_e[1] == 1
        rng, rank, chan = dynamic_lookup(1, d)
        assert tuple(rng) == (2, 4)
        # tokens 1 and 3 live on ranks 0 and 1: a tie, so the lowest rank wins
        assert rank == 0 and chan == 0

    def test_single_token(self):
        d = build_dynamic_mapping(RoutingTable(np.array([[0]]), 1, 1), 4, 1, 1)
        assert dynamic_lookup(0, d) == (ShapeRange(0, 1), 0, 0)

    def test_row_count_is_tokens_times_k(self):
        ids = np.array([[0, 1], [1, 0], [0, 1], [1, 0], [0, 1], [1, 0]])
        d = build_dynamic_mapping(RoutingTable(ids, 2, 3), 4, 2, 1)
        assert d.num_rows == 12

    def test_unfilled_entry_raises(self):
        d = build_dynamic_mapping(four_token_routing(), 2, 2, 1)
        assert d.f_s_low[d.num_filled] == SENTINEL
        with pytest.raises(MappingNotMaterialized, match="not materialized"):
            dynamic_lookup(d.num_filled, d)
        with pytest.raises(DomainError):
            dynamic_lookup(d.capacity, d)

    def test_empty_routing(self):
        d = build_dynamic_mapping(RoutingTable(np.zeros((0, 1), dtype=int), 2, 1), 2, 1, 1)
        assert d.num_filled == 0 and d.num_rows == 0

    def test_bad_expert_ids(self):
        with pytest.raises(DomainError):
            RoutingTable(np.array([[2]]), 2, 1)
        with pytest.raises(ConfigError):
            RoutingTable(np.array([[1, 1]]), 2, 1)

    def test_majority_owner_and_round_robin_channels(self):
        # expert 0 gets tokens 0, 1, 2 (rank 0, 0, 1), expert 1 gets token 3 (rank 1)
        ids = np.array([[0], [0], [0], [1]])
        d = build_dynamic_mapping(RoutingTable(ids, 2, 2), 3, 2, 2)
        assert d.f_r[:2].tolist() == [0, 1]
        assert d.f_c[:2].tolist() == [0, 2]
        ids = np.array([[0], [1], [2], [3]])
        d = build_dynamic_mapping(RoutingTable(ids, 4, 4), 1, 1, 3)
        assert d.f_c[:4].tolist() == [0, 1, 2, 0]

    def test_tables_are_frozen(self):
        d = build_dynamic_mapping(four_token_routing(), 2, 2, 1)
        with pytest.raises(ValueError):
            d.f_r[0] = 1


@st.composite
def routings(draw):
    R = draw(st.integers(1, 4))
    s_local = draw(st.integers(1, 6))
    E = draw(st.integers(1, 5))
    k = draw(st.integers(1, E))
    seed = draw(st.integers(0, 2**16))
    rng = np.random.default_rng(seed)
    routing = RoutingTable.random(rng, tokens=R * s_local, experts=E, topk=k, s_local=s_local)
    return routing, R, draw(st.integers(1, 5)), draw(st.integers(1, 3))


class TestDynamicProperties:
    @settings(max_examples=150, deadline=None)
    @given(routings())
    def test_partition_and_conservation(self, case):
        routing, R, tile_rows, C = case
        d = build_dynamic_mapping(routing, tile_rows, R, C)
        S, k = routing.num_tokens, routing.topk
        assert d.num_rows == S * k
        covered = np.zeros(S * k, dtype=int)
        for t in d.tiles():
            rng, rank, chan = dynamic_lookup(t, d)
            covered[rng.lo:rng.hi] += 1
            assert len(rng) <= tile_rows
            assert 0 <= rank < R and rank * C <= chan < (rank + 1) * C
            experts = {int(routing.topk_ids[d.row_token[i], d.row_slot[i]]) for i in range(*rng)}
            assert experts == {int(d.f_e[t])}
        assert np.all(covered == 1)
        # the inverse permutation restores token order exactly
        assert np.array_equal(d.row_token[d.inverse], np.repeat(np.arange(S)[:, None], k, axis=1))
        assert np.array_equal(d.row_slot[d.inverse], np.tile(np.arange(k), (S, 1)))

    @settings(max_examples=50, deadline=None)
    @given(routings())
    def test_deterministic(self, case):
        routing, R, tile_rows, C = case
        a = build_dynamic_mapping(routing, tile_rows, R, C)
        b = build_dynamic_mapping(routing, tile_rows, R, C)
        for name in ("f_s_low", "f_s_high", "f_r", "f_c", "f_e", "row_token", "inverse"):
            assert np.array_equal(getattr(a, name), getattr(b, name))

    @settings(max_examples=100, deadline=None)
    @given(routings())
    def test_grouping_order(self, case):
        routing, R, tile_rows, C = case
        d = build_dynamic_mapping(routing, tile_rows, R, C)
        experts = routing.topk_ids[d.row_token, d.row_slot]
        keys = list(zip(experts.tolist(), (d.row_token // routing.s_local).tolist(),
                        d.row_token.tolist()))
        assert keys == sorted(keys)
