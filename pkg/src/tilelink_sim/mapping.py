"""Tile-centric mappings: tile id -> (row range, rank, channel).

Static mappings are the affine forms used for row-sharded tensors: a tile
of ``Tm`` rows belongs to the rank whose block of ``ceil(M/R)`` rows holds
it and to the channel whose block of ``ceil(M/(R*C))`` rows holds it.
Channels are numbered globally in ``[0, R*C)``; channel ``c`` belongs to
rank ``c // C``.

Dynamic mappings are lookup tables built at runtime from an MoE routing
decision.  Tables are allocated with a fixed capacity and entries that were
never filled hold ``SENTINEL``; reading one raises.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, MappingNotMaterialized

SENTINEL = -1


@dataclass(frozen=True)
class ShapeRange:
    """Half-open row interval ``[lo, hi)``."""

    lo: int
    hi: int

    def __post_init__(self):
        if not 0 <= self.lo < self.hi:
            raise DomainError(f"empty or negative range [{self.lo}, {self.hi})")

    @property
    def rows(self) -> slice:
        return slice(self.lo, self.hi)

    def __len__(self) -> int:
        return self.hi - self.lo

    def __iter__(self):
        yield self.lo
        yield self.hi


@dataclass(frozen=True)
class StaticMapping:
    """Affine mapping for a tensor of ``M`` rows sharded over ``R`` ranks."""

    M: int
    R: int
    C: int
    Tm: int
    Tn: int | None = None

    def __post_init__(self):
        if self.M < 1:
            raise ConfigError(f"M must be >= 1, got {self.M}")
        if self.R < 1 or self.C < 1 or self.Tm < 1:
            raise ConfigError(f"R, C, Tm must be >= 1, got R={self.R} C={self.C} Tm={self.Tm}")
        if self.Tn is not None and self.Tn < 1:
            raise ConfigError(f"Tn must be >= 1, got {self.Tn}")
        if self.m_per_rank // self.Tm == 0:
            raise ConfigError(
                f"tile rows Tm={self.Tm} exceed rows per rank {self.m_per_rank} "
                f"(M={self.M}, R={self.R})")
        if self.Tm > self.m_per_channel:
            raise ConfigError(
                f"tile rows Tm={self.Tm} exceed rows per channel {self.m_per_channel} "
                f"(M={self.M}, R={self.R}, C={self.C})")

    @property
    def m_per_rank(self) -> int:
        return math.ceil(self.M / self.R)

    @property
    def m_per_channel(self) -> int:
        return math.ceil(self.M / (self.R * self.C))

    @property
    def num_tiles(self) -> int:
        return math.ceil(self.M / self.Tm)

    @property
    def num_channels(self) -> int:
        return self.R * self.C

    @property
    def aligned(self) -> bool:
        """True when tiles nest in channels and channels nest in rank blocks.

        Only aligned mappings guarantee that a tile's rows belong to the rank
        and channel the affine formulas assign it to.
        """
        return (self.m_per_channel % self.Tm == 0
                and self.m_per_channel * self.C == self.m_per_rank)

    def tiles(self) -> range:
        return range(self.num_tiles)

    def rank_rows(self, rank: int) -> tuple[int, int]:
        """Rows owned by ``rank`` in the block layout (may be empty at the tail)."""
        lo = min(rank * self.m_per_rank, self.M)
        return lo, min(lo + self.m_per_rank, self.M)

    def tiles_of_rank(self, rank: int) -> list[int]:
        return [t for t in self.tiles() if static_src_rank(t, self) == rank]

    def channels_for_rows(self, lo: int, hi: int) -> tuple[int, ...]:
        """Global channels whose row blocks intersect ``[lo, hi)``."""
        if not 0 <= lo < hi <= self.M:
            raise DomainError(f"rows [{lo}, {hi}) outside [0, {self.M})")
        first = lo // self.m_per_channel
        last = min((hi - 1) // self.m_per_channel, self.num_channels - 1)
        return tuple(range(first, last + 1))

    def require_aligned(self) -> None:
        if not self.aligned:
            raise ConfigError(
                f"mapping M={self.M} R={self.R} C={self.C} Tm={self.Tm} is not aligned: "
                f"Tm must divide rows per channel ({self.m_per_channel}) and C channel "
                f"blocks must fill a rank block ({self.m_per_rank})")


def _check_tile(t: int, m: StaticMapping) -> None:
    if t < 0 or t * m.Tm >= m.M:
        raise DomainError(f"tile {t} outside grid of {m.num_tiles} tiles (M={m.M}, Tm={m.Tm})")


def static_shape_range(t: int, m: StaticMapping) -> ShapeRange:
    _check_tile(t, m)
    lo = t * m.Tm
    return ShapeRange(lo, min(lo + m.Tm, m.M))


def static_src_rank(t: int, m: StaticMapping) -> int:
    _check_tile(t, m)
    per_rank = m.m_per_rank // m.Tm
    if per_rank == 0:
        raise ConfigError(f"floor(M_per_rank / Tm) is 0 for M={m.M} R={m.R} Tm={m.Tm}")
    # ragged tails can push the quotient one past the last rank
    return min(t // per_rank, m.R - 1)


def static_channel(t: int, m: StaticMapping) -> int:
    _check_tile(t, m)
    per_channel = m.m_per_channel // m.Tm
    if per_channel == 0:
        raise ConfigError(f"floor(M_per_channel / Tm) is 0 for M={m.M} R={m.R} C={m.C} Tm={m.Tm}")
    return min(t // per_channel, m.num_channels - 1)


def channel_owner(channel: int, C: int) -> tuple[int, int]:
    """Resolve a global channel index to ``(owner rank, local channel)``."""
    if channel < 0:
        raise DomainError(f"negative channel {channel}")
    return divmod(channel, C)


@dataclass(frozen=True)
class RoutingTable:
    """Top-k expert choice for every token of every rank.

    Tokens are numbered globally; rank ``r`` owns tokens
    ``[r * s_local, (r + 1) * s_local)``.
    """

    topk_ids: np.ndarray
    num_experts: int
    s_local: int

    def __post_init__(self):
        ids = np.asarray(self.topk_ids, dtype=np.int64)
        if ids.ndim != 2:
            raise ConfigError(f"topk_ids must be (tokens, k), got shape {ids.shape}")
        if self.num_experts < 1:
            raise ConfigError("num_experts must be >= 1")
        if self.s_local < 1 and ids.shape[0] > 0:
            raise ConfigError("s_local must be >= 1")
        if ids.shape[0] and ids.shape[0] % self.s_local:
            raise ConfigError(f"{ids.shape[0]} tokens do not split into shards of {self.s_local}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.num_experts):
            raise DomainError(f"expert id outside [0, {self.num_experts})")
        for i, row in enumerate(ids):
            if len(set(row.tolist())) != len(row):
                raise ConfigError(f"token {i} routed to a repeated expert: {row.tolist()}")
        ids.setflags(write=False)
        object.__setattr__(self, "topk_ids", ids)

    @property
    def num_tokens(self) -> int:
        return self.topk_ids.shape[0]

    @property
    def topk(self) -> int:
        return self.topk_ids.shape[1]

    @property
    def world_size(self) -> int:
        return self.num_tokens // self.s_local if self.s_local else 0

    def token_rank(self, token: int) -> int:
        return token // self.s_local

    @classmethod
    def random(cls, rng: np.random.Generator, *, tokens: int, experts: int, topk: int,
               s_local: int) -> RoutingTable:
        if topk > experts:
            raise ConfigError(f"topk={topk} exceeds experts={experts}")
        scores = rng.random((tokens, experts))
        ids = np.argsort(-scores, axis=1, kind="stable")[:, :topk]
        return cls(ids, experts, s_local)


@dataclass(frozen=True)
class DynamicMapping:
    """Lookup tables produced by :func:`build_dynamic_mapping`.

    ``row_token``/``row_slot`` give the (token, top-k slot) behind every row
    of the grouped layout and ``inverse[token, slot]`` the grouped row.
    """

    f_s_low: np.ndarray
    f_s_high: np.ndarray
    f_r: np.ndarray
    f_c: np.ndarray
    f_e: np.ndarray
    num_filled: int
    R: int
    C: int
    tile_rows: int
    row_token: np.ndarray
    row_slot: np.ndarray
    inverse: np.ndarray
    s_local: int = field(default=1)

    @property
    def capacity(self) -> int:
        return len(self.f_s_low)

    @property
    def num_rows(self) -> int:
        return len(self.row_token)

    def tiles(self) -> range:
        return range(self.num_filled)

    def filled(self, t: int) -> bool:
        return 0 <= t < self.capacity and self.f_s_low[t] != SENTINEL

    def row_source_rank(self, row: int) -> int:
        return int(self.row_token[row]) // self.s_local

    def segments(self, t: int) -> list[tuple[int, int, int]]:
        """Maximal runs of rows in tile ``t`` from a single source rank.

        Returns ``(src_rank, lo, hi)`` triples in grouped-row coordinates.
        """
        rng, _, _ = dynamic_lookup(t, self)
        out: list[tuple[int, int, int]] = []
        start = rng.lo
        for row in range(rng.lo + 1, rng.hi + 1):
            if row == rng.hi or self.row_source_rank(row) != self.row_source_rank(start):
                out.append((self.row_source_rank(start), start, row))
                start = row
        return out


def build_dynamic_mapping(routing: RoutingTable, tile_rows: int, world: int,
                          channels: int) -> DynamicMapping:
    """Group routed rows by expert and cut each expert's rows into tiles.

    Rows are ordered by (expert, source rank, token).  A tile never spans two
    experts; the last tile of an expert may be short and experts without
    tokens produce no tile.  ``f_r`` is the rank owning most of a tile's
    tokens (lowest rank on ties); ``f_c`` cycles through that rank's
    channels in tile order.
    """
    if tile_rows < 1 or world < 1 or channels < 1:
        raise ConfigError(f"tile_rows, world, channels must be >= 1 "
                          f"(got {tile_rows}, {world}, {channels})")
    if routing.num_tokens and routing.world_size != world:
        raise ConfigError(f"routing covers {routing.world_size} ranks, world has {world}")
    ids = routing.topk_ids
    S, k, E = routing.num_tokens, routing.topk, routing.num_experts

    # (expert, token) order; token order already implies source-rank order
    flat_tokens = np.repeat(np.arange(S), k)
    flat_slots = np.tile(np.arange(k), S)
    flat_experts = ids.reshape(-1)
    order = np.lexsort((flat_tokens, flat_experts))
    row_token = flat_tokens[order]
    row_slot = flat_slots[order]
    row_expert = flat_experts[order]
    inverse = np.empty((S, k), dtype=np.int64)
    inverse[row_token, row_slot] = np.arange(S * k)

    capacity = math.ceil(S * k / tile_rows) + E
    tables = {name: np.full(capacity, SENTINEL, dtype=np.int64)
              for name in ("lo", "hi", "r", "c", "e")}
    per_rank_count = [0] * world
    t = 0
    counts = np.bincount(row_expert, minlength=E) if S else np.zeros(E, dtype=np.int64)
    start = 0
    for e in range(E):
        n = int(counts[e])
        for lo in range(start, start + n, tile_rows):
            hi = min(lo + tile_rows, start + n)
            src = row_token[lo:hi] // routing.s_local
            votes = np.bincount(src, minlength=world)
            owner = int(np.argmax(votes))  # argmax picks the lowest rank on ties
            tables["lo"][t], tables["hi"][t] = lo, hi
            tables["r"][t] = owner
            tables["c"][t] = owner * channels + per_rank_count[owner] % channels
            tables["e"][t] = e
            per_rank_count[owner] += 1
            t += 1
        start += n

    arrays = [tables["lo"], tables["hi"], tables["r"], tables["c"], tables["e"],
              row_token, row_slot, inverse]
    for a in arrays:
        a.setflags(write=False)
    return DynamicMapping(
        f_s_low=tables["lo"], f_s_high=tables["hi"], f_r=tables["r"], f_c=tables["c"],
        f_e=tables["e"], num_filled=t, R=world, C=channels, tile_rows=tile_rows,
        row_token=row_token, row_slot=row_slot, inverse=inverse,
        s_local=max(routing.s_local, 1))


def dynamic_lookup(t: int, d: DynamicMapping) -> tuple[ShapeRange, int, int]:
    if not 0 <= t < d.capacity:
        raise DomainError(f"tile {t} outside table capacity {d.capacity}")
    if d.f_s_low[t] == SENTINEL:
        raise MappingNotMaterialized(f"mapping not materialized for tile {t}")
    return (ShapeRange(int(d.f_s_low[t]), int(d.f_s_high[t])), int(d.f_r[t]), int(d.f_c[t]))
