"""Kernel configuration: problem sizes plus the decoupled design space."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from ..errors import ConfigError
from ..transfer import BINDINGS, TRANSFER_MODES

RING, ALL2ALL = "ring", "all2all"
TILE_ORDERS = (RING, ALL2ALL)
KINDS = ("ag_gemm", "gemm_rs", "ag_moe", "moe", "attention")


def tile_schedule(order: str, r: int, R: int) -> list[int]:
    """Order in which rank ``r`` visits the ranks' shards.

    ``ring`` walks downwards from ``r`` (the direction partial results travel
    in the ring reduce-scatter); ``all2all`` takes ``r`` first and then
    everyone else in ascending order.
    """
    if R < 1 or not 0 <= r < R:
        raise ConfigError(f"rank {r} outside world of {R}")
    if order == RING:
        return [(r - i) % R for i in range(R)]
    if order == ALL2ALL:
        return [r] + [q for q in range(R) if q != r]
    raise ConfigError(f"unknown tile order {order!r}, expected one of {TILE_ORDERS}")


@dataclass(frozen=True)
class KernelConfig:
    kind: str = "ag_gemm"
    world_size: int = 2
    channels: int = 1
    # GEMM problem: (M x K) @ (K x N)
    M: int = 64
    N: int = 32
    K: int = 32
    # MoE problem: tokens are the global count, intermediate is sharded over ranks
    tokens: int = 32
    hidden: int = 16
    intermediate: int = 32
    experts: int = 4
    topk: int = 2
    # attention problem
    heads: int = 2
    head_dim: int = 8
    seq: int = 64
    # decoupled tiling: communication rows vs. computation tile
    tm_comm: int = 8
    tm_comp: int = 16
    tn_comp: int = 16
    tk_comp: int = 16
    order: str = RING
    binding: str = "core"
    mode: str = "pull"
    comm_workers: int = 1
    comp_workers: int = 1
    integer_inputs: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown kernel kind {self.kind!r}, expected one of {KINDS}")
        if self.order not in TILE_ORDERS:
            raise ConfigError(f"unknown tile order {self.order!r}, expected one of {TILE_ORDERS}")
        if self.binding not in BINDINGS:
            raise ConfigError(f"unknown binding {self.binding!r}, expected one of {BINDINGS}")
        if self.mode not in TRANSFER_MODES:
            raise ConfigError(f"unknown transfer mode {self.mode!r}, expected one of {TRANSFER_MODES}")
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type in ("int",) and f.name != "seed":
                if isinstance(v, bool) or not isinstance(v, int):
                    raise ConfigError(f"{f.name} must be an integer, got {v!r}")
                if v < 1:
                    raise ConfigError(f"{f.name} must be >= 1, got {v}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        if not isinstance(self.integer_inputs, bool):
            raise ConfigError("integer_inputs must be a boolean")

    @classmethod
    def from_dict(cls, obj: dict) -> KernelConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ConfigError(f"unknown config fields: {', '.join(unknown)}")
        return cls(**obj)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> KernelConfig:
        return dataclasses.replace(self, **changes)
