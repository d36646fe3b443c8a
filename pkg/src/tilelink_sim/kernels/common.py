"""Helpers shared by the kernels: world construction, tiling, inputs."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from ..errors import ConfigError, TileLinkError
from ..runtime import World
from .config import KernelConfig, tile_schedule

FULL, COMM_ONLY, COMP_ONLY = "full", "comm", "comp"
PHASES = (FULL, COMM_ONLY, COMP_ONLY)

DTYPE = np.float32


def world_for(cfg: KernelConfig, **kwargs) -> World:
    return World(cfg.world_size, cfg.channels, seed=cfg.seed, **kwargs)


def check_world(world: World, cfg: KernelConfig) -> None:
    if world.R != cfg.world_size or world.C != cfg.channels:
        raise ConfigError(f"world R={world.R} C={world.C} does not match config "
                          f"world_size={cfg.world_size} channels={cfg.channels}")


def check_phase(phase: str) -> None:
    if phase not in PHASES:
        raise ConfigError(f"unknown phase {phase!r}, expected one of {PHASES}")


def blocks(n: int, size: int) -> list[slice]:
    return [slice(lo, min(lo + size, n)) for lo in range(0, n, size)]


def tiled_matmul(a: np.ndarray, b: np.ndarray, tk: int) -> np.ndarray:
    """``a @ b`` accumulated over K blocks of ``tk``."""
    acc = np.zeros((a.shape[0], b.shape[1]), dtype=np.result_type(a, b))
    for kb in blocks(a.shape[1], tk):
        acc += a[:, kb] @ b[kb]
    return acc


def schedule_rank(order: str, r: int, R: int) -> dict[int, int]:
    """Position of every rank in rank ``r``'s visiting order."""
    return {q: i for i, q in enumerate(tile_schedule(order, r, R))}


def split(items: list, workers: int) -> list[list]:
    return [items[w::workers] for w in range(workers)]


def random_array(rng: np.random.Generator, shape, integer: bool) -> np.ndarray:
    if integer:
        return rng.integers(-2, 3, size=shape).astype(DTYPE)
    return rng.standard_normal(shape).astype(DTYPE)


def rel_error(out: np.ndarray, ref: np.ndarray) -> float:
    """Max absolute difference scaled by the largest reference magnitude."""
    out, ref = np.asarray(out, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if out.shape != ref.shape:
        return math.inf
    if out.size == 0:
        return 0.0
    diff = float(np.max(np.abs(out - ref)))
    scale = float(np.max(np.abs(ref)))
    if diff == 0.0:
        return 0.0
    return diff / scale if scale > 0 else math.inf


@dataclass
class KernelRun:
    """Per-rank outputs of one kernel launch plus what the trace checks need."""

    outputs: list[np.ndarray]
    elapsed: float
    world: World
    notify_indices: Callable[[int], set[int]] | None = None


def safe_indices(fn: Callable[[int], Iterable[int]]) -> Callable[[int], set[int]]:
    """Wrap a tile -> board indices function so unknown tiles map to nothing."""

    def wrapped(t: int) -> set[int]:
        try:
            return set(fn(t))
        except TileLinkError:
            return set()

    return wrapped


def bind(fn, arg):
    """Task body calling ``fn(ctx, arg)``."""
    return lambda ctx: fn(ctx, arg)
