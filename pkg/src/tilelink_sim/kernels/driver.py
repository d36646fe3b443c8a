"""Uniform entry points over every kernel kind: inputs, runs, references, checks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np

from ..mapping import RoutingTable
from ..runtime import World
from . import reference as ref
from .ag_gemm import ag_gemm, ag_gemm_mapping
from .attention import ag_kv_attention, kv_mapping
from .common import FULL, KernelRun, random_array, rel_error
from .config import KernelConfig
from .gemm_rs import gemm_ring_rs, gemm_rs_mapping
from .moe import ag_moe, moe, token_mapping

Inputs = dict[str, Any]

_MAPPINGS = {"ag_gemm": ag_gemm_mapping, "gemm_rs": gemm_rs_mapping, "ag_moe": token_mapping,
             "moe": token_mapping, "attention": kv_mapping}


def validate(cfg: KernelConfig) -> None:
    """Raise :class:`~tilelink_sim.errors.ConfigError` when ``cfg`` cannot run on its kernel."""
    _MAPPINGS[cfg.kind](cfg)


def make_inputs(cfg: KernelConfig) -> Inputs:
    """Seeded random inputs for ``cfg.kind`` (values in ``{-2..2}`` when integer)."""
    validate(cfg)
    rng = np.random.default_rng(cfg.seed)
    R, integer = cfg.world_size, cfg.integer_inputs

    def draw(shape) -> np.ndarray:
        return random_array(rng, shape, integer)

    if cfg.kind == "ag_gemm":
        m = ag_gemm_mapping(cfg)
        sizes = [hi - lo for lo, hi in map(m.rank_rows, range(R))]
        return {"a": [draw((n, cfg.K)) for n in sizes], "b": [draw((cfg.K, cfg.N)) for _ in range(R)]}
    if cfg.kind == "gemm_rs":
        return {"a": [draw((cfg.M, cfg.K)) for _ in range(R)],
                "b": [draw((cfg.K, cfg.N)) for _ in range(R)]}
    if cfg.kind in ("ag_moe", "moe"):
        s_local, i_local = cfg.tokens // R, cfg.intermediate // R
        routing = RoutingTable.random(rng, tokens=cfg.tokens, experts=cfg.experts, topk=cfg.topk,
                                      s_local=s_local)
        out = {"x": [draw((s_local, cfg.hidden)) for _ in range(R)],
               "w1": [draw((cfg.experts, cfg.hidden, i_local)) for _ in range(R)],
               "routing": routing}
        if cfg.kind == "moe":
            out["w2"] = [draw((cfg.experts, i_local, cfg.hidden)) for _ in range(R)]
        return out
    shape = (cfg.seq // R, cfg.heads, cfg.head_dim)
    return {"q": [draw(shape) for _ in range(R)], "k": [draw(shape) for _ in range(R)],
            "v": [draw(shape) for _ in range(R)]}


def run_kernel(cfg: KernelConfig, inputs: Inputs, *, world: World | None = None,
               phase: str = FULL) -> KernelRun:
    """Run the overlapped kernel; outputs are laid out like :func:`reference`'s."""
    kind = cfg.kind
    if kind == "ag_gemm":
        return ag_gemm(cfg, inputs["a"], inputs["b"], world=world, phase=phase)
    if kind == "gemm_rs":
        return gemm_ring_rs(cfg, inputs["a"], inputs["b"], world=world, phase=phase)
    if kind == "ag_moe":
        run = ag_moe(cfg, inputs["x"], inputs["w1"], inputs["routing"], world=world, phase=phase)
        token_order = [run.unrouted(r) for r in range(cfg.world_size)]
        return KernelRun(token_order, run.elapsed, run.world, run.notify_indices)
    if kind == "moe":
        return moe(cfg, inputs["x"], inputs["w1"], inputs["w2"], inputs["routing"], world=world,
                   phase=phase)
    return ag_kv_attention(cfg, inputs["q"], inputs["k"], inputs["v"], world=world, phase=phase)


def reference(cfg: KernelConfig, inputs: Inputs) -> list[np.ndarray]:
    kind = cfg.kind
    if kind == "ag_gemm":
        return ref.reference_ag_gemm(inputs["a"], inputs["b"])
    if kind == "gemm_rs":
        return ref.reference_gemm_rs(inputs["a"], inputs["b"])
    if kind == "ag_moe":
        return ref.reference_ag_moe(inputs["x"], inputs["w1"], inputs["routing"])
    if kind == "moe":
        return ref.reference_moe(inputs["x"], inputs["w1"], inputs["w2"], inputs["routing"])
    return ref.reference_attention(inputs["q"], inputs["k"], inputs["v"])


def tolerance(cfg: KernelConfig) -> float:
    """Relative tolerance: exact for integer inputs on paths without rounding."""
    if cfg.kind == "attention":
        return 1e-4
    if cfg.integer_inputs and cfg.kind in ("ag_gemm", "gemm_rs", "ag_moe"):
        return 0.0
    return 1e-5


@dataclass(frozen=True)
class Comparison:
    ok: bool
    max_rel_error: float
    tolerance: float
    first_mismatch: tuple[int, tuple[int, ...]] | None = None

    def describe(self) -> str:
        text = f"max relative error {self.max_rel_error:.3e} (tolerance {self.tolerance:g})"
        if self.first_mismatch is not None:
            rank, index = self.first_mismatch
            text += f", first mismatch on rank {rank} at index {list(index)}"
        return text


def compare(outputs, expected, tol: float) -> Comparison:
    """Compare per-rank outputs; the error is max |diff| over the largest |reference|."""
    if len(outputs) != len(expected):
        return Comparison(False, math.inf, tol, (0, ()))
    worst, first = 0.0, None
    for rank, (out, want) in enumerate(zip(outputs, expected)):
        err = rel_error(out, want)
        worst = max(worst, err)
        if err > tol and first is None:
            if np.shape(out) != np.shape(want):
                first = (rank, ())
                continue
            want64 = np.asarray(want, dtype=np.float64)
            scale = float(np.max(np.abs(want64))) if want64.size else 0.0
            bad = np.abs(np.asarray(out, dtype=np.float64) - want64) > tol * scale
            first = (rank, tuple(int(i) for i in np.argwhere(bad)[0]))
    return Comparison(first is None, worst, tol, first)


def verify(cfg: KernelConfig, *, world: World | None = None,
           inputs: Inputs | None = None) -> tuple[Comparison, KernelRun]:
    inputs = make_inputs(cfg) if inputs is None else inputs
    run = run_kernel(cfg, inputs, world=world)
    return compare(run.outputs, reference(cfg, inputs), tolerance(cfg)), run

