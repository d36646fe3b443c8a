"""Sequential, phase-separated references for every overlapped kernel.

Each reference finishes the whole collective before computing and sums in
ascending rank order, so repeated calls are bit-identical.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import ShapeMismatch
from ..mapping import RoutingTable


def _gather(shards) -> np.ndarray:
    return np.concatenate([np.asarray(s) for s in shards], axis=0)


def reference_ag_gemm(a_shards, b) -> list[np.ndarray]:
    a = _gather(a_shards)
    if len(b) != len(a_shards):
        raise ShapeMismatch(f"{len(a_shards)} A shards but {len(b)} B matrices")
    return [a @ np.asarray(br) for br in b]


def reference_gemm_rs(a, b) -> list[np.ndarray]:
    R = len(a)
    if len(b) != R:
        raise ShapeMismatch(f"{R} A matrices but {len(b)} B matrices")
    total = np.asarray(a[0]) @ np.asarray(b[0])
    for r in range(1, R):
        total = total + np.asarray(a[r]) @ np.asarray(b[r])
    per_rank = math.ceil(total.shape[0] / R)
    return [total[min(r * per_rank, len(total)):min((r + 1) * per_rank, len(total))]
            for r in range(R)]


def reference_ag_moe(x_shards, w1_shards, routing: RoutingTable) -> list[np.ndarray]:
    """First expert GEMM in token order: ``(tokens, topk, I/R)`` per rank."""
    x = _gather(x_shards)
    ids = routing.topk_ids
    out = []
    for w1 in w1_shards:
        w1 = np.asarray(w1)
        y = np.zeros((x.shape[0], routing.topk, w1.shape[2]), dtype=x.dtype)
        for e in range(routing.num_experts):
            tok, slot = np.nonzero(ids == e)
            if len(tok):
                y[tok, slot] = x[tok] @ w1[e]
        out.append(y)
    return out


def reference_moe(x_shards, w1_shards, w2_shards, routing: RoutingTable) -> list[np.ndarray]:
    """Full expert MLP with uniform 1/k combine, reduce-scattered by token shard."""
    ids = routing.topk_ids
    k = routing.topk
    hidden = reference_ag_moe(x_shards, w1_shards, routing)
    partials = []
    for h, w2 in zip(hidden, w2_shards):
        w2 = np.asarray(w2)
        y = np.zeros((h.shape[0], k, w2.shape[2]), dtype=h.dtype)
        for e in range(routing.num_experts):
            tok, slot = np.nonzero(ids == e)
            if len(tok):
                y[tok, slot] = h[tok, slot] @ w2[e]
        combined = np.zeros((h.shape[0], w2.shape[2]), dtype=h.dtype)
        for j in range(k):
            combined += np.asarray(1.0 / k, dtype=h.dtype) * y[:, j]
        partials.append(combined)
    total = partials[0]
    for p in partials[1:]:
        total = total + p
    s = routing.s_local
    return [total[r * s:(r + 1) * s] for r in range(len(partials))]


def reference_attention(q, k_shards, v_shards) -> list[np.ndarray]:
    """Naive softmax attention of every rank's queries over the full context."""
    k = _gather(k_shards).astype(np.float64)
    v = _gather(v_shards).astype(np.float64)
    scale = 1.0 / math.sqrt(k.shape[-1])
    out = []
    for qr in q:
        qr = np.asarray(qr, dtype=np.float64)
        s = np.einsum("qhd,khd->hqk", qr, k) * scale
        s -= s.max(axis=-1, keepdims=True)
        p = np.exp(s)
        p /= p.sum(axis=-1, keepdims=True)
        out.append(np.einsum("hqk,khd->qhd", p, v))
    return out
