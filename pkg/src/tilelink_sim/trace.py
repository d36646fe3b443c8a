"""Event tracing, wait accounting and the overlap ratio."""

from __future__ import annotations

import json
import math
import threading
import time
from collections import defaultdict, deque
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, TextIO

from .runtime import ChannelLayout, UNITS

KINDS = ("tile_start", "tile_end", "wait_start", "wait_end", "notify", "copy_start", "copy_end")
_PAIRS = {"tile_end": "tile_start", "wait_end": "wait_start", "copy_end": "copy_start"}
_FIELDS = ("rank", "unit", "kind", "tile", "channel", "t_ns")


@dataclass(frozen=True)
class TraceEvent:
    rank: int
    unit: str
    kind: str
    tile: int | None
    channel: int | None
    t_ns: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))

    @classmethod
    def from_dict(cls, obj: dict) -> TraceEvent:
        if set(obj) != set(_FIELDS):
            raise ValueError(f"trace event fields must be exactly {_FIELDS}, got {sorted(obj)}")
        if obj["unit"] not in UNITS:
            raise ValueError(f"unknown unit {obj['unit']!r}")
        if obj["kind"] not in KINDS:
            raise ValueError(f"unknown event kind {obj['kind']!r}")
        return cls(**obj)


class Tracer:
    """Collects events into one append-only buffer per thread."""

    def __init__(self):
        self._local = threading.local()
        self._buffers: list[list[TraceEvent]] = []
        self._lock = threading.Lock()

    def record(self, rank: int, unit: str, kind: str, tile: int | None = None,
               channel: int | None = None, t_ns: int | None = None) -> None:
        buf = getattr(self._local, "buf", None)
        if buf is None:
            buf = self._local.buf = []
            with self._lock:
                self._buffers.append(buf)
        buf.append(TraceEvent(rank, unit, kind, tile, channel,
                              time.monotonic_ns() if t_ns is None else t_ns))

    def events(self) -> list[TraceEvent]:
        with self._lock:
            merged = [e for buf in self._buffers for e in buf]
        return sorted(merged, key=lambda e: e.t_ns)

    def clear(self) -> None:
        with self._lock:
            for buf in self._buffers:
                buf.clear()


def write_jsonl(events: Iterable[TraceEvent], fh: TextIO) -> int:
    n = 0
    for e in events:
        fh.write(e.to_json() + "\n")
        n += 1
    return n


def read_jsonl(fh: TextIO) -> list[TraceEvent]:
    return [TraceEvent.from_dict(json.loads(line)) for line in fh if line.strip()]


NOISE_BUDGET = 0.2


def overlap_ratio(comp_only: float, comm_only: float, overlap: float) -> float:
    """Fraction of communication time hidden by overlapping."""
    if not comm_only > 0:
        raise ValueError(f"comm_only must be positive, got {comm_only}")
    return (comp_only + comm_only - overlap) / comm_only


@dataclass
class OverlapReport:
    comp_only_s: float
    comm_only_s: float
    overlap_s: float
    ratio: float
    config: dict = field(default_factory=dict)

    @classmethod
    def from_times(cls, comp_only: float, comm_only: float, overlap: float,
                   config: dict | None = None) -> OverlapReport:
        for name, v in (("comp_only", comp_only), ("comm_only", comm_only), ("overlap", overlap)):
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{name} time must be positive and finite, got {v}")
        return cls(comp_only, comm_only, overlap, overlap_ratio(comp_only, comm_only, overlap),
                   dict(config or {}))

    def within_budget(self, budget: float = NOISE_BUDGET) -> bool:
        """Overlapped time may exceed the serial sum only by ``budget`` of it."""
        return self.overlap_s <= (self.comp_only_s + self.comm_only_s) * (1.0 + budget)

    def to_dict(self) -> dict:
        return {"comp_only_s": self.comp_only_s, "comm_only_s": self.comm_only_s,
                "overlap_s": self.overlap_s, "ratio": self.ratio, "config": self.config}


@dataclass
class UnitStats:
    busy_ns: int = 0
    wait_ns: int = 0
    tiles: int = 0
    copies: int = 0
    waits: int = 0
    notifies: int = 0


@dataclass
class TraceSummary:
    units: dict[tuple[int, str], UnitStats] = field(default_factory=dict)
    peer_waits: dict[int, int] = field(default_factory=dict)
    makespan_ns: int = 0
    critical_rank: int | None = None
    violations: list[str] = field(default_factory=list)

    def busy_ns(self, rank: int | None = None, unit: str | None = None) -> int:
        return sum(s.busy_ns for (r, u), s in self.units.items()
                   if (rank is None or r == rank) and (unit is None or u == unit))

    def wait_ns(self, rank: int | None = None, unit: str | None = None) -> int:
        return sum(s.wait_ns for (r, u), s in self.units.items()
                   if (rank is None or r == rank) and (unit is None or u == unit))

    def to_dict(self) -> dict:
        return {
            "units": [{"rank": r, "unit": u, **asdict(s)} for (r, u), s in sorted(self.units.items())],
            "peer_waits": {str(r): n for r, n in sorted(self.peer_waits.items())},
            "makespan_ns": self.makespan_ns,
            "critical_rank": self.critical_rank,
            "violations": list(self.violations),
        }


def analyze_trace(events: Iterable[TraceEvent], layout: ChannelLayout | None = None,
                  notify_channels: Callable[[int], Iterable[int]] | None = None) -> TraceSummary:
    """Busy/wait accounting per (rank, unit) plus structural checks.

    Start/end events are paired first-in first-out per (rank, unit, tile,
    channel).  ``layout`` enables peer-wait counting; ``notify_channels``
    maps a tile to the board indices its producer/consumer notifies may
    hit, and any other notify is reported.  Problems come back in
    ``violations`` rather than as exceptions.
    """
    summary = TraceSummary()
    events = list(events)
    if not events:
        return summary

    last_t: dict[tuple[int, str], int] = {}
    open_spans: dict[tuple, deque] = defaultdict(deque)
    copy_fifo: dict[int, deque] = defaultdict(deque)
    span_lo: dict[int, int] = {}
    span_hi: dict[int, int] = {}

    for i, e in enumerate(events):
        key = (e.rank, e.unit)
        stats = summary.units.setdefault(key, UnitStats())
        if e.t_ns < last_t.get(key, e.t_ns):
            summary.violations.append(f"event {i}: timestamp goes backwards on rank {e.rank} {e.unit}")
        last_t[key] = e.t_ns
        span_lo[e.rank] = min(span_lo.get(e.rank, e.t_ns), e.t_ns)
        span_hi[e.rank] = max(span_hi.get(e.rank, e.t_ns), e.t_ns)

        if e.kind == "notify":
            stats.notifies += 1
            if (notify_channels is not None and e.tile is not None and e.channel is not None
                    and (layout is None or layout.region(e.channel) == "pc")
                    and e.channel not in set(notify_channels(e.tile))):
                summary.violations.append(
                    f"event {i}: rank {e.rank} notified channel {e.channel} for tile {e.tile}, "
                    f"outside its mapping")
            continue

        if e.kind in _PAIRS.values():
            open_spans[(e.rank, e.unit, e.kind, e.tile, e.channel)].append((i, e.t_ns))
            if e.kind == "copy_start" and e.unit == "copy":
                copy_fifo[e.rank].append(e.tile)
            continue

        start_kind = _PAIRS[e.kind]
        pending = open_spans.get((e.rank, e.unit, start_kind, e.tile, e.channel))
        if not pending:
            summary.violations.append(
                f"event {i}: {e.kind} on rank {e.rank} {e.unit} tile={e.tile} channel={e.channel} "
                f"has no matching {start_kind}")
            continue
        _, t0 = pending.popleft()
        span = e.t_ns - t0
        if e.kind == "wait_end":
            stats.wait_ns += span
            stats.waits += 1
            if layout is not None and e.channel is not None and layout.region(e.channel) == "peer":
                summary.peer_waits[e.rank] = summary.peer_waits.get(e.rank, 0) + 1
        elif e.kind == "tile_end":
            stats.busy_ns += span
            stats.tiles += 1
        else:
            stats.busy_ns += span
            stats.copies += 1
            if e.unit == "copy":
                fifo = copy_fifo[e.rank]
                head = fifo.popleft() if fifo else None
                if head != e.tile:
                    summary.violations.append(
                        f"event {i}: copy engine of rank {e.rank} completed tile {e.tile} "
                        f"before tile {head}")

    for (rank, unit, kind, tile, channel), pending in open_spans.items():
        for i, _ in pending:
            summary.violations.append(
                f"event {i}: {kind} on rank {rank} {unit} tile={tile} channel={channel} never ended")

    spans = {r: span_hi[r] - span_lo[r] for r in span_lo}
    summary.critical_rank = max(spans, key=lambda r: (spans[r], -r))
    summary.makespan_ns = max(span_hi.values()) - min(span_lo.values())
    return summary
