"""``tilelink-sim`` command line: verify, bench, trace and sweep kernel configs.

A config is one JSON object holding the :class:`KernelConfig` fields plus
optional run options (see :data:`RUN_FIELDS`).  Command-line flags override
the run options found in the file.

Exit codes: 0 ok, 1 numerical mismatch or kernel fault, 2 deadlock or
timeout, 3 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import sys
from dataclasses import dataclass, fields
from typing import Any, Sequence, TextIO

from .bench import measure_kernel
from .errors import ConfigError, DeadlockError, TileLinkError, WorldAborted
from .kernels.common import world_for
from .kernels.config import KernelConfig
from .kernels.driver import make_inputs, run_kernel, validate, verify
from .trace import NOISE_BUDGET, OverlapReport, Tracer, analyze_trace, write_jsonl

EXIT_OK, EXIT_MISMATCH, EXIT_DEADLOCK, EXIT_USAGE = 0, 1, 2, 3
DEFAULT_TIMEOUT_MS = 10_000


class UsageError(Exception):
    """Bad command line or config file."""


@dataclass(frozen=True)
class RunConfig:
    """A kernel config plus how to run it."""

    kernel: KernelConfig
    repeat: int = 5
    trace: str | None = None
    report: str | None = None
    race_check: bool = False
    inject_comm_delay_us: float = 0.0
    timeout_ms: float = DEFAULT_TIMEOUT_MS
    drop_notifies: int = 0

    def __post_init__(self):
        if isinstance(self.repeat, bool) or not isinstance(self.repeat, int) or self.repeat < 1:
            raise ConfigError(f"repeat must be a positive integer, got {self.repeat!r}")
        for name in ("trace", "report"):
            v = getattr(self, name)
            if v is not None and not isinstance(v, str):
                raise ConfigError(f"{name} must be a path string, got {v!r}")
        if not isinstance(self.race_check, bool):
            raise ConfigError("race_check must be a boolean")
        if not _is_number(self.inject_comm_delay_us) or self.inject_comm_delay_us < 0:
            raise ConfigError(f"inject_comm_delay_us must be >= 0, got {self.inject_comm_delay_us!r}")
        if not _is_number(self.timeout_ms) or self.timeout_ms <= 0:
            raise ConfigError(f"timeout_ms must be positive, got {self.timeout_ms!r}")
        if (isinstance(self.drop_notifies, bool) or not isinstance(self.drop_notifies, int)
                or self.drop_notifies < 0):
            raise ConfigError(f"drop_notifies must be a non-negative integer, got {self.drop_notifies!r}")

    @classmethod
    def from_dict(cls, obj: dict) -> RunConfig:
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        run = {k: v for k, v in obj.items() if k in RUN_FIELDS}
        kernel = KernelConfig.from_dict({k: v for k, v in obj.items() if k not in RUN_FIELDS})
        return cls(kernel, **run)

    def to_dict(self) -> dict:
        out = self.kernel.to_dict()
        out.update({name: getattr(self, name) for name in RUN_FIELDS})
        return out

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)

    def world(self, tracer: Tracer | None = None):
        world = world_for(self.kernel, timeout=self.timeout_ms / 1000.0, race_check=self.race_check,
                          comm_delay=self.comm_delay, tracer=tracer)
        if self.drop_notifies:
            world.drop_next_notifies(self.drop_notifies)
        return world

    @property
    def comm_delay(self) -> float:
        return self.inject_comm_delay_us * 1e-6


RUN_FIELDS = tuple(f.name for f in fields(RunConfig) if f.name != "kernel")


def _is_number(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


# -- config files ---------------------------------------------------------------

def load_document(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return doc


def expand_sweep(doc: dict) -> list[dict]:
    """Cartesian product over every list-valued field, in key order."""
    keys = [k for k, v in doc.items() if isinstance(v, list)]
    for k in keys:
        if not doc[k]:
            raise ConfigError(f"sweep field {k} has an empty list")
    points = []
    for combo in itertools.product(*(doc[k] for k in keys)):
        points.append({**doc, **dict(zip(keys, combo))})
    return points


def apply_flags(doc: dict, args: argparse.Namespace) -> dict:
    doc = dict(doc)
    flags = {"repeat": args.repeat, "trace": args.trace, "report": args.report,
             "inject_comm_delay_us": args.inject_comm_delay_us, "timeout_ms": args.timeout_ms,
             "drop_notifies": args.drop_notify}
    doc.update({k: v for k, v in flags.items() if v is not None})
    if args.race_check:
        doc["race_check"] = True
    return doc


def build_config(doc: dict) -> RunConfig:
    run = RunConfig.from_dict(doc)
    validate(run.kernel)
    return run


# -- commands ---------------------------------------------------------------------

def _emit(payload: Any, path: str | None, out: TextIO) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if path is None:
        print(text, file=out)
        return
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    except OSError as exc:
        raise UsageError(f"cannot write report {path}: {exc.strerror or exc}") from None


def cmd_verify(run: RunConfig, out: TextIO) -> int:
    result, _ = verify(run.kernel, world=run.world())
    if result.ok:
        print(f"ok: {run.kernel.kind} matches the reference, {result.describe()}", file=out)
        return EXIT_OK
    print(f"mismatch: {result.describe()}", file=out)
    return EXIT_MISMATCH


def _bench(run: RunConfig) -> OverlapReport:
    return measure_kernel(run.kernel, run.repeat, comm_delay=run.comm_delay,
                          timeout=run.timeout_ms / 1000.0)


def _over_budget(report: OverlapReport) -> str:
    return (f"overlapped time {report.overlap_s:.6f}s exceeds comp_only + comm_only "
            f"({report.comp_only_s + report.comm_only_s:.6f}s) by more than "
            f"{NOISE_BUDGET:.0%}")


def cmd_bench(run: RunConfig, out: TextIO) -> int:
    report = _bench(run)
    _emit(report.to_dict(), run.report, out)
    if not report.within_budget():
        print(f"error: {_over_budget(report)}", file=sys.stderr)
        return EXIT_MISMATCH
    return EXIT_OK


def cmd_trace(run: RunConfig, out: TextIO) -> int:
    if run.trace is None:
        raise UsageError("trace needs --trace PATH")
    try:
        fh = open(run.trace, "w", encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot write trace {run.trace}: {exc.strerror or exc}") from None
    tracer = Tracer()
    world = run.world(tracer)
    with fh:
        kernel_run = run_kernel(run.kernel, make_inputs(run.kernel), world=world)
        events = tracer.events()
        write_jsonl(events, fh)
    summary = analyze_trace(events, world.layout, kernel_run.notify_indices)
    print(json.dumps({"events": len(events), **summary.to_dict()}, indent=2), file=out)
    return EXIT_OK


def cmd_sweep(doc: dict, out: TextIO) -> int:
    points = [build_config(p) for p in expand_sweep(doc)]
    reports, failures = [], []
    for i, run in enumerate(points):
        entry: dict[str, Any] = {"config": run.kernel.to_dict()}
        try:
            result, _ = verify(run.kernel, world=run.world())
        except (DeadlockError, WorldAborted) as exc:
            entry["verify"] = {"ok": False, "error": f"deadlock: {exc}"}
            failures.append(i)
        else:
            entry["verify"] = {"ok": result.ok, "max_rel_error": result.max_rel_error,
                               "tolerance": result.tolerance}
            if result.ok:
                report = _bench(run)
                entry.update(report.to_dict())
                if not report.within_budget():
                    entry["verify"]["error"] = _over_budget(report)
                    failures.append(i)
            else:
                failures.append(i)
        reports.append(entry)
    _emit(reports, points[0].report if points else None, out)
    for i in failures:
        print(f"sweep point {i} failed: {json.dumps(reports[i]['verify'])}", file=sys.stderr)
    return EXIT_MISMATCH if failures else EXIT_OK


# -- entry point -------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tilelink-sim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in (("verify", "run a kernel and compare it with its sequential reference"),
                       ("bench", "measure the overlap ratio of a kernel"),
                       ("trace", "run a kernel with tracing and summarise the trace"),
                       ("sweep", "verify and bench every point of a config with value lists")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, metavar="PATH", help="JSON config file")
        p.add_argument("--repeat", type=int, metavar="N", help="runs per bench phase")
        p.add_argument("--trace", metavar="PATH", help="JSONL trace output")
        p.add_argument("--report", metavar="PATH", help="JSON report output (default stdout)")
        p.add_argument("--race-check", action="store_true", help="enable the race checker")
        p.add_argument("--inject-comm-delay-us", type=float, metavar="N",
                       help="latency added to every tile transfer")
        p.add_argument("--timeout-ms", type=float, metavar="N", help="deadlock timeout per wait")
        p.add_argument("--drop-notify", type=int, metavar="N",
                       help="fault injection: silently drop the first N notifies")
    return parser


def main(argv: Sequence[str] | None = None, out: TextIO | None = None) -> int:
    out = sys.stdout if out is None else out
    try:
        args = make_parser().parse_args(argv)
        doc = apply_flags(load_document(args.config), args)
        if args.command == "sweep":
            return cmd_sweep(doc, out)
        run = build_config(doc)
        command = {"verify": cmd_verify, "bench": cmd_bench, "trace": cmd_trace}[args.command]
        return command(run, out)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DeadlockError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEADLOCK
    except WorldAborted as exc:
        print(f"error: run aborted: {exc}", file=sys.stderr)
        return EXIT_DEADLOCK
    except TileLinkError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (OSError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
