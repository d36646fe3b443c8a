"""Outcome of each acceptance criterion, filled in by test_acceptance and printed at the end."""

RESULTS: dict[int, tuple[bool, str]] = {}


def record(number: int, ok: bool, line: str) -> None:
    RESULTS[number] = (ok, line)
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {line}")
