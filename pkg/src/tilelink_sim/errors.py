"""Exception hierarchy shared by the simulator."""

from __future__ import annotations


class TileLinkError(Exception):
    """Base class for all simulator errors."""


class ConfigError(TileLinkError, ValueError):
    """Invalid world, mapping or kernel configuration."""


class DomainError(TileLinkError, IndexError):
    """A tile, rank or channel index outside its grid."""


class MappingNotMaterialized(TileLinkError, LookupError):
    """A dynamic lookup hit an entry that was never filled."""


class SignalError(TileLinkError, RuntimeError):
    """A barrier channel was driven past its registered expected count."""


class WorldAborted(TileLinkError, RuntimeError):
    """Raised in every blocked unit once another unit has aborted the world."""


class DeadlockError(TileLinkError, TimeoutError):
    """A wait exceeded the world timeout.

    ``blocked`` lists every unit that was waiting when the timeout fired as
    ``(rank, unit, region, channel, counter, expected)`` tuples.
    """

    def __init__(self, message: str, *, rank: int, unit: str, channel: int,
                 counter: int, expected: int, blocked: list[tuple] | None = None):
        super().__init__(message)
        self.rank = rank
        self.unit = unit
        self.channel = channel
        self.counter = counter
        self.expected = expected
        self.blocked = blocked or []


class RaceViolation(TileLinkError, RuntimeError):
    """The race checker saw a read of a region that was never published."""


class ShapeMismatch(TileLinkError, ValueError):
    """Data or region extents do not match the mapped tile."""
