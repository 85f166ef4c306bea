"""The right-of-way protocol as a single-clock timed automaton.

Locations, the 24 switches with their clock resets, the location invariants
and a small stepper. All clock arithmetic is done in integer milliseconds so
reset values and timeout comparisons are exact.

Symbol 0 is reserved as the no-op (pure delay) symbol and never appears as an
edge.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import NamedTuple


class Location(str, enum.Enum):
    SW = "SW"
    S0 = "S0"
    S1 = "S1"
    S2_1 = "S2_1"
    S2_2 = "S2_2"
    S2_3 = "S2_3"
    S3_1 = "S3_1"
    S3_2 = "S3_2"
    S4_1 = "S4_1"
    S4_2 = "S4_2"

    def __str__(self) -> str:
        return self.value


# Column/row order used by every matrix and frequency table.
LOCATION_ORDER: tuple[Location, ...] = tuple(Location)
LOCATION_INDEX = {loc: i for i, loc in enumerate(LOCATION_ORDER)}

INITIAL_LOCATION = Location.S0
NOOP_SYMBOL = 0
SYMBOLS = tuple(range(1, 25))

NC_STAGES = frozenset({Location.S2_2, Location.S2_3, Location.S3_1, Location.S3_2})


class Reset(str, enum.Enum):
    ZERO = "T:=0"
    T1_T2 = "T:=T1+T2"


@dataclass(frozen=True)
class TimingParams:
    """Clock constants, all in milliseconds."""

    t1: int = 2000
    t2: int = 2000
    t3: int = 2000
    t_turn: int = 30000
    t_wait: int = 60000

    def __post_init__(self):
        for name in ("t1", "t2", "t3", "t_turn", "t_wait"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @cached_property
    def _bounds(self) -> dict[Location, int]:
        s2 = self.t1 + self.t2
        s3 = s2 + self.t3
        return {
            Location.S1: self.t1,
            Location.S2_2: s2,
            Location.S2_3: s2,
            Location.S3_1: s3,
            Location.S3_2: s3,
            Location.S4_1: s3 + self.t_turn,
            Location.S4_2: s3 + self.t_turn,
            Location.SW: self.t_wait,
        }

    def bound(self, location: Location) -> int | None:
        """Exclusive upper bound on the clock while in ``location``."""
        return self._bounds.get(location)

    def reset_value(self, reset: Reset) -> int:
        return 0 if reset is Reset.ZERO else self.t1 + self.t2


@dataclass(frozen=True)
class Switch:
    source: Location
    symbol: int
    target: Location
    reset: Reset | None = None


class InvariantExpired(Exception):
    """Advancing the clock would break the current location's invariant."""


class IllegalSwitch(Exception):
    """No switch with the given symbol leaves the current location."""


_L = Location
_EDGES = (
    (1, _L.S0, _L.S1),
    (2, _L.S1, _L.S0),
    (3, _L.S1, _L.SW),
    (4, _L.S1, _L.S2_1),
    (5, _L.S2_1, _L.S2_2),
    (6, _L.S2_1, _L.S2_3),
    (7, _L.S2_2, _L.S1),
    (8, _L.S2_2, _L.S0),
    (9, _L.S2_2, _L.S3_1),
    (10, _L.S2_3, _L.S1),
    (11, _L.S2_3, _L.S0),
    (12, _L.S2_3, _L.S3_2),
    (13, _L.S3_1, _L.S1),
    (14, _L.S3_1, _L.S0),
    (15, _L.S3_1, _L.S4_1),
    (16, _L.S3_2, _L.S1),
    (17, _L.S3_2, _L.S0),
    (18, _L.S3_2, _L.S4_2),
    (19, _L.S4_1, _L.S0),
    (20, _L.S4_2, _L.S0),
    (21, _L.SW, _L.S3_1),
    (22, _L.SW, _L.S1),
    (23, _L.SW, _L.S3_2),
    (24, _L.SW, _L.S0),
)
_ZERO_RESETS = frozenset({1, 7, 10, 13, 16, 22})
_T1T2_RESETS = frozenset({21, 23})


def _reset_for(symbol: int) -> Reset | None:
    if symbol in _ZERO_RESETS:
        return Reset.ZERO
    if symbol in _T1T2_RESETS:
        return Reset.T1_T2
    return None


EDGES: dict[int, Switch] = {
    sym: Switch(src, sym, dst, _reset_for(sym)) for sym, src, dst in _EDGES
}
EDGE_BY_PAIR: dict[tuple[Location, Location], int] = {
    (sw.source, sw.target): sym for sym, sw in EDGES.items()
}

# Restart on non-compliance (back to S1) and abort (to S0), keyed by stage.
RESTART_SYMBOL = {_L.S2_2: 7, _L.S2_3: 10, _L.S3_1: 13, _L.S3_2: 16}
ABORT_SYMBOL = {_L.S2_2: 8, _L.S2_3: 11, _L.S3_1: 14, _L.S3_2: 17}
NC_ONLY_SYMBOLS = frozenset({7, 8, 10, 11, 13, 14, 16, 17, 22})


def build_edge_table() -> frozenset[Switch]:
    return frozenset(EDGES.values())


@dataclass(frozen=True)
class AutomatonState:
    location: Location = INITIAL_LOCATION
    clock: int = 0
    arow_count: int = 0


def step_clock(state: AutomatonState, delta: int, timing: TimingParams) -> AutomatonState:
    """Let ``delta`` ms pass without changing location."""
    if delta < 0:
        raise ValueError("delta must be non-negative")
    new_clock = state.clock + delta
    bound = timing.bound(state.location)
    if bound is not None and new_clock >= bound:
        raise InvariantExpired(
            f"{state.location}: clock {new_clock} ms reaches bound {bound} ms"
        )
    return AutomatonState(state.location, new_clock, state.arow_count)


def fire_switch(state: AutomatonState, symbol: int, timing: TimingParams) -> AutomatonState:
    sw = EDGES.get(symbol)
    if sw is None or sw.source is not state.location:
        raise IllegalSwitch(f"no switch a{symbol} out of {state.location}")
    clock = state.clock if sw.reset is None else timing.reset_value(sw.reset)
    return replace(state, location=sw.target, clock=clock)


def allowed_switches(state: AutomatonState) -> frozenset[int]:
    return frozenset(sym for sym, sw in EDGES.items() if sw.source is state.location)


class TransitionRecord(NamedTuple):
    time_ms: int
    vehicle: str
    source: Location
    symbol: int
    target: Location
    clock_after: int


@dataclass
class TimedAutomaton:
    """Mutable holder around the pure state functions, keeping a transition log."""

    vehicle: str
    timing: TimingParams = field(default_factory=TimingParams)
    state: AutomatonState = field(default_factory=AutomatonState)
    log: list[TransitionRecord] = field(default_factory=list)

    @property
    def location(self) -> Location:
        return self.state.location

    @property
    def clock(self) -> int:
        return self.state.clock

    def fire(self, symbol: int, now: int) -> TransitionRecord:
        source = self.state.location
        self.state = fire_switch(self.state, symbol, self.timing)
        rec = TransitionRecord(now, self.vehicle, source, symbol, self.state.location, self.state.clock)
        self.log.append(rec)
        return rec

    def advance(self, delta: int) -> None:
        self.state = step_clock(self.state, delta, self.timing)

    def set_count(self, count: int) -> None:
        self.state = replace(self.state, arow_count=count)
