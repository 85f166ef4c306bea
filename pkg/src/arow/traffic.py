"""Fixed-step world model of a four-way single-lane stop-controlled crossing.

Each approach is modelled as a straight line running from the start of its
approach segment, through the stop line (coordinate 0) and the conflict zone,
to the end of the exit segment. Positions are front-bumper coordinates along
that line. A vehicle that leaves an exit travels around a ring of arcs and
is re-inserted at the start of a randomly drawn approach, so the population
is constant.
"""

from __future__ import annotations

import enum
import heapq
import math
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple

from arow.agent import Intent, Pose, lane_fronts

LANE_NAMES = ("N", "E", "S", "W")


class CollisionDetected(Exception):
    pass


class ControllerMode(str, enum.Enum):
    AROW = "arow"
    ALLWAY = "allway"
    LIGHT = "light"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class KraussParams:
    v_max: float = 70.0
    accel: float = 2.6
    decel: float = 4.5
    sigma: float = 0.5
    min_gap: float = 2.5
    length: float = 5.0
    tau: float = 0.1

    def __post_init__(self):
        for name in ("v_max", "accel", "decel", "min_gap", "length", "tau"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.sigma <= 1.0:
            raise ValueError("sigma must lie in [0, 1]")


@dataclass(frozen=True)
class Geometry:
    approach: float = 51.2
    junction: float = 14.0
    exit: float = 51.2
    arc: float = 40.0
    ring_speed: float = 10.0
    arcs: int = 4

    @property
    def line_start(self) -> float:
        return -self.approach

    @property
    def line_end(self) -> float:
        return self.junction + self.exit


@dataclass
class VehicleBody:
    id: str
    lane: int
    s: float  # front bumper, stop line at 0
    speed: float = 0.0
    length: float = 5.0
    permitted: bool = False
    arrived_at: int | None = None
    entered: bool = False
    route: list[int] = field(default_factory=list)  # lanes visited

    @property
    def rear(self) -> float:
        return self.s - self.length

    @property
    def distance_to_stop(self) -> float:
        """Positive upstream of the stop line, negative inside the junction."""
        return -self.s


def safe_speed(gap: float, v_leader: float, p: KraussParams) -> float:
    bt = p.decel * p.tau
    return -bt + math.sqrt(bt * bt + v_leader * v_leader + 2.0 * p.decel * max(gap, 0.0))


def krauss_step(
    me: VehicleBody,
    leader: VehicleBody | None,
    stop_target: float | None,
    p: KraussParams,
    dt: float,
    rng: random.Random,
) -> float:
    """One Krauss speed update. ``stop_target`` is the distance to a stop line we may not pass."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    v_des = min(p.v_max, me.speed + p.accel * dt)
    if leader is not None:
        gap = leader.rear - me.s - p.min_gap
        v_des = min(v_des, safe_speed(gap, leader.speed, p))
    if stop_target is not None:
        v_des = min(v_des, safe_speed(stop_target, 0.0, p))
    return max(0.0, v_des - p.sigma * p.accel * dt * rng.random())


class JunctionEvent(NamedTuple):
    time_ms: int
    vehicle: str
    event: str  # stop_line_arrival | junction_entry | junction_exit
    lane: int


@dataclass
class JunctionOccupancy:
    occupants: dict[str, int] = field(default_factory=dict)  # id -> entry time
    crossings: list[tuple[str, int, int]] = field(default_factory=list)
    emptied_at: int | None = None  # last time the final occupant left

    def enter(self, vid: str, now: int) -> None:
        self.occupants[vid] = now

    def leave(self, vid: str, now: int) -> None:
        entry = self.occupants.pop(vid)
        if now <= entry:
            raise AssertionError(f"{vid} exited at {now} but entered at {entry}")
        self.crossings.append((vid, entry, now))
        if not self.occupants:
            self.emptied_at = now

    def __len__(self) -> int:
        return len(self.occupants)


# --------------------------------------------------------------------- controllers


class Candidate(NamedTuple):
    vehicle: str
    lane: int
    arrived_at: int  # ms


class AllwayDecision(NamedTuple):
    time_ms: int
    candidates: tuple[str, ...]
    granted: tuple[str, ...]


def right_of(lane: int) -> int:
    """Approach on the right-hand side of a driver coming from ``lane``."""
    return (lane + 1) % 4


def allway_controller(
    approaches: Iterable[Candidate],
    rng: random.Random,
    eps_tie: float = 0.5,
    p_go: float = 0.1,
    released_at: int | None = None,
) -> set[str]:
    """Pick who enters an empty junction among vehicles stopped at their lines.

    ``released_at`` is when the junction last emptied. Drivers who were
    already waiting then all see the same cue to go, so besides the near
    ties they may also start out of turn.
    """
    cands = sorted(approaches, key=lambda c: (c.arrived_at, c.lane))
    if not cands:
        return set()
    first = cands[0].arrived_at
    tied = [c for c in cands if c.arrived_at - first < eps_tie * 1000.0]
    lanes = {c.lane for c in tied}
    # a vehicle yields to anyone waiting on its right
    free = [c for c in tied if right_of(c.lane) not in lanes]
    winner = free[0] if free else tied[0]
    granted = {winner.vehicle}
    for c in cands:
        if c is winner:
            continue
        confused = c in tied or (released_at is not None and c.arrived_at < released_at)
        if confused and rng.random() < p_go:
            granted.add(c.vehicle)
    return granted


@dataclass(frozen=True)
class LightPlan:
    green_ns_ms: int = 42000
    green_ew_ms: int = 42000
    all_red_ms: int = 3000
    # split phasing serves one approach at a time (N, E, S, W); otherwise
    # opposing approaches share a green
    split: bool = True

    def __post_init__(self):
        if min(self.green_ns_ms, self.green_ew_ms) <= 0 or self.all_red_ms < 0:
            raise ValueError("cycle durations must be positive")

    @property
    def phases(self) -> tuple[tuple[int, tuple[int, ...]], ...]:
        """(green duration, lanes) per phase, each followed by an all-red interval."""
        if self.split:
            return (
                (self.green_ns_ms, (0,)),
                (self.green_ew_ms, (1,)),
                (self.green_ns_ms, (2,)),
                (self.green_ew_ms, (3,)),
            )
        return ((self.green_ns_ms, (0, 2)), (self.green_ew_ms, (1, 3)))

    @property
    def cycle_ms(self) -> int:
        return sum(g for g, _ in self.phases) + len(self.phases) * self.all_red_ms


def traffic_light_controller(now: int, cycle: LightPlan) -> tuple[bool, bool, bool, bool]:
    """Green flags for lanes N, E, S, W."""
    t = now % cycle.cycle_ms
    greens = [False] * 4
    for duration, lanes in cycle.phases:
        if t < duration:
            for k in lanes:
                greens[k] = True
            break
        t -= duration + cycle.all_red_ms
        if t < 0:
            break
    return tuple(greens)


class AmbiguityEvent(NamedTuple):
    time_ms: int
    group: tuple[str, ...]
    entrants: int


def detect_false_start(
    events: Iterable[JunctionEvent], decisions: Iterable[AllwayDecision]
) -> list[AmbiguityEvent]:
    """Count, per competing group, how many vehicles were in the junction together.

    A competing group is a controller decision taken with two or more
    vehicles waiting; lone arrivals cannot be ambiguous and are skipped.
    Only vehicles granted by the same decision are counted, and only when
    their occupancy intervals actually overlap with the first entrant's.
    """
    entries: dict[str, list[int]] = {}
    exits: dict[str, list[int]] = {}
    for ev in events:
        if ev.event == "junction_entry":
            entries.setdefault(ev.vehicle, []).append(ev.time_ms)
        elif ev.event == "junction_exit":
            exits.setdefault(ev.vehicle, []).append(ev.time_ms)

    def interval(vid: str, after: int) -> tuple[int, int] | None:
        for i, t in enumerate(entries.get(vid, ())):
            if t >= after:
                ex = exits.get(vid, ())
                return (t, ex[i] if i < len(ex) else math.inf)
        return None

    out = []
    for d in decisions:
        if len(d.candidates) < 2:
            continue
        spans = [iv for iv in (interval(v, d.time_ms) for v in d.granted) if iv is not None]
        if not spans:
            continue
        spans.sort()
        first_end = spans[0][1]
        together = 1 + sum(1 for a, _ in spans[1:] if a < first_end)
        out.append(AmbiguityEvent(d.time_ms, d.candidates, together))
    return out


# --------------------------------------------------------------------- world


IntentFn = Callable[[str], Intent]


@dataclass
class WorldConfig:
    mode: ControllerMode = ControllerMode.AROW
    krauss: KraussParams = field(default_factory=KraussParams)
    geometry: Geometry = field(default_factory=Geometry)
    dt_ms: int = 100
    eps_tie: float = 0.5
    p_go: float = 0.1
    light: LightPlan = field(default_factory=LightPlan)
    arrival_dist: float = 1.0
    arrival_speed: float = 0.1
    insert_spacing_ms: int = 1500


class World:
    """Mutable world state stepped by :func:`advance_world`."""

    def __init__(
        self,
        vehicle_ids: Iterable[str],
        config: WorldConfig | None = None,
        seed: int = 0,
        intent_fn: IntentFn | None = None,
    ):
        self.cfg = config or WorldConfig()
        self.time_ms = 0
        self.intent_fn = intent_fn
        self.vehicles: dict[str, VehicleBody] = {}
        self.lines: list[list[VehicleBody]] = [[] for _ in range(4)]
        self.queues: list[deque[str]] = [deque() for _ in range(4)]
        self._ring: list[tuple[int, int, str, int]] = []
        self._seq = 0
        self.occupancy = JunctionOccupancy()
        self.log: list[JunctionEvent] = []
        self.decisions: list[AllwayDecision] = []
        self.exited_now: list[str] = []
        self.defect_entries: set[tuple[str, int]] = set()
        self.rng_speed = random.Random(f"krauss:{seed}")
        self.rng_route = random.Random(f"route:{seed}")
        self.rng_allway = random.Random(f"allway:{seed}")
        for i, vid in enumerate(vehicle_ids):
            lane = i % 4
            self.vehicles[vid] = VehicleBody(vid, lane, self.cfg.geometry.line_start, length=self.cfg.krauss.length)
            self._to_ring(vid, lane, (i // 4) * self.cfg.insert_spacing_ms)

    # ------------------------------------------------------------------ views

    @property
    def population(self) -> int:
        return sum(len(line) for line in self.lines) + len(self._ring) + sum(len(q) for q in self.queues)

    def poses(self) -> dict[str, Pose]:
        return {v.id: Pose(v.lane, v.s, v.speed) for line in self.lines for v in line}

    def fronts(self, poses: dict[str, Pose]) -> dict[int, str]:
        return lane_fronts(poses)

    def in_zone(self, det_thresh: float) -> list[str]:
        upper = self.cfg.geometry.junction + self.cfg.krauss.length
        return [v.id for line in self.lines for v in line if -det_thresh <= v.s < upper]

    def front_waiting(self, lane: int) -> VehicleBody | None:
        for v in self.lines[lane]:
            if v.s <= 0.0 and not v.entered:
                return v
        return None

    # ------------------------------------------------------------------ ring

    def _to_ring(self, vid: str, lane: int, ready: int) -> None:
        self._seq += 1
        heapq.heappush(self._ring, (ready, self._seq, vid, lane))

    def _exit_line(self, v: VehicleBody, now: int) -> None:
        g = self.cfg.geometry
        target = self.rng_route.randrange(4)
        exit_side = (v.lane + 2) % 4
        arcs = (target - exit_side) % g.arcs + 1
        travel = int(round(arcs * g.arc / g.ring_speed * 1000.0))
        self._to_ring(v.id, target, now + travel)

    def _insert(self, now: int) -> None:
        while self._ring and self._ring[0][0] <= now:
            _, _, vid, lane = heapq.heappop(self._ring)
            self.queues[lane].append(vid)
        g, p = self.cfg.geometry, self.cfg.krauss
        for lane, q in enumerate(self.queues):
            if not q:
                continue
            line = self.lines[lane]
            speed = g.ring_speed
            if line:
                last = line[-1]
                gap = last.rear - g.line_start - p.min_gap
                if gap < 0:
                    continue
                speed = min(speed, safe_speed(gap, last.speed, p))
            v = self.vehicles[q.popleft()]
            v.lane, v.s, v.speed = lane, g.line_start, speed
            v.permitted, v.arrived_at, v.entered = False, None, False
            v.route.append(lane)
            line.append(v)

    # ------------------------------------------------------------------ permissions

    def _junction_busy(self) -> bool:
        if self.occupancy.occupants:
            return True
        return any(v.permitted and not v.entered for line in self.lines for v in line)

    def _grant(self, now: int) -> None:
        mode = self.cfg.mode
        fronts = [self.front_waiting(k) for k in range(4)]
        if mode is ControllerMode.LIGHT:
            greens = traffic_light_controller(now, self.cfg.light)
            b = self.cfg.krauss.decel
            for k, v in enumerate(fronts):
                if v is None:
                    continue
                # a vehicle that can no longer stop is committed
                v.permitted = greens[k] or v.speed * v.speed / (2 * b) > -v.s + 0.5
            return
        if mode is ControllerMode.AROW:
            waiting = []
            for v in fronts:
                if v is None or v.permitted:
                    continue
                intent = self.intent_fn(v.id) if self.intent_fn else Intent.MANUAL
                if intent is Intent.DEFECT:
                    v.permitted = True
                elif intent in (Intent.TURN, Intent.MANUAL) and v.arrived_at is not None:
                    waiting.append(v)
            if waiting and not self._junction_busy():
                first = min(waiting, key=lambda v: (v.arrived_at, v.id))
                first.permitted = True
            return
        cands = [Candidate(v.id, v.lane, v.arrived_at) for v in fronts if v is not None and v.arrived_at is not None]
        if cands and not self._junction_busy():
            granted = allway_controller(
                cands, self.rng_allway, self.cfg.eps_tie, self.cfg.p_go, self.occupancy.emptied_at
            )
            for vid in granted:
                self.vehicles[vid].permitted = True
            self.decisions.append(
                AllwayDecision(now, tuple(sorted(c.vehicle for c in cands)), tuple(sorted(granted)))
            )

    # ------------------------------------------------------------------ kinematics

    def step(self) -> None:
        cfg, p, g = self.cfg, self.cfg.krauss, self.cfg.geometry
        now = self.time_ms
        dt = cfg.dt_ms / 1000.0
        self.exited_now = []
        self._grant(now)
        after = now + cfg.dt_ms
        for line in self.lines:
            leader = None
            for v in line:
                crossing_allowed = v.entered or v.permitted
                stop_target = None if crossing_allowed else max(-v.s, 0.0)
                speed = krauss_step(v, leader, stop_target, p, dt, self.rng_speed)
                if leader is not None:
                    speed = min(speed, max(0.0, (leader.rear - v.s) / dt))
                if not crossing_allowed:
                    speed = min(speed, max(0.0, -v.s / dt))
                v.speed = speed
                v.s += speed * dt
                leader = v
        for line in self.lines:
            for a, b in zip(line, line[1:]):
                if b.s > a.rear + 1e-9:
                    raise CollisionDetected(f"{b.id} overlaps {a.id} on lane {b.lane} at {after} ms")
        self.time_ms = after
        self._events(after)
        self._insert(after)

    def _events(self, now: int) -> None:
        cfg, g = self.cfg, self.cfg.geometry
        for lane, line in enumerate(self.lines):
            keep = []
            for v in line:
                if v.arrived_at is None and not v.entered:
                    near = -v.s <= cfg.arrival_dist
                    if (near and (v.speed <= cfg.arrival_speed or v.permitted)) or v.s > 0.0:
                        v.arrived_at = now
                        self.log.append(JunctionEvent(now, v.id, "stop_line_arrival", lane))
                if not v.entered and v.s > 0.0:
                    v.entered = True
                    self.occupancy.enter(v.id, now)
                    if self.intent_fn is not None and self.intent_fn(v.id) is Intent.DEFECT:
                        self.defect_entries.add((v.id, now))
                    self.log.append(JunctionEvent(now, v.id, "junction_entry", lane))
                if v.entered and v.id in self.occupancy.occupants and v.rear >= g.junction:
                    self.occupancy.leave(v.id, now)
                    self.log.append(JunctionEvent(now, v.id, "junction_exit", lane))
                    self.exited_now.append(v.id)
                if v.rear >= g.line_end:
                    self._exit_line(v, now)
                else:
                    keep.append(v)
            self.lines[lane] = keep


def concurrent_entries(events: Iterable[JunctionEvent], exclude: set[tuple[str, int]] = frozenset()) -> list[int]:
    """For every entry into an empty junction, how many vehicles were inside before it emptied again.

    Entries listed in ``exclude`` (vehicle, entry time) are ignored.
    """
    inside: set[str] = set()
    skipped: set[str] = set()
    sizes: list[int] = []
    for ev in events:
        if ev.event == "junction_entry":
            if (ev.vehicle, ev.time_ms) in exclude:
                skipped.add(ev.vehicle)
                continue
            if not inside:
                sizes.append(0)
            inside.add(ev.vehicle)
            sizes[-1] += 1
        elif ev.event == "junction_exit":
            if ev.vehicle in skipped:
                skipped.discard(ev.vehicle)
            else:
                inside.discard(ev.vehicle)
    return sizes


def advance_world(world: World, dt_ms: int) -> World:
    if dt_ms != world.cfg.dt_ms:
        raise ValueError(f"step must equal the configured {world.cfg.dt_ms} ms")
    world.step()
    return world
