"""Per-vehicle Driver Messenger System running the right-of-way protocol.

Each :class:`DmsAgent` owns one timed automaton and reacts to two kinds of
stimuli: messages handed over by the event loop (:meth:`DmsAgent.handle_message`)
and the passage of time (:meth:`DmsAgent.tick`). Agents never read each
other's state; everything they know about other vehicles comes from their
local object map (ground-truth positions refreshed at the BSM period) and
from the messages they hear.

Rounds that start in discovery share a common schedule anchored at the
earliest discovery entry among the group, so all members leave each stage
on the same tick. Every member's own clock is at most the anchor's clock,
which keeps everybody inside their location invariants.
"""

from __future__ import annotations

import enum
import logging
import random
from dataclasses import dataclass, field, replace
from typing import Iterable, NamedTuple

from arow.automaton import (
    ABORT_SYMBOL,
    NC_STAGES,
    RESTART_SYMBOL,
    Location,
    TimedAutomaton,
    TimingParams,
)
from arow.messaging import (
    Ack,
    AckKind,
    Announcement,
    Dim,
    DimKind,
    Discovery,
    Empty,
    Handover,
    Message,
    TurnSchedule,
    WaitRequest,
)

log = logging.getLogger(__name__)

L = Location


class UnknownSender(Exception):
    pass


class Role(str, enum.Enum):
    LEADING = "Leading"
    FOLLOWING = "Following"
    OUTSIDE = "Outside"


class Intent(str, enum.Enum):
    """What the agent asks the vehicle to do at the stop line."""

    HOLD = "hold"
    TURN = "turn"  # scheduled turn is current
    MANUAL = "manual"  # crossing without protocol assistance
    DEFECT = "defect"  # out-of-turn exit, ignores the stop line and occupancy


class Pose(NamedTuple):
    lane: int
    s: float  # front bumper along the lane, stop line at 0, negative upstream
    speed: float


@dataclass(frozen=True)
class ApplicationStatus:
    in_application: bool
    role: Role


@dataclass(frozen=True)
class ArrivalRecord:
    vehicle: str
    arrival_ts: int
    lane: int
    is_leading: bool


def lane_fronts(poses: dict[str, Pose], stop_line: float = 0.0) -> dict[int, str]:
    """Per lane, the vehicle closest to the stop line that has not crossed it."""
    best: dict[int, tuple[float, str]] = {}
    for vid, p in poses.items():
        if p.s <= stop_line and (p.lane not in best or p.s > best[p.lane][0]):
            best[p.lane] = (p.s, vid)
    return {lane: vid for lane, (_, vid) in best.items()}


@dataclass
class LocalObjectMap:
    """Host pose plus the last batch of neighbour BSMs.

    Positions are lane coordinates with the stop line at ``stop_line`` and
    upstream positions negative. A batch older than two BSM periods is
    dropped.
    """

    self_id: str
    self_pose: Pose | None = None
    poses: dict[str, Pose] = field(default_factory=dict)
    heard_at: int = 0
    stop_line: float = 0.0
    bsm_period_ms: int = 100
    _fronts: dict[int, str] | None = None
    _shared_fronts: bool = False

    def update_self(self, pose: Pose | None) -> None:
        self.self_pose = pose
        if not self._shared_fronts:
            self._fronts = None

    def hear(self, poses: dict[str, Pose], now: int, fronts: dict[int, str] | None = None) -> None:
        # the batch may be shared between agents, never mutate it
        self.poses = poses
        self.heard_at = now
        self._fronts = fronts
        self._shared_fronts = fronts is not None

    def evict(self, now: int) -> None:
        if self.poses and now - self.heard_at > 2 * self.bsm_period_ms:
            self.poses = {}
            self._fronts = None
            self._shared_fronts = False

    @property
    def neighbors(self) -> dict[str, Pose]:
        return {v: p for v, p in self.poses.items() if v != self.self_id}

    def pose_of(self, vehicle: str) -> Pose | None:
        if vehicle == self.self_id:
            return self.self_pose
        return self.poses.get(vehicle)

    def dist_to_stop(self, pose: Pose) -> float:
        return self.stop_line - pose.s

    def is_leading(self, vehicle: str) -> bool:
        pose = self.pose_of(vehicle)
        if pose is None:
            return False
        if self._fronts is None:
            merged = dict(self.poses)
            if self.self_pose is not None:
                merged[self.self_id] = self.self_pose
            self._fronts = lane_fronts(merged, self.stop_line)
        return self._fronts.get(pose.lane) == vehicle


def detect_application(m: LocalObjectMap, det_thresh: float) -> ApplicationStatus:
    pose = m.self_pose
    if pose is None:
        return ApplicationStatus(False, Role.OUTSIDE)
    dist = m.dist_to_stop(pose)
    if not 0.0 <= dist <= det_thresh:
        return ApplicationStatus(False, Role.OUTSIDE)
    role = Role.LEADING if m.is_leading(m.self_id) else Role.FOLLOWING
    return ApplicationStatus(True, role)


def select_arbitrator(candidates: Iterable[ArrivalRecord]) -> str:
    """Latest arrival wins; equal timestamps go to the lexicographically smallest id."""
    cands = list(candidates)
    if not cands:
        raise ValueError("no arbitrator candidates")
    latest = max(c.arrival_ts for c in cands)
    return min(c.vehicle for c in cands if c.arrival_ts == latest)


def schedule_turns(v_p: Iterable[ArrivalRecord], rng: random.Random) -> list[str]:
    """Earliest arrival first; equal timestamps are shuffled with ``rng``."""
    by_ts: dict[int, list[str]] = {}
    for rec in v_p:
        by_ts.setdefault(rec.arrival_ts, []).append(rec.vehicle)
    order: list[str] = []
    for ts in sorted(by_ts):
        ids = sorted(set(by_ts[ts]))
        if len(ids) > 1:
            rng.shuffle(ids)
        order.extend(ids)
    return order


def select_next_arbitrator(v_s: Iterable[ArrivalRecord]) -> str | None:
    v_s = list(v_s)
    return select_arbitrator(v_s) if v_s else None


def draw_compliance_plan(rng: random.Random, nc_prob: float) -> dict[Location, bool]:
    if not 0.0 <= nc_prob <= 1.0:
        raise ValueError("nc_prob must lie in [0, 1]")
    # fixed stage order keeps the draw sequence reproducible
    stages = (L.S2_2, L.S2_3, L.S3_1, L.S3_2)
    return {stage: rng.random() < nc_prob for stage in stages}


COMPLIANT_PLAN = {L.S2_2: False, L.S2_3: False, L.S3_1: False, L.S3_2: False}


@dataclass(frozen=True)
class ArbitratorLedger:
    v_p: frozenset[ArrivalRecord] = frozenset()
    v_s: frozenset[ArrivalRecord] = frozenset()
    schedule: tuple[str, ...] | None = None
    acks_pending: frozenset[str] = frozenset()

    def __post_init__(self):
        p = {r.vehicle for r in self.v_p}
        s = {r.vehicle for r in self.v_s}
        if p & s:
            raise ValueError(f"vehicles in both partitions: {sorted(p & s)}")
        if self.schedule is not None and not set(self.schedule) <= p:
            raise ValueError("schedule contains non-primary vehicles")

    @property
    def primary_ids(self) -> frozenset[str]:
        return frozenset(r.vehicle for r in self.v_p)

    @property
    def secondary_ids(self) -> frozenset[str]:
        return frozenset(r.vehicle for r in self.v_s)


class PartitionEvent(NamedTuple):
    kind: str  # "arrival" | "defection" | "exit"
    vehicle: str
    record: ArrivalRecord | None = None


def update_partition(ledger: ArbitratorLedger, event: PartitionEvent) -> ArbitratorLedger:
    if event.kind == "arrival":
        if event.vehicle in ledger.primary_ids or event.vehicle in ledger.secondary_ids:
            return ledger
        return replace(ledger, v_s=ledger.v_s | {event.record})
    if event.kind == "defection":
        return replace(
            ledger,
            v_p=frozenset(r for r in ledger.v_p if r.vehicle != event.vehicle),
            acks_pending=ledger.acks_pending - {event.vehicle},
            schedule=None if ledger.schedule is None else tuple(v for v in ledger.schedule if v != event.vehicle),
        )
    if event.kind == "exit":
        # round members stay in the primary set so the schedule keeps its history
        return replace(
            ledger,
            v_s=frozenset(r for r in ledger.v_s if r.vehicle != event.vehicle),
            acks_pending=ledger.acks_pending - {event.vehicle},
        )
    raise ValueError(f"unknown partition event {event.kind!r}")


@dataclass(frozen=True)
class AgentConfig:
    timing: TimingParams = field(default_factory=TimingParams)
    det_thresh: float = 10.0
    arow_thresh: int = 2
    nc_prob: float = 0.0
    dt_ms: int = 100


class AgentEvent(NamedTuple):
    time_ms: int
    vehicle: str
    event: str
    detail: str


class DmsAgent:
    def __init__(
        self,
        vehicle: str,
        config: AgentConfig,
        rng: random.Random,
        is_hv: bool = False,
        registry: frozenset[str] | None = None,
    ):
        self.id = vehicle
        self.cfg = config
        self.rng = rng
        self.is_hv = is_hv
        self.registry = registry
        self.automaton = TimedAutomaton(vehicle, config.timing)
        self.map = LocalObjectMap(vehicle)
        self.status = ApplicationStatus(False, Role.OUTSIDE)
        self.events: list[AgentEvent] = []
        self.intent = Intent.HOLD

        # per approach
        self.arrival_ts: int | None = None
        self.owes_exit_notice = False

        # discovery
        self.s1_entry = 0
        self.s1_peers: dict[str, Discovery] = {}

        # round
        self.round_base = 0
        self.stage_entered = 0
        self.members: dict[str, ArrivalRecord] = {}
        self.known_arbitrator: str | None = None
        self.ledger: ArbitratorLedger | None = None
        self.acks: set[str] = set()
        self.heard_announcement = False
        self.schedule: tuple[str, ...] | None = None
        self.my_turn: int | None = None
        self.exited: set[str] = set()
        self.plan: dict[Location, bool] = dict(COMPLIANT_PLAN)

        # waiting
        self.handover: Handover | None = None
        self.handover_from: str | None = None
        self.successor_ledger: ArbitratorLedger | None = None
        self._known_arrivals: dict[str, int] = {}

    # ------------------------------------------------------------------ helpers

    @property
    def location(self) -> Location:
        return self.automaton.location

    def _note(self, now: int, event: str, detail: str = "") -> None:
        self.events.append(AgentEvent(now, self.id, event, detail))

    def _fire(self, symbol: int, now: int) -> None:
        rec = self.automaton.fire(symbol, now)
        self.stage_entered = now
        self._note(now, "enter", f"{rec.source}->{rec.target} a{symbol}")

    def _dim(self, kind: DimKind, now: int, payload=None) -> Dim:
        return Dim(kind, self.id, now, Empty() if payload is None else payload)

    def _my_record(self) -> ArrivalRecord:
        pose = self.map.self_pose
        return ArrivalRecord(self.id, self.arrival_ts, pose.lane if pose else -1, self.map.is_leading(self.id))

    def _discovery(self, now: int) -> Dim:
        pose = self.map.self_pose
        return self._dim(
            DimKind.AROW1,
            now,
            Discovery(self.arrival_ts, self.s1_entry, pose.lane if pose else -1, self.map.is_leading(self.id)),
        )

    def _enter_discovery(self, now: int) -> list[Message]:
        self.s1_entry = now
        self.s1_peers = {}
        self._clear_round()
        self.intent = Intent.HOLD
        return [self._discovery(now)]

    def _clear_round(self) -> None:
        self.members = {}
        self.known_arbitrator = None
        self.ledger = None
        self.acks = set()
        self.heard_announcement = False
        self.schedule = None
        self.my_turn = None
        self.exited = set()
        self.plan = dict(COMPLIANT_PLAN)
        self.handover = None
        self.handover_from = None
        self.successor_ledger = None

    def _go_manual(self) -> None:
        self._clear_round()
        self.automaton.set_count(0)
        self.intent = Intent.MANUAL

    def _start_round(self, now: int, members: Iterable[ArrivalRecord], arbitrator: str, path: str) -> None:
        self.members = {r.vehicle: r for r in members}
        self.known_arbitrator = arbitrator
        self.exited = set()
        self.acks = set()
        self.heard_announcement = False
        self.schedule = None
        self.my_turn = None
        self.plan = dict(COMPLIANT_PLAN) if self.is_hv else draw_compliance_plan(self.rng, self.cfg.nc_prob)
        key = f"{self.round_base}:" + "|".join(sorted(self.members))
        self._note(now, "round_start", f"j={len(self.members) - 1};path={path};key={key};arb={arbitrator}")

    def _deadline(self, bound: int) -> int:
        return self.round_base + bound - self.cfg.dt_ms

    # ------------------------------------------------------------------ world hooks

    def observe(
        self,
        pose: Pose | None,
        now: int,
        bsms: dict[str, Pose] | None = None,
        fronts: dict[int, str] | None = None,
    ) -> None:
        """Refresh the local object map. ``bsms`` is None between BSM periods."""
        self.map.update_self(pose)
        if bsms is not None:
            self.map.hear(bsms, now, fronts)
        else:
            self.map.evict(now)
        self.status = detect_application(self.map, self.cfg.det_thresh)

    def on_junction_exit(self, now: int) -> list[Message]:
        out: list[Message] = []
        loc = self.location
        if loc is L.S4_1:
            out.append(self._dim(DimKind.AROW4_1, now, self._compose_handover()))
            self._fire(19, now)
        elif loc is L.S4_2:
            out.append(self._dim(DimKind.AROW4_2, now))
            self._fire(20, now)
        elif self.owes_exit_notice:
            kind = DimKind.AROW4_1 if self.ledger is not None else DimKind.AROW4_2
            payload = self._compose_handover() if kind is DimKind.AROW4_1 else None
            out.append(self._dim(kind, now, payload))
        elif loc is not L.S0:
            raise RuntimeError(f"{self.id} left the junction while in {loc}")
        self._note(now, "junction_exit", str(loc))
        self._clear_round()
        self.automaton.set_count(0)
        self.arrival_ts = None
        self.owes_exit_notice = False
        self.intent = Intent.HOLD
        return out

    def _compose_handover(self) -> Handover:
        ledger = self.ledger or ArbitratorLedger()
        waiting = sorted(ledger.v_s, key=lambda r: r.vehicle)
        promoted = [r for r in waiting if self.map.is_leading(r.vehicle)]
        nxt = select_next_arbitrator(promoted)
        outstanding = tuple(sorted(v for v in ledger.primary_ids if v != self.id and v not in self.exited))
        return Handover(
            nxt,
            tuple(r.vehicle for r in promoted),
            tuple(r.vehicle for r in waiting if r not in promoted),
            outstanding,
        )

    # ------------------------------------------------------------------ time

    def tick(self, now: int) -> list[Message]:
        loc = self.location
        out: list[Message] = []
        if loc is L.S0:
            # only vehicles that gave up on the protocol for this approach stay idle
            if self.intent is Intent.HOLD and self.status.in_application:
                if self.arrival_ts is None:
                    self.arrival_ts = now
                self._fire(1, now)
                out += self._enter_discovery(now)
            return out
        if loc is L.S1:
            anchor = min([self.s1_entry] + [d.s1_entry for d in self.s1_peers.values()])
            if now >= anchor + self.cfg.timing.t1 - self.cfg.dt_ms:
                out += self._close_discovery(now, anchor)
            return out
        if loc in NC_STAGES:
            if self.plan.get(loc) and now >= self.stage_entered + self.cfg.dt_ms:
                return self._defect(now)
            t = self.cfg.timing
            if loc in (L.S2_2, L.S2_3) and now >= self._deadline(t.t1 + t.t2):
                out += self._finish_announcement(now)
            elif loc in (L.S3_1, L.S3_2) and now >= self._deadline(t.t1 + t.t2 + t.t3):
                out += self._finish_scheduling(now)
            return out
        if loc in (L.S4_1, L.S4_2):
            if self.automaton.clock + self.cfg.dt_ms >= self.cfg.timing.bound(loc):
                self._note(now, "turn_timeout", "")
                self._fire(19 if loc is L.S4_1 else 20, now)
                self.owes_exit_notice = True
                self.intent = Intent.MANUAL
                return out
            if self.intent is not Intent.TURN and self.my_turn is not None:
                ahead = self.schedule[: self.my_turn]
                if all(v in self.exited for v in ahead):
                    self.intent = Intent.TURN
                    self._note(now, "turn", str(self.my_turn))
            return out
        if loc is L.SW:
            if self.automaton.clock + self.cfg.dt_ms >= self.cfg.timing.t_wait:
                self._note(now, "wait_timeout", "")
                self._fire(22, now)
                out += self._enter_discovery(now)
        return out

    def advance(self, dt_ms: int) -> None:
        self.automaton.advance(dt_ms)

    # ------------------------------------------------------------------ stage logic

    def _close_discovery(self, now: int, anchor: int) -> list[Message]:
        out: list[Message] = []
        peers = dict(self.s1_peers)
        group = {self.id: self._my_record()}
        for vid, d in peers.items():
            group[vid] = ArrivalRecord(vid, d.arrival_ts, d.lane, self.map.is_leading(vid))
        leaders = [r for r in group.values() if r.is_leading]
        followers = [r for r in group.values() if not r.is_leading]
        if len(leaders) < 2:
            self._fire(2, now)
            if group[self.id].is_leading:
                # nobody to negotiate with
                self._go_manual()
            else:
                # no arbitrator yet, rejoin discovery on the next step
                self._clear_round()
            return out
        arb = select_arbitrator(leaders)
        self.round_base = anchor
        if not group[self.id].is_leading:
            self._fire(3, now)
            self.known_arbitrator = arb
            return out
        self._fire(4, now)
        self._start_round(now, leaders, arb, "N4")
        if arb == self.id:
            self._fire(5, now)
            self.ledger = ArbitratorLedger(v_p=frozenset(leaders), v_s=frozenset(followers))
            out.append(self._dim(DimKind.AROW2, now, Announcement(self.id)))
            for r in sorted(followers, key=lambda r: r.vehicle):
                out.append(self._dim(DimKind.AROW_WAIT, now, WaitRequest(r.vehicle)))
        else:
            self._fire(6, now)
        return out

    def _finish_announcement(self, now: int) -> list[Message]:
        if self.location is L.S2_2:
            expected = self.ledger.primary_ids - {self.id}
            if not expected <= self.acks:
                self._note(now, "missing_ack2", "|".join(sorted(expected - self.acks)))
                return self._non_compliance(now)
            self._fire(9, now)
            return self._send_schedule(now)
        if not self.heard_announcement:
            self._note(now, "missing_arow2", self.known_arbitrator or "")
            return self._non_compliance(now)
        self._fire(12, now)
        return []

    def _send_schedule(self, now: int) -> list[Message]:
        order = tuple(schedule_turns(self.ledger.v_p, self.rng))
        self.ledger = replace(self.ledger, schedule=order, acks_pending=frozenset(order) - {self.id})
        self.schedule = order
        self.my_turn = order.index(self.id)
        self.acks = set()
        return [self._dim(DimKind.AROW3, now, TurnSchedule(order))]

    def _finish_scheduling(self, now: int) -> list[Message]:
        if self.location is L.S3_1:
            if not self.ledger.acks_pending <= self.acks:
                self._note(now, "missing_ack3", "|".join(sorted(self.ledger.acks_pending - self.acks)))
                return self._non_compliance(now)
            self._fire(15, now)
            return []
        if self.schedule is None:
            self._note(now, "missing_arow3", self.known_arbitrator or "")
            return self._non_compliance(now)
        self._fire(18, now)
        return []

    def _defect(self, now: int) -> list[Message]:
        stage = self.location
        self._note(now, "defect", str(stage))
        self._fire(ABORT_SYMBOL[stage], now)
        self._clear_round()
        self.automaton.set_count(0)
        self.intent = Intent.DEFECT
        return [self._dim(DimKind.AROW5, now)]

    def _non_compliance(self, now: int) -> list[Message]:
        """Restart discovery or give up, bounded by the retry threshold."""
        stage = self.location
        count = self.automaton.state.arow_count + 1
        if count <= self.cfg.arow_thresh:
            self._fire(RESTART_SYMBOL[stage], now)
            self.automaton.set_count(count)
            self._note(now, "restart", f"count={count}")
            return self._enter_discovery(now)
        self._fire(ABORT_SYMBOL[stage], now)
        self._note(now, "abort", f"count={count - 1}")
        self._go_manual()
        return []

    # ------------------------------------------------------------------ messages

    def handle_message(self, msg: Message, now: int) -> list[Message]:
        if self.registry is not None and msg.sender not in self.registry:
            self._note(now, "unknown_sender", msg.sender)
            raise UnknownSender(msg.sender)
        if isinstance(msg, Ack):
            return self._on_ack(msg, now)
        kind = msg.kind
        if kind is DimKind.AROW1:
            return self._on_discovery(msg, now)
        if kind is DimKind.AROW_WAIT:
            return self._on_wait(msg, now)
        if kind is DimKind.AROW2:
            if self.location is L.S2_3 and msg.sender == self.known_arbitrator:
                self.heard_announcement = True
                return [Ack(AckKind.ACK2, self.id, msg.sender, now)]
            return []
        if kind is DimKind.AROW3:
            if self.location is L.S3_2 and msg.sender == self.known_arbitrator:
                order = msg.payload.order
                if self.id in order:
                    self.schedule = order
                    self.my_turn = order.index(self.id)
                    return [Ack(AckKind.ACK3, self.id, msg.sender, now)]
            return []
        if kind in (DimKind.AROW4_1, DimKind.AROW4_2):
            return self._on_exit_notice(msg, now)
        if kind is DimKind.AROW5:
            return self._on_out_of_turn(msg, now)
        return []

    def _on_ack(self, ack: Ack, now: int) -> list[Message]:
        if ack.arbitrator != self.id:
            return []
        if ack.kind is AckKind.ACK2 and self.location is L.S2_2:
            self.acks.add(ack.sender)
        elif ack.kind is AckKind.ACK3 and self.location is L.S3_1:
            self.acks.add(ack.sender)
        return []

    def _active_ledger(self) -> str | None:
        if self.ledger is not None and self.location in (L.S2_2, L.S3_1, L.S4_1):
            return "ledger"
        if self.successor_ledger is not None and self.location is L.SW:
            return "successor_ledger"
        return None

    def _on_discovery(self, msg: Dim, now: int) -> list[Message]:
        d: Discovery = msg.payload
        self._known_arrivals[msg.sender] = d.arrival_ts
        out: list[Message] = []
        if self.location is L.S1:
            new = msg.sender not in self.s1_peers
            self.s1_peers[msg.sender] = d
            if new and d.s1_entry > self.s1_entry:
                out.append(self._discovery(now))
            return out
        which = self._active_ledger()
        if which is not None:
            ledger = getattr(self, which)
            if msg.sender in ledger.secondary_ids or msg.sender in ledger.primary_ids:
                return out
            rec = ArrivalRecord(msg.sender, d.arrival_ts, d.lane, d.is_leading)
            setattr(self, which, update_partition(ledger, PartitionEvent("arrival", msg.sender, rec)))
            self._note(now, "wait_sent", msg.sender)
            out.append(self._dim(DimKind.AROW_WAIT, now, WaitRequest(msg.sender)))
        return out

    def _on_wait(self, msg: Dim, now: int) -> list[Message]:
        target = msg.payload.addressed
        if self.location is not L.S1:
            return []
        if target == self.id:
            self._fire(3, now)
            self.known_arbitrator = msg.sender
        else:
            self.s1_peers.pop(target, None)
        return []

    def _on_exit_notice(self, msg: Dim, now: int) -> list[Message]:
        self.exited.add(msg.sender)
        if self.ledger is not None:
            self.ledger = update_partition(self.ledger, PartitionEvent("exit", msg.sender))
        loc = self.location
        if loc is L.SW:
            if msg.kind is DimKind.AROW4_1 and msg.sender == self.known_arbitrator:
                self.handover = msg.payload
                self.handover_from = msg.sender
                h = self.handover
                if h.next_arbitrator == self.id and len(h.promoted) >= 2:
                    self.successor_ledger = ArbitratorLedger()
            if self.handover is not None and all(v in self.exited for v in self.handover.outstanding):
                return self._release(now)
        return []

    def _release(self, now: int) -> list[Message]:
        h = self.handover
        gap_arrivals = self.successor_ledger.v_s if self.successor_ledger else frozenset()
        self.handover = None
        self.successor_ledger = None
        if self.id in h.promoted and len(h.promoted) >= 2:
            records = self._records_for(h.promoted)
            waiting = self._records_for(h.waiting) | gap_arrivals
            self.round_base = now - (self.cfg.timing.t1 + self.cfg.timing.t2)
            if h.next_arbitrator == self.id:
                self._fire(21, now)
                self._start_round(now, records, self.id, "N21")
                self.ledger = ArbitratorLedger(v_p=frozenset(records), v_s=frozenset(waiting))
                return self._send_schedule(now)
            self._fire(23, now)
            self._start_round(now, records, h.next_arbitrator, "N23")
            return []
        if len(h.promoted) >= 2:
            # keep waiting under the new arbitrator
            self.known_arbitrator = h.next_arbitrator
            self.exited = set()
            return []
        self._fire(24, now)
        self._go_manual()
        return []

    def _records_for(self, ids: Iterable[str]) -> frozenset[ArrivalRecord]:
        recs = set()
        for vid in ids:
            if vid == self.id:
                recs.add(self._my_record())
            else:
                pose = self.map.pose_of(vid) or Pose(-1, 0.0, 0.0)
                arrival = self._known_arrivals.get(vid, 0)
                recs.add(ArrivalRecord(vid, arrival, pose.lane, self.map.is_leading(vid)))
        return frozenset(recs)

    def _on_out_of_turn(self, msg: Dim, now: int) -> list[Message]:
        self.exited.add(msg.sender)
        loc = self.location
        if loc in NC_STAGES and msg.sender in self.members:
            self._note(now, "nc_observed", msg.sender)
            if self.ledger is not None:
                self.ledger = update_partition(self.ledger, PartitionEvent("defection", msg.sender))
            return self._non_compliance(now)
        if loc is L.SW:
            self._note(now, "nc_observed", msg.sender)
            self._fire(22, now)
            return self._enter_discovery(now)
        return []
