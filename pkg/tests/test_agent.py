import random
from collections import Counter

import pytest
from hypothesis import given
from hypothesis import strategies as st

from arow.agent import (
    COMPLIANT_PLAN,
    AgentConfig,
    ArbitratorLedger,
    ArrivalRecord,
    DmsAgent,
    Intent,
    LocalObjectMap,
    PartitionEvent,
    Pose,
    Role,
    detect_application,
    draw_compliance_plan,
    lane_fronts,
    schedule_turns,
    select_arbitrator,
    select_next_arbitrator,
    update_partition,
)
from arow.automaton import Location as L
from arow.messaging import Announcement, Dim, DimKind, Empty, MessageBus


def rec(v, ts, lane=0):
    return ArrivalRecord(v, ts, lane, True)


def omap(me, pose, others=None):
    m = LocalObjectMap(me)
    m.update_self(pose)
    m.hear(dict(others or {}), 0)
    return m


# ---------------------------------------------------------------- application detection


def test_detect_application_leading_inside():
    st_ = detect_application(omap("A", Pose(0, -9.5, 3.0)), 10.0)
    assert st_.in_application and st_.role is Role.LEADING


def test_detect_application_boundary_included():
    assert detect_application(omap("A", Pose(0, -10.0, 3.0)), 10.0).in_application
    assert not detect_application(omap("A", Pose(0, -10.1, 3.0)), 10.0).in_application


def test_detect_application_following():
    st_ = detect_application(omap("A", Pose(0, -9.0, 1.0), {"B": Pose(0, -4.0, 0.0)}), 10.0)
    assert st_.in_application and st_.role is Role.FOLLOWING


def test_lane_fronts_ignores_crossed():
    poses = {"A": Pose(0, 2.0, 5.0), "B": Pose(0, -6.0, 0.0), "C": Pose(1, -20.0, 8.0)}
    assert lane_fronts(poses) == {0: "B", 1: "C"}


def test_stale_bsms_evicted():
    m = omap("A", Pose(0, -5.0, 0.0), {"B": Pose(1, -3.0, 0.0)})
    m.evict(200)
    assert m.neighbors
    m.evict(201)
    assert not m.neighbors


# ---------------------------------------------------------------- heuristics


def test_select_arbitrator_examples():
    assert select_arbitrator([rec("A", 1000), rec("B", 1800)]) == "B"
    assert select_arbitrator([rec("CAV12", 2000), rec("CAV07", 2000)]) == "CAV07"
    assert select_arbitrator([rec("A", 5)]) == "A"
    with pytest.raises(ValueError):
        select_arbitrator([])


def test_schedule_turns_examples():
    rng = random.Random(0)
    assert schedule_turns([rec("A", 1000), rec("B", 400), rec("C", 700)], rng) == ["B", "C", "A"]
    assert schedule_turns([rec("A", 1000)], rng) == ["A"]
    tie = [rec("A", 1000), rec("B", 1000)]
    first = schedule_turns(tie, random.Random(9))
    assert sorted(first) == ["A", "B"]
    assert schedule_turns(tie, random.Random(9)) == first
    orders = {tuple(schedule_turns(tie, random.Random(s))) for s in range(20)}
    assert orders == {("A", "B"), ("B", "A")}


def test_select_next_arbitrator_examples():
    assert select_next_arbitrator([]) is None
    assert select_next_arbitrator([rec("D", 5100), rec("E", 6300)]) == "E"
    assert select_next_arbitrator([rec("D", 5000)]) == "D"


def test_compliance_plan_extremes():
    assert draw_compliance_plan(random.Random(1), 0.0) == COMPLIANT_PLAN
    assert all(draw_compliance_plan(random.Random(1), 1.0).values())
    with pytest.raises(ValueError):
        draw_compliance_plan(random.Random(1), 1.5)


def test_compliance_plan_rate():
    rng = random.Random(2024)
    hits = Counter()
    n = 100_000
    for _ in range(n):
        for stage, bad in draw_compliance_plan(rng, 0.25).items():
            hits[stage] += bad
    for stage in (L.S2_2, L.S2_3, L.S3_1, L.S3_2):
        assert abs(hits[stage] / n - 0.25) <= 0.005


# ---------------------------------------------------------------- ledger


def test_ledger_rejects_overlap_and_foreign_schedule():
    with pytest.raises(ValueError):
        ArbitratorLedger(v_p=frozenset({rec("A", 1)}), v_s=frozenset({rec("A", 1)}))
    with pytest.raises(ValueError):
        ArbitratorLedger(v_p=frozenset({rec("A", 1)}), schedule=("A", "B"))


def test_partition_events():
    led = ArbitratorLedger(v_p=frozenset({rec("A", 1), rec("M", 2)}), schedule=("A", "M"))
    led = update_partition(led, PartitionEvent("arrival", "N", rec("N", 9)))
    assert led.secondary_ids == {"N"}
    led = update_partition(led, PartitionEvent("defection", "M"))
    assert led.primary_ids == {"A"} and led.schedule == ("A",)
    led = update_partition(led, PartitionEvent("exit", "N"))
    assert not led.secondary_ids
    with pytest.raises(ValueError):
        update_partition(led, PartitionEvent("teleport", "A"))


@given(st.lists(st.tuples(st.sampled_from(["arrival", "defection", "exit"]), st.sampled_from("ABCDEFG")), max_size=40))
def test_partition_stays_disjoint(events):
    led = ArbitratorLedger(v_p=frozenset({rec("A", 1), rec("B", 2), rec("C", 3)}), schedule=("A", "B", "C"))
    for kind, v in events:
        led = update_partition(led, PartitionEvent(kind, v, rec(v, 10) if kind == "arrival" else None))
        assert not led.primary_ids & led.secondary_ids
        assert set(led.schedule) <= led.primary_ids


# ---------------------------------------------------------------- scripted agents


class Harness:
    """Agents parked at their stop lines, talking over a zero-latency bus."""

    def __init__(self, lanes: dict[str, int], cfg: AgentConfig | None = None, hv: str | None = None):
        self.cfg = cfg or AgentConfig()
        self.bus = MessageBus()
        self.agents = {}
        self.poses = {v: Pose(lane, -0.5, 0.0) for v, lane in lanes.items()}
        for v in lanes:
            self.agents[v] = DmsAgent(v, self.cfg, random.Random(v), is_hv=(v == hv))
            self.bus.register(v)
        self.now = 0

    def step(self):
        now = self.now
        for v, a in self.agents.items():
            a.observe(self.poses.get(v), now, dict(self.poses))
        for a in self.agents.values():
            for m in a.tick(now):
                self.bus.broadcast(m, now)
        self.pump(now)
        for a in self.agents.values():
            a.advance(self.cfg.dt_ms)
        self.now += self.cfg.dt_ms

    def pump(self, now):
        while self.bus.next_due() is not None and self.bus.next_due() <= now:
            for r, m in self.bus.deliver(now, list(self.poses)):
                for out in self.agents[r].handle_message(m, now):
                    self.bus.broadcast(out, now)

    def run(self, ms):
        for _ in range(ms // self.cfg.dt_ms):
            self.step()

    def symbols(self, v):
        return [r.symbol for r in self.agents[v].automaton.log]


def test_lone_vehicle_skips_protocol():
    h = Harness({"A": 0})
    h.run(2500)
    a = h.agents["A"]
    assert h.symbols("A") == [1, 2]
    assert a.location is L.S0 and a.intent is Intent.MANUAL


def test_three_vehicles_elect_latest_arrival():
    h = Harness({"A": 0, "B": 1, "C": 2})
    h.run(2000)
    # equal arrival stamps: smallest id wins
    assert h.symbols("A") == [1, 4, 5]
    assert h.symbols("B") == [1, 4, 6]
    assert h.symbols("C") == [1, 4, 6]
    assert {h.agents[v].known_arbitrator for v in "ABC"} == {"A"}


def test_full_round_reaches_turns():
    h = Harness({"A": 0, "B": 1, "C": 2})
    h.run(6000)
    assert h.agents["A"].location is L.S4_1
    assert {h.agents[v].location for v in "BC"} == {L.S4_2}
    turns = sorted((h.agents[v].my_turn, v) for v in "ABC")
    assert [t for t, _ in turns] == [0, 1, 2]
    assert h.agents["A"].ledger.schedule == tuple(v for _, v in turns)


def test_follower_ack2_without_moving():
    h = Harness({"A": 0, "B": 1})
    h.run(2000)
    b = h.agents["B"]
    assert b.location is L.S2_3
    out = b.handle_message(Dim(DimKind.AROW2, "A", h.now, Announcement("A")), h.now)
    assert [str(m.kind) for m in out] == ["ACK2"] and b.location is L.S2_3


def test_threshold_reached_aborts_to_s0():
    h = Harness({"A": 0, "B": 1})
    h.run(4000)
    b = h.agents["B"]
    assert b.location is L.S3_2
    b.automaton.set_count(2)
    b.handle_message(Dim(DimKind.AROW5, "A", h.now, Empty()), h.now)
    assert b.location is L.S0 and h.symbols("B")[-1] == 17
    assert b.automaton.state.arow_count == 0 and b.intent is Intent.MANUAL


def test_restart_below_threshold():
    h = Harness({"A": 0, "B": 1})
    h.run(4000)
    b = h.agents["B"]
    b.handle_message(Dim(DimKind.AROW5, "A", h.now, Empty()), h.now)
    assert b.location is L.S1 and h.symbols("B")[-1] == 16
    assert b.automaton.state.arow_count == 1


def _waiting_pair():
    h = Harness({"A": 0, "B": 1})
    h.run(2500)
    h.poses["W"] = Pose(2, -0.5, 0.0)
    h.poses["X"] = Pose(3, -0.5, 0.0)
    for v in "WX":
        h.agents[v] = DmsAgent(v, h.cfg, random.Random(v))
        h.bus.register(v)
    h.run(3500)
    return h


def test_late_arrivals_wait():
    h = _waiting_pair()
    assert {h.agents[v].location for v in "WX"} == {L.SW}
    assert h.agents["A"].ledger.secondary_ids == {"W", "X"}


def test_waiters_promoted_after_round():
    h = _waiting_pair()
    order = h.agents["A"].ledger.schedule
    for v in order:
        h.poses.pop(v)
        for m in h.agents[v].on_junction_exit(h.now):
            h.bus.broadcast(m, h.now)
        h.pump(h.now)
    syms = {v: h.symbols(v)[-1] for v in "WX"}
    assert sorted(syms.values()) == [21, 23]
    named = next(v for v, s in syms.items() if s == 21)
    assert h.agents[named].location is L.S3_1
    assert h.agents[named].automaton.clock == h.cfg.timing.t1 + h.cfg.timing.t2


def test_hv_never_defects():
    cfg = AgentConfig(nc_prob=1.0)
    h = Harness({"A": 0, "B": 1}, cfg, hv="A")
    h.run(3000)
    assert not any(e.event == "defect" and e.vehicle == "A" for e in h.agents["A"].events)
    assert any(e.event == "defect" for e in h.agents["B"].events)
