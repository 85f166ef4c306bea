import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from arow.traffic import (
    AllwayDecision,
    Candidate,
    ControllerMode,
    JunctionEvent,
    JunctionOccupancy,
    KraussParams,
    LightPlan,
    VehicleBody,
    World,
    WorldConfig,
    advance_world,
    allway_controller,
    concurrent_entries,
    detect_false_start,
    krauss_step,
    right_of,
    safe_speed,
    traffic_light_controller,
)

P = KraussParams()


# ---------------------------------------------------------------- car following


def test_open_road_start_dithers():
    rng = random.Random(5)
    speeds = [krauss_step(VehicleBody("A", 0, -40.0), None, None, P, 0.1, rng) for _ in range(2000)]
    assert min(speeds) >= 0.13 - 1e-12 and max(speeds) <= 0.26 + 1e-12


def test_stopped_behind_leader_at_min_gap():
    leader = VehicleBody("L", 0, -10.0)
    me = VehicleBody("A", 0, leader.rear - P.min_gap)
    assert krauss_step(me, leader, None, P, 0.1, random.Random(1)) == 0.0


def test_deterministic_limit():
    p = KraussParams(sigma=0.0)
    me = VehicleBody("A", 0, -40.0, speed=3.0)
    assert krauss_step(me, None, None, p, 0.1, random.Random(1)) == pytest.approx(3.0 + 2.6 * 0.1)


def test_safe_speed_formula():
    # v_safe = -b*tau + sqrt((b*tau)^2 + v_l^2 + 2*b*g)
    assert safe_speed(10.0, 0.0, P) == pytest.approx(-0.45 + (0.45**2 + 90.0) ** 0.5)
    assert safe_speed(0.0, 0.0, P) == 0.0


def test_krauss_params_validated():
    with pytest.raises(ValueError):
        KraussParams(sigma=1.5)
    with pytest.raises(ValueError):
        KraussParams(decel=0.0)


@given(st.floats(0, 30), st.floats(0.5, 60), st.floats(0, 30), st.integers(0, 10_000))
def test_speed_stays_in_range(v, gap, vl, seed):
    leader = VehicleBody("L", 0, 0.0, speed=vl)
    me = VehicleBody("A", 0, leader.rear - P.min_gap - gap, speed=v)
    out = krauss_step(me, leader, None, P, 0.1, random.Random(seed))
    assert 0.0 <= out <= P.v_max


# ---------------------------------------------------------------- baselines


def test_allway_clear_order():
    rng = random.Random(0)
    got = allway_controller([Candidate("A", 0, 1000), Candidate("B", 1, 2000)], rng, 0.5, 1.0)
    assert got == {"A"}


def test_allway_tie_right_hand_rule():
    # lane 0's right is lane 1, so the lane-1 driver goes first
    got = allway_controller([Candidate("A", 0, 1000), Candidate("B", 1, 1200)], random.Random(0), 0.5, 0.0)
    assert got == {"B"}
    assert right_of(3) == 0


def test_allway_tie_false_start_rate():
    rng = random.Random(11)
    cands = [Candidate("A", 0, 1000), Candidate("B", 2, 1100)]
    both = sum(len(allway_controller(cands, rng, 0.5, 0.3)) == 2 for _ in range(20_000))
    assert abs(both / 20_000 - 0.3) < 0.015


def test_allway_release_cue_only_when_waiting_through_a_crossing():
    cands = [Candidate("A", 0, 1000), Candidate("B", 1, 3000)]
    assert allway_controller(cands, random.Random(0), 0.5, 1.0, released_at=2000) == {"A"}
    assert allway_controller(cands, random.Random(0), 0.5, 1.0, released_at=4000) == {"A", "B"}


def test_axis_light_phases():
    plan = LightPlan(15000, 15000, 3000, split=False)
    assert traffic_light_controller(0, plan) == (True, False, True, False)
    assert traffic_light_controller(15000, plan) == (False, False, False, False)
    assert traffic_light_controller(18000, plan) == (False, True, False, True)
    assert traffic_light_controller(plan.cycle_ms, plan) == traffic_light_controller(0, plan)


def test_split_light_serves_one_approach():
    plan = LightPlan(42000, 42000, 3000, split=True)
    assert plan.cycle_ms == 4 * 45000
    for t, lane in ((0, 0), (45000, 1), (90000, 2), (135000, 3)):
        greens = traffic_light_controller(t, plan)
        assert greens[lane] and sum(greens) == 1
    assert sum(traffic_light_controller(43000, plan)) == 0


@given(st.integers(0, 10**7))
def test_light_never_green_for_crossing_axes(t):
    for split in (True, False):
        g = traffic_light_controller(t, LightPlan(15000, 20000, 3000, split))
        assert not ((g[0] or g[2]) and (g[1] or g[3]))


def _events(*spans):
    out = []
    for vid, a, b in spans:
        out.append(JunctionEvent(a, vid, "junction_entry", 0))
        out.append(JunctionEvent(b, vid, "junction_exit", 0))
    return sorted(out)


def test_false_start_examples():
    decisions = [AllwayDecision(0, ("A", "X"), ("A",))]
    assert [e.entrants for e in detect_false_start(_events(("A", 100, 3000)), decisions)] == [1]
    decisions = [AllwayDecision(0, ("A", "B"), ("A", "B"))]
    assert [e.entrants for e in detect_false_start(_events(("A", 100, 3000), ("B", 200, 3100)), decisions)] == [2]
    decisions = [AllwayDecision(0, ("A", "B", "C"), ("A", "B", "C"))]
    ev = _events(("A", 100, 3000), ("B", 200, 3100), ("C", 300, 2900))
    assert [e.entrants for e in detect_false_start(ev, decisions)] == [3]


def test_lone_decisions_are_not_competing_groups():
    decisions = [AllwayDecision(0, ("A",), ("A",))]
    assert detect_false_start(_events(("A", 100, 3000)), decisions) == []


def test_concurrent_entries_excludes_defectors():
    ev = _events(("A", 100, 3000), ("B", 200, 3100), ("C", 4000, 6000))
    assert concurrent_entries(ev) == [2, 1]
    assert concurrent_entries(ev, {("B", 200)}) == [1, 1]


def test_occupancy_rejects_zero_length_crossing():
    occ = JunctionOccupancy()
    occ.enter("A", 100)
    with pytest.raises(AssertionError):
        occ.leave("A", 100)


# ---------------------------------------------------------------- world


def test_empty_world_only_advances_time():
    w = World([], WorldConfig(mode=ControllerMode.ALLWAY))
    advance_world(w, 100)
    assert w.time_ms == 100 and not w.log and w.population == 0


def test_permitted_vehicle_enters_junction():
    w = World(["A"], WorldConfig(mode=ControllerMode.ALLWAY), seed=1)
    for _ in range(300):
        advance_world(w, 100)
        if w.occupancy.occupants or w.occupancy.crossings:
            break
    entries = [e for e in w.log if e.event == "junction_entry"]
    assert [e.vehicle for e in entries] == ["A"]
    assert ("A" in w.occupancy.occupants) or w.occupancy.crossings[0][0] == "A"


def test_world_step_size_fixed():
    w = World(["A"])
    with pytest.raises(ValueError):
        advance_world(w, 50)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([ControllerMode.ALLWAY, ControllerMode.LIGHT]))
def test_baseline_worlds_circulate_safely(seed, mode):
    ids = [f"V{i}" for i in range(8)]
    w = World(ids, WorldConfig(mode=mode), seed=seed)
    for _ in range(3000):
        advance_world(w, 100)
    assert w.population == 8
    done = w.occupancy.crossings
    assert done and all(a < b for _, a, b in done)
