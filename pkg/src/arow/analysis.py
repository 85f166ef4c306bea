"""Turning run logs into frequency tables, non-compliance probabilities and clearance metrics."""

from __future__ import annotations

import bisect
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from arow.agent import AgentEvent
from arow.automaton import EDGE_BY_PAIR, LOCATION_INDEX, LOCATION_ORDER, Location, TransitionRecord
from arow.traffic import JunctionEvent

log = logging.getLogger(__name__)

L = Location
NC_STAGE_ORDER = (L.S2_2, L.S2_3, L.S3_1, L.S3_2)
NC_EXIT_SYMBOLS = frozenset({7, 8, 10, 11, 13, 14, 16, 17})
ROUND_START_SYMBOLS = {4: "N4", 21: "N21", 23: "N23"}


class MatrixViolation(Exception):
    pass


class DomainError(ValueError):
    pass


class MissingEstimate(KeyError):
    pass


class EmptySamples(ValueError):
    pass


class IncompleteCrossing(UserWarning):
    pass


# --------------------------------------------------------------------- transition matrix


@dataclass
class TransitionMatrix:
    counts: np.ndarray  # 10x10, rows = source
    total: int

    def cell(self, source: Location, target: Location) -> int:
        return int(self.counts[LOCATION_INDEX[source], LOCATION_INDEX[target]])

    def symbol(self, symbol: int) -> int:
        for (src, dst), sym in EDGE_BY_PAIR.items():
            if sym == symbol:
                return self.cell(src, dst)
        raise KeyError(symbol)

    def share(self, *symbols: int) -> float:
        """Percentage of all transitions carried by ``symbols``."""
        if not self.total:
            return 0.0
        return 100.0 * sum(self.symbol(s) for s in symbols) / self.total

    def percentages(self) -> np.ndarray:
        return self.counts * (100.0 / self.total) if self.total else np.zeros_like(self.counts, dtype=float)


@dataclass
class FrequencyTable:
    counts: dict[Location, int]
    total: int
    reconciliation: dict[Location, tuple[int, int]]  # inflow, outflow

    def share(self, loc: Location) -> float:
        return 100.0 * self.counts[loc] / self.total if self.total else 0.0


def completed_trajectories(records: Iterable[TransitionRecord]) -> list[TransitionRecord]:
    """Drop each vehicle's records after its last return to S0."""
    records = list(records)
    last_home: dict[str, int] = {}
    for i, r in enumerate(records):
        if r.target is L.S0:
            last_home[r.vehicle] = i
    return [r for i, r in enumerate(records) if i <= last_home.get(r.vehicle, -1)]


def build_transition_matrix(
    records: Iterable[TransitionRecord], truncate: bool = True
) -> tuple[TransitionMatrix, FrequencyTable]:
    records = completed_trajectories(records) if truncate else list(records)
    counts = np.zeros((len(LOCATION_ORDER), len(LOCATION_ORDER)), dtype=np.int64)
    for r in records:
        if (r.source, r.target) not in EDGE_BY_PAIR:
            raise MatrixViolation(f"{r.source}->{r.target} is not an edge ({r})")
        counts[LOCATION_INDEX[r.source], LOCATION_INDEX[r.target]] += 1
    total = int(counts.sum())
    inflow = counts.sum(axis=0)
    outflow = counts.sum(axis=1)
    freq = {loc: int(inflow[LOCATION_INDEX[loc]]) for loc in LOCATION_ORDER}
    recon = {loc: (int(inflow[i]), int(outflow[i])) for i, loc in enumerate(LOCATION_ORDER)}
    return TransitionMatrix(counts, total), FrequencyTable(freq, total, recon)


# --------------------------------------------------------------------- probability model


def nc_given_hv(j: int, m: int, nc_prob: float) -> float:
    """Probability that exactly ``m`` of ``j`` competitors defect."""
    if j < 0 or m < 0 or m > j:
        raise DomainError(f"need 0 <= m <= j, got m={m}, j={j}")
    if not 0.0 <= nc_prob <= 1.0:
        raise DomainError("nc_prob must lie in [0, 1]")
    return math.comb(j, m) * nc_prob**m * (1.0 - nc_prob) ** (j - m)


def compliance_probability(j: int, nc_prob: float) -> float:
    """Probability that all ``j`` competitors stay compliant through one stage."""
    return (1.0 - nc_prob) ** j


@dataclass(frozen=True)
class PathProbabilities:
    """How the host vehicle reaches arbitration, for one competing-count class."""

    p_n4_star: float | None = None
    p_n3: float | None = None
    p_n22: float | None = None
    p_n4_plus: float = 1.0
    p_n21: float | None = None
    p_n23: float | None = None
    p_n5: float | None = None
    p_n6: float | None = None


@dataclass(frozen=True)
class NcScenarioParams:
    n_veh: int
    nc_prob: float
    cv_dist: dict[int, float]  # j -> P(CV_j)
    paths: dict[int, PathProbabilities]  # j -> path probabilities

    def __post_init__(self):
        if self.cv_dist and abs(sum(self.cv_dist.values()) - 1.0) > 1e-9:
            raise DomainError("competing-count distribution must sum to 1")
        for v in self.cv_dist.values():
            if not 0.0 <= v <= 1.0:
                raise DomainError("probabilities must lie in [0, 1]")


def _need(value: float | None, name: str) -> float:
    if value is None:
        raise MissingEstimate(name)
    return value


def hv_stage_probability(params: NcScenarioParams, stage: Location, j: int) -> float:
    """Weight of the host vehicle being at ``stage`` in a round with ``j`` competitors."""
    if stage not in NC_STAGE_ORDER:
        raise DomainError(f"{stage} is not a non-compliance stage")
    if j not in params.paths:
        raise MissingEstimate(f"paths for j={j}")
    pp = params.paths[j]
    p5 = pp.p_n5 if pp.p_n5 is not None else 1.0 / (j + 1)
    p6 = pp.p_n6 if pp.p_n6 is not None else j / (j + 1)
    p3 = _need(pp.p_n3, "P(N3)")
    entry = _need(pp.p_n4_star, "P(N4*)") + p3 * _need(pp.p_n22, "P(N22)") * pp.p_n4_plus
    q = compliance_probability(j, params.nc_prob)
    if stage is L.S2_2:
        return entry * p5
    if stage is L.S2_3:
        return entry * p6
    if stage is L.S3_1:
        return entry * p5 * q + p3 * _need(pp.p_n21, "P(N21)")
    return entry * p6 * q + p3 * _need(pp.p_n23, "P(N23)")


def p_exists_nc_theoretical(params: NcScenarioParams) -> float:
    total = 0.0
    for j, p_cv in sorted(params.cv_dist.items()):
        if p_cv == 0.0:
            continue
        for m in range(1, j + 1):
            for stage in NC_STAGE_ORDER:
                total += hv_stage_probability(params, stage, j) * nc_given_hv(j, m, params.nc_prob) * p_cv
    return total


# --------------------------------------------------------------------- host-vehicle rounds


@dataclass(frozen=True)
class HvRound:
    start_ms: int
    end_ms: int | None
    j: int
    path: str  # N4 | N21 | N23
    waited: bool  # went through SW since the approach began
    arbitrator: bool
    nc: bool | None  # None while unfinished


def hv_rounds(
    transitions: Iterable[TransitionRecord], events: Iterable[AgentEvent], hv: str
) -> list[HvRound]:
    """Arbitration rounds seen by the host vehicle, in time order."""
    starts = [e for e in events if e.vehicle == hv and e.event == "round_start"]
    js = iter(int(e.detail.split(";")[0][2:]) for e in starts)
    rounds: list[HvRound] = []
    open_: dict | None = None
    waited = False
    for r in transitions:
        if r.vehicle != hv:
            continue
        if r.symbol == 1:
            waited = False
        elif r.symbol == 3:
            waited = True
        if r.symbol in ROUND_START_SYMBOLS:
            open_ = dict(start_ms=r.time_ms, j=next(js), path=ROUND_START_SYMBOLS[r.symbol], waited=waited,
                         arbitrator=r.symbol == 21)
            continue
        if open_ is None:
            continue
        if r.symbol == 5:
            open_["arbitrator"] = True
        elif r.symbol in (15, 18):
            rounds.append(HvRound(end_ms=r.time_ms, nc=False, **open_))
            open_ = None
        elif r.symbol in NC_EXIT_SYMBOLS:
            rounds.append(HvRound(end_ms=r.time_ms, nc=True, **open_))
            open_ = None
    return rounds


def p_exists_nc_empirical(rounds: Sequence[HvRound]) -> tuple[float, list[tuple[int, float]]]:
    """Fraction of finished rounds with a defection, plus the running estimate."""
    series = []
    hits = 0
    n = 0
    for r in sorted(rounds, key=lambda r: r.end_ms):
        n += 1
        hits += bool(r.nc)
        series.append((r.end_ms, hits / n))
    return (hits / n if n else 0.0), series


def competing_count_distribution(rounds: Sequence[HvRound], max_j: int = 3) -> dict[int, float]:
    """Percentage of rounds per competing count ``j``; empty when there were no rounds."""
    counts = Counter(r.j for r in rounds)
    n = sum(counts.values())
    if not n:
        return {}
    return {j: 100.0 * counts.get(j, 0) / n for j in range(1, max(max_j, max(counts)) + 1)}


def distribution_mode(dist: dict[int, float]) -> int | None:
    if not dist:
        return None
    return max(sorted(dist), key=lambda j: dist[j])


def estimate_params(
    rounds: Sequence[HvRound],
    n_veh: int,
    nc_prob: float,
    stratify: bool = True,
    measured_split: bool = False,
) -> NcScenarioParams:
    """Fill the scenario-dependent path probabilities from observed host rounds.

    With ``stratify`` the arrival-path probabilities are measured separately
    for every competing count; otherwise one pooled estimate serves all.
    With ``measured_split`` the arbitrator/member split uses observed
    frequencies instead of the symmetric ``1/(j+1)`` value.
    """
    rounds = [r for r in rounds if r.nc is not None]
    dist = competing_count_distribution(rounds)
    cv = {j: v / 100.0 for j, v in dist.items()}
    paths = {}
    for j in cv:
        pool = [r for r in rounds if r.j == j] if stratify else rounds
        paths[j] = _paths_from(pool, j, measured_split)
    return NcScenarioParams(n_veh, nc_prob, cv, paths)


def _paths_from(pool: Sequence[HvRound], j: int, measured_split: bool) -> PathProbabilities:
    n = len(pool)
    if not n:
        return PathProbabilities(0.0, 0.0, 0.0, 1.0, 0.0, 0.0)
    direct = sum(1 for r in pool if r.path == "N4" and not r.waited)
    again = sum(1 for r in pool if r.path == "N4" and r.waited)
    promoted = sum(1 for r in pool if r.path != "N4")
    waited = again + promoted
    p3 = waited / n
    p22 = again / waited if waited else 0.0
    share = promoted / waited if waited else 0.0
    p5 = 1.0 / (j + 1)
    if measured_split and pool:
        n4 = [r for r in pool if r.path == "N4"]
        if n4:
            p5 = sum(r.arbitrator for r in n4) / len(n4)
    return PathProbabilities(
        p_n4_star=direct / n,
        p_n3=p3,
        p_n22=p22,
        p_n4_plus=1.0,
        p_n21=share / (j + 1),
        p_n23=share * j / (j + 1),
        p_n5=p5,
        p_n6=1.0 - p5,
    )


def split_check(rounds: Sequence[HvRound], tolerance: float = 0.02) -> dict[int, tuple[float, float, bool]]:
    """Per ``j``: symmetric arbitrator share, measured share, and whether they agree."""
    out = {}
    for j in sorted({r.j for r in rounds}):
        n4 = [r for r in rounds if r.j == j and r.path == "N4"]
        if not n4:
            continue
        measured = sum(r.arbitrator for r in n4) / len(n4)
        out[j] = (1.0 / (j + 1), measured, abs(measured - 1.0 / (j + 1)) <= tolerance)
    return out


# --------------------------------------------------------------------- protocol checks


def arbitrator_agreement(events: Iterable[AgentEvent]) -> tuple[int, list[str]]:
    """Number of distinct rounds and the keys of rounds whose members disagreed on the arbitrator."""
    seen: dict[str, set[str]] = {}
    for e in events:
        if e.event != "round_start":
            continue
        parts = dict(p.split("=", 1) for p in e.detail.split(";"))
        seen.setdefault(parts["key"], set()).add(parts["arb"])
    bad = sorted(k for k, arbs in seen.items() if len(arbs) > 1)
    return len(seen), bad


# --------------------------------------------------------------------- clearance


@dataclass(frozen=True)
class ClearanceSample:
    group: frozenset[str]
    t_clearance: float  # seconds

    def __post_init__(self):
        if self.t_clearance < 0 or not self.group:
            raise ValueError("bad clearance sample")


@dataclass
class _Visit:
    vehicle: str
    arrival: int
    entry: int | None = None
    exit: int | None = None


def clearance_times(
    junction_log: Iterable[JunctionEvent], t1: float, start: str = "entry"
) -> list[ClearanceSample]:
    """Group vehicles whose stop-line arrivals fall within ``t1`` seconds of the group's first.

    A group's clearance runs from its earliest start to its latest junction
    exit. ``start`` selects the junction entry (default) or the stop-line
    arrival as a vehicle's start time. Only a vehicle's stop-line arrival
    while at the head of its lane starts a visit; visits without an exit by
    the end of the log are dropped.
    """
    if start not in ("arrival", "entry"):
        raise ValueError(f"unknown start event {start!r}")
    visits: list[_Visit] = []
    current: dict[str, _Visit] = {}
    for ev in junction_log:
        if ev.event == "stop_line_arrival":
            v = _Visit(ev.vehicle, ev.time_ms)
            current[ev.vehicle] = v
            visits.append(v)
        elif ev.event == "junction_entry" and ev.vehicle in current:
            current[ev.vehicle].entry = ev.time_ms
        elif ev.event == "junction_exit" and ev.vehicle in current:
            current.pop(ev.vehicle).exit = ev.time_ms
    done = [v for v in visits if v.exit is not None and v.entry is not None]
    dropped = len(visits) - len(done)
    if dropped:
        log.info("dropped %d crossings without an exit", dropped)
    done.sort(key=lambda v: (v.arrival, v.vehicle))
    window = int(round(t1 * 1000))
    out = []
    i = 0
    while i < len(done):
        first = done[i].arrival
        k = i
        while k < len(done) and done[k].arrival - first <= window:
            k += 1
        group = done[i:k]
        first_start = min(v.arrival if start == "arrival" else v.entry for v in group)
        span = max(v.exit for v in group) - first_start
        out.append(ClearanceSample(frozenset(v.vehicle for v in group), span / 1000.0))
        i = k
    return out


def cdf_area_difference(samples_a: Sequence[float], samples_b: Sequence[float]) -> float:
    """Area under the empirical CDF of ``b`` minus that of ``a`` over [0, max sample].

    Positive means ``b`` tends to take less time than ``a``. The step
    functions are integrated exactly, which equals mean(a) - mean(b).
    """
    if len(samples_a) == 0 or len(samples_b) == 0:
        raise EmptySamples("both sample sets must be non-empty")
    a = np.sort(np.asarray(samples_a, dtype=float))
    b = np.sort(np.asarray(samples_b, dtype=float))
    grid = np.union1d(np.union1d(a, b), [0.0])
    widths = np.diff(grid)
    left = grid[:-1]
    cdf_a = np.searchsorted(a, left, side="right") / a.size
    cdf_b = np.searchsorted(b, left, side="right") / b.size
    return float(np.sum((cdf_b - cdf_a) * widths))


def running_gap(series: Sequence[tuple[int, float]], target: float, at_ms: int) -> float:
    """|running estimate - target| at time ``at_ms`` (last value at or before it)."""
    times = [t for t, _ in series]
    i = bisect.bisect_right(times, at_ms) - 1
    if i < 0:
        return abs(0.0 - target) if not series else abs(series[0][1] - target)
    return abs(series[i][1] - target)


@dataclass
class AmbiguitySummary:
    groups: int = 0
    by_size: Counter = field(default_factory=Counter)

    @property
    def n_amb(self) -> int:
        return sum(c for k, c in self.by_size.items() if k >= 2)

    @property
    def multi_fraction(self) -> float:
        return self.n_amb / self.groups if self.groups else 0.0


def summarize_ambiguity(entrants: Iterable[int]) -> AmbiguitySummary:
    s = AmbiguitySummary()
    for k in entrants:
        s.groups += 1
        s.by_size[k] += 1
    return s
