"""Scenario and grid orchestration: run, analyse, write plain-text outputs."""

from __future__ import annotations

import csv
import json
import math
import logging
import statistics
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from arow import analysis as an
from arow.automaton import EDGES, LOCATION_ORDER, Reset
from arow.config import ScenarioConfig
from arow.sim import InvariantViolation, RunLogs, simulate, stuck_vehicles
from arow.traffic import ControllerMode, concurrent_entries, detect_false_start

log = logging.getLogger(__name__)

DENSITIES = (4, 8, 16)
NC_LEVELS = (0.0, 0.1, 0.25)
MODES = (ControllerMode.AROW, ControllerMode.ALLWAY, ControllerMode.LIGHT)


@dataclass
class MetricsReport:
    config: dict
    symbol_counts: dict[int, int]
    matrix: list[list[int]]
    frequencies: dict[str, int]
    total_transitions: int
    bad_resets: int = 0
    hv_rounds: int = 0
    p_e: float | None = None
    p_t: float | None = None
    p_t_pooled: float | None = None
    pe_series: list[tuple[int, float]] = field(default_factory=list)
    cv_dist: dict[int, float] = field(default_factory=dict)
    split_check: dict[int, tuple[float, float, bool]] = field(default_factory=dict)
    hv_round_list: list[an.HvRound] = field(default_factory=list)
    groups: int = 0
    n_amb: int = 0
    ambiguity_by_size: dict[int, int] = field(default_factory=dict)
    clearance: list[float] = field(default_factory=list)
    defections: int = 0
    max_arow_count: int = 0
    rounds: int = 0
    disagreements: list[str] = field(default_factory=list)
    stuck: list[str] = field(default_factory=list)
    crossings: int = 0

    @property
    def multi_fraction(self) -> float:
        return self.n_amb / self.groups if self.groups else 0.0

    def share(self, *symbols: int) -> float:
        return 100.0 * sum(self.symbol_counts.get(s, 0) for s in symbols) / self.total_transitions if self.total_transitions else 0.0

    def to_json(self) -> str:
        d = asdict(self)
        d["multi_fraction"] = self.multi_fraction
        return json.dumps(d, indent=1, sort_keys=True)


def _check_resets(logs: RunLogs) -> int:
    timing = logs.config.timing()
    bad = 0
    for r in logs.transitions:
        sw = EDGES[r.symbol]
        if sw.reset is Reset.ZERO and r.clock_after != 0:
            bad += 1
        elif sw.reset is Reset.T1_T2 and r.clock_after != timing.t1 + timing.t2:
            bad += 1
    return bad


def analyse(logs: RunLogs) -> MetricsReport:
    cfg = logs.config
    matrix, freq = an.build_transition_matrix(logs.transitions)
    kept = an.completed_trajectories(logs.transitions)
    report = MetricsReport(
        config=cfg.to_dict(),
        symbol_counts=dict(sorted(Counter(r.symbol for r in kept).items())),
        matrix=matrix.counts.tolist(),
        frequencies={str(loc): freq.counts[loc] for loc in LOCATION_ORDER},
        total_transitions=matrix.total,
        bad_resets=_check_resets(logs),
        max_arow_count=logs.max_arow_count,
        crossings=len(logs.world.occupancy.crossings),
    )
    t1 = cfg.t1
    report.clearance = [s.t_clearance for s in an.clearance_times(logs.junction, t1)]
    if cfg.mode is ControllerMode.AROW:
        rounds = an.hv_rounds(logs.transitions, logs.events, logs.hv)
        done = [r for r in rounds if r.nc is not None]
        report.hv_rounds = len(done)
        report.hv_round_list = done
        report.p_e, report.pe_series = an.p_exists_nc_empirical(done)
        report.cv_dist = an.competing_count_distribution(done)
        if done:
            report.p_t = an.p_exists_nc_theoretical(an.estimate_params(done, cfg.n_veh, cfg.nc_prob))
            report.p_t_pooled = an.p_exists_nc_theoretical(
                an.estimate_params(done, cfg.n_veh, cfg.nc_prob, stratify=False)
            )
            report.split_check = an.split_check(done)
        report.rounds, report.disagreements = an.arbitrator_agreement(logs.events)
        report.defections = sum(1 for e in logs.events if e.event == "defect")
        sizes = concurrent_entries(logs.junction, logs.world.defect_entries)
        report.stuck = stuck_vehicles(logs)
    elif cfg.mode is ControllerMode.ALLWAY:
        sizes = [ev.entrants for ev in detect_false_start(logs.junction, logs.world.decisions)]
    else:
        sizes = []
    amb = an.summarize_ambiguity(sizes)
    report.groups = amb.groups
    report.n_amb = amb.n_amb
    report.ambiguity_by_size = dict(sorted(amb.by_size.items()))
    return report


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_outputs(logs: RunLogs, report: MetricsReport, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(
        out_dir / "transitions.csv",
        ("sim_time_ms", "vehicle_id", "from", "symbol", "to", "clock_ms"),
        ((r.time_ms, r.vehicle, r.source, r.symbol, r.target, r.clock_after) for r in logs.transitions),
    )
    _write_csv(
        out_dir / "messages.csv",
        ("sim_time_ms", "sender", "kind", "receivers", "payload"),
        logs.messages,
    )
    _write_csv(out_dir / "junction.csv", ("sim_time_ms", "vehicle_id", "event", "lane"), logs.junction)
    _write_csv(out_dir / "agent_events.csv", ("sim_time_ms", "vehicle_id", "event", "detail"), logs.events)
    names = [str(loc) for loc in LOCATION_ORDER]
    _write_csv(out_dir / "matrix.csv", ["from\\to", *names], ([n, *row] for n, row in zip(names, report.matrix)))
    total = report.total_transitions or 1
    _write_csv(
        out_dir / "frequencies.csv",
        ("location", "count", "percent"),
        ((k, v, f"{100.0 * v / total:.4f}") for k, v in report.frequencies.items()),
    )
    _write_csv(out_dir / "pe_series.csv", ("sim_time_ms", "p_e"), report.pe_series)
    _write_csv(out_dir / "clearance.csv", ("t_clearance_s",), ((f"{c:.3f}",) for c in report.clearance))
    (out_dir / "report.json").write_text(report.to_json() + "\n")


def check_invariants(report: MetricsReport) -> list[str]:
    problems = []
    if report.bad_resets:
        problems.append(f"{report.bad_resets} transitions with a wrong clock reset")
    if report.disagreements:
        problems.append(f"arbitrator disagreement in rounds {report.disagreements[:3]}")
    if report.config["mode"] == "arow" and report.n_amb:
        problems.append(f"n_amb={report.n_amb} in AROW mode")
    if report.max_arow_count > report.config["arow_thresh"]:
        problems.append(f"retry counter reached {report.max_arow_count}")
    return problems


def run_scenario(config: ScenarioConfig, out_dir: str | Path | None = None) -> MetricsReport:
    logs = simulate(config)
    report = analyse(logs)
    if out_dir is not None:
        write_outputs(logs, report, Path(out_dir))
    problems = check_invariants(report)
    if problems:
        raise InvariantViolation("; ".join(problems))
    return report


# --------------------------------------------------------------------- grid


@dataclass
class CellSummary:
    mode: str
    n_veh: int
    nc_prob: float
    reports: list[MetricsReport]

    def mean(self, attr: str) -> float | None:
        vals = [getattr(r, attr) for r in self.reports if getattr(r, attr) is not None]
        return statistics.fmean(vals) if vals else None

    def spread(self, attr: str) -> float | None:
        vals = [getattr(r, attr) for r in self.reports if getattr(r, attr) is not None]
        return statistics.pstdev(vals) if len(vals) > 1 else 0.0 if vals else None

    def mean_share(self, *symbols: int) -> float:
        return statistics.fmean(r.share(*symbols) for r in self.reports)

    def pooled_counts(self) -> Counter:
        c = Counter()
        for r in self.reports:
            c.update(r.symbol_counts)
        return c

    def pooled_cv(self) -> dict[int, float]:
        c = Counter()
        for r in self.reports:
            for j, pct in r.cv_dist.items():
                c[j] += pct * r.hv_rounds / 100.0
        n = sum(c.values())
        return {j: 100.0 * c[j] / n for j in sorted(c)} if n else {}

    def pooled_rounds(self) -> list[an.HvRound]:
        return [r for rep in self.reports for r in rep.hv_round_list]

    def pooled_p_e(self) -> float:
        return an.p_exists_nc_empirical(self.pooled_rounds())[0]

    def pooled_p_t(self) -> float:
        rounds = self.pooled_rounds()
        return an.p_exists_nc_theoretical(an.estimate_params(rounds, self.n_veh, self.nc_prob))

    def running_gap(self, fraction: float) -> float:
        """Mean over seeds of |P_E - P_T| after ``fraction`` of each run, P_T taken from the pooled end state."""
        p_t = self.pooled_p_t()
        gaps = []
        for rep in self.reports:
            end = rep.config["duration_s"] * 1000.0 * fraction
            seen = [pe for t, pe in rep.pe_series if t <= end]
            if seen:
                gaps.append(abs(seen[-1] - p_t))
        return statistics.fmean(gaps) if gaps else math.inf

    def clearance(self) -> list[float]:
        return [c for r in self.reports for c in r.clearance]

    def ambiguity(self) -> tuple[int, Counter]:
        c = Counter()
        for r in self.reports:
            c.update(r.ambiguity_by_size)
        return sum(r.groups for r in self.reports), c

    def multi_fraction(self) -> float:
        groups, c = self.ambiguity()
        return sum(v for k, v in c.items() if k >= 2) / groups if groups else 0.0


@dataclass
class GridReport:
    cells: dict[tuple[str, int, float], CellSummary]
    skipped: list[tuple[str, int, float]]

    def cell(self, mode: str | ControllerMode, n_veh: int, nc_prob: float = 0.0) -> CellSummary:
        return self.cells[(str(mode), n_veh, nc_prob)]

    def delta_a(self, mode: str | ControllerMode, n_veh: int) -> float:
        """Area between the clearance CDFs of ``mode`` and AROW; positive means AROW is faster."""
        return an.cdf_area_difference(self.cell(mode, n_veh).clearance(), self.cell("arow", n_veh).clearance())


def grid_cells(densities=DENSITIES, nc_levels=NC_LEVELS, modes=MODES):
    cells, skipped = [], []
    for mode in map(ControllerMode, modes):
        for n in densities:
            for p in nc_levels:
                if mode is not ControllerMode.AROW and p > 0:
                    skipped.append((str(mode), n, p))
                else:
                    cells.append((mode, n, p))
    return cells, skipped


def run_grid(
    base: ScenarioConfig,
    seeds: Sequence[int],
    out_dir: str | Path | None = None,
    densities=DENSITIES,
    nc_levels=NC_LEVELS,
    modes=MODES,
) -> GridReport:
    if not seeds:
        raise ValueError("need at least one seed")
    cells, skipped = grid_cells(densities, nc_levels, modes)
    summaries = {}
    for mode, n, p in cells:
        reports = []
        for seed in seeds:
            cfg = base.with_(mode=mode, n_veh=n, nc_prob=p, seed=seed)
            sub = None if out_dir is None else Path(out_dir) / f"{mode}_n{n}_nc{p:g}_s{seed}"
            log.info("running %s n=%d nc=%g seed=%d", mode, n, p, seed)
            reports.append(run_scenario(cfg, sub))
        summaries[(str(mode), n, p)] = CellSummary(str(mode), n, p, reports)
    grid = GridReport(summaries, skipped)
    if out_dir is not None:
        write_grid_summary(grid, Path(out_dir))
    return grid


def write_grid_summary(grid: GridReport, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    arow = sorted(k for k in grid.cells if k[0] == "arow")
    _write_csv(
        out_dir / "state_shares.csv",
        ("n_veh", "nc_prob", "share_N4", "share_N21_N23", "share_N15_N18"),
        (
            (n, p, f"{c.mean_share(4):.3f}", f"{c.mean_share(21, 23):.3f}", f"{c.mean_share(15, 18):.3f}")
            for c in (grid.cells[k] for k in arow)
            for _, n, p in [(c.mode, c.n_veh, c.nc_prob)]
        ),
    )
    rows = []
    for k in arow:
        c = grid.cells[k]
        if c.nc_prob == 0:
            continue
        rows.append((c.n_veh, c.nc_prob, _fmt(c.mean("p_t")), _fmt(c.mean("p_e")), _fmt(c.spread("p_e"))))
    _write_csv(out_dir / "nc_probability.csv", ("n_veh", "nc_prob", "p_t", "p_e", "p_e_spread"), rows)
    _write_csv(
        out_dir / "competing_counts.csv",
        ("n_veh", "nc_prob", "j1_pct", "j2_pct", "j3_pct"),
        (
            (c.n_veh, c.nc_prob, *(f"{c.pooled_cv().get(j, 0.0):.1f}" for j in (1, 2, 3)))
            for c in (grid.cells[k] for k in arow)
        ),
    )
    amb_rows = []
    for (mode, n, p), c in sorted(grid.cells.items()):
        if p:
            continue
        groups, sizes = c.ambiguity()
        amb_rows.append((mode, n, groups, sizes.get(1, 0), sizes.get(2, 0), sum(v for s, v in sizes.items() if s >= 3),
                         f"{100 * c.multi_fraction():.2f}"))
    _write_csv(out_dir / "ambiguity.csv", ("mode", "n_veh", "groups", "one", "two", "three_plus", "multi_pct"), amb_rows)
    with (out_dir / "clearance_samples.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("mode", "n_veh", "t_clearance_s"))
        for (mode, n, p), c in sorted(grid.cells.items()):
            if p == 0:
                w.writerows((mode, n, f"{t:.3f}") for t in c.clearance())
    delta = []
    for n in sorted({k[1] for k in grid.cells}):
        for mode in ("light", "allway"):
            if (mode, n, 0.0) in grid.cells and ("arow", n, 0.0) in grid.cells:
                delta.append((mode, n, f"{grid.delta_a(mode, n):.4f}"))
    _write_csv(out_dir / "delta_area.csv", ("baseline", "n_veh", "delta_a_vs_arow"), delta)
    _write_csv(out_dir / "skipped.csv", ("mode", "n_veh", "nc_prob"), grid.skipped)


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.4f}"
