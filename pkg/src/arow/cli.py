"""Command-line entry point: one scenario or the full evaluation grid.

Log verbosity comes from the ``AROW_LOG_LEVEL`` environment variable
(DEBUG, INFO, WARNING, ...; default WARNING).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from arow.config import ConfigError, ScenarioConfig, load_config
from arow.runner import run_grid, run_scenario
from arow.sim import InvariantViolation
from arow.traffic import CollisionDetected

LOG_ENV = "AROW_LOG_LEVEL"

log = logging.getLogger("arow")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="arow", description="Run AROW junction scenarios and write metric files.")
    p.add_argument("--config", type=Path, help="YAML scenario file; flags override its values")
    p.add_argument("--out", type=Path, default=Path("arow_out"), help="output directory (default: %(default)s)")
    p.add_argument("--seed", type=int, help="random seed; with --grid, the first of three consecutive seeds")
    p.add_argument("--grid", action="store_true", help="run densities 4/8/16 x nc 0/0.1/0.25 x all modes")
    p.add_argument("--mode", choices=("arow", "allway", "light"))
    p.add_argument("--duration-s", type=float, dest="duration_s")
    p.add_argument("--nc-prob", type=float, dest="nc_prob")
    p.add_argument("--n-veh", type=int, dest="n_veh")
    p.add_argument("--seeds", type=int, default=3, help="number of seeds per grid cell (default: %(default)s)")
    return p


def resolve_config(args: argparse.Namespace) -> ScenarioConfig:
    cfg = load_config(args.config) if args.config else ScenarioConfig()
    overrides = {k: getattr(args, k) for k in ("seed", "mode", "duration_s", "nc_prob", "n_veh")}
    overrides = {k: v for k, v in overrides.items() if v is not None}
    try:
        return cfg.with_(**overrides)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.grid:
            if args.seeds < 1:
                raise ConfigError("--seeds must be positive")
            seeds = list(range(cfg.seed, cfg.seed + args.seeds))
            grid = run_grid(cfg, seeds, args.out)
            print(f"grid: {len(grid.cells)} cells, {len(grid.skipped)} skipped, outputs in {args.out}")
        else:
            report = run_scenario(cfg, args.out)
            line = f"{cfg.mode} n_veh={cfg.n_veh} nc_prob={cfg.nc_prob:g} seed={cfg.seed}: "
            line += f"{report.total_transitions} transitions, n_amb={report.n_amb}, "
            line += f"{len(report.clearance)} clearance samples"
            if report.p_e is not None:
                line += f", P_E={report.p_e:.3f}, P_T={report.p_t:.3f}"
            print(line)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (InvariantViolation, CollisionDetected) as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
