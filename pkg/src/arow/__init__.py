"""Distributed right-of-way negotiation at stop-controlled intersections.

The package runs the protocol as a timed automaton inside independent
per-vehicle agents, drives them with a deterministic microsimulator and
turns the resulting logs into transition matrices, non-compliance
probabilities, ambiguity counts and clearance-time comparisons.
"""

from arow.automaton import (
    AutomatonState,
    IllegalSwitch,
    InvariantExpired,
    Location,
    Switch,
    TimedAutomaton,
    TimingParams,
    allowed_switches,
    build_edge_table,
    fire_switch,
    step_clock,
)

__version__ = "0.1.0"

__all__ = [
    "AutomatonState",
    "IllegalSwitch",
    "InvariantExpired",
    "Location",
    "Switch",
    "TimedAutomaton",
    "TimingParams",
    "allowed_switches",
    "build_edge_table",
    "fire_switch",
    "step_clock",
]
