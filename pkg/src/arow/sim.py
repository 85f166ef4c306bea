"""Event loop binding the world, the broadcast medium and the agents."""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field

from arow.agent import AgentEvent, DmsAgent, Intent, Pose
from arow.automaton import InvariantExpired, Location, TransitionRecord
from arow.config import ScenarioConfig
from arow.messaging import MessageBus, MessageLogRecord
from arow.traffic import ControllerMode, JunctionEvent, World

log = logging.getLogger(__name__)

MAX_DELIVERY_ROUNDS = 1000


class InvariantViolation(RuntimeError):
    pass


def vehicle_ids(n: int) -> list[str]:
    return [f"CAV{i:02d}" for i in range(n)]


@dataclass
class RunLogs:
    config: ScenarioConfig
    transitions: list[TransitionRecord] = field(default_factory=list)
    events: list[AgentEvent] = field(default_factory=list)
    messages: list[MessageLogRecord] = field(default_factory=list)
    junction: list[JunctionEvent] = field(default_factory=list)
    world: World | None = None
    agents: dict[str, DmsAgent] = field(default_factory=dict)
    hv: str = "CAV00"
    max_arow_count: int = 0


class Simulation:
    def __init__(self, config: ScenarioConfig):
        self.cfg = config
        ids = vehicle_ids(config.n_veh)
        self.ids = ids
        self.logs = RunLogs(config, hv=ids[0])
        self.agents: dict[str, DmsAgent] = {}
        self.bus: MessageBus | None = None
        intent_fn = None
        if config.mode is ControllerMode.AROW:
            self.bus = MessageBus(config.bus_latency_ms, config.bus_loss, config.seed)
            acfg = config.agent_config()
            registry = frozenset(ids)
            for vid in ids:
                agent = DmsAgent(
                    vid, acfg, random.Random(f"agent:{config.seed}:{vid}"), is_hv=(vid == ids[0]), registry=registry
                )
                agent.map.bsm_period_ms = config.bsm_period_ms
                # one shared, time-ordered log for the whole run
                agent.automaton.log = self.logs.transitions
                agent.events = self.logs.events
                self.agents[vid] = agent
                self.bus.register(vid)
            self.logs.messages = self.bus.log
            intent_fn = self._intent
        self.world = World(ids, config.world_config(), seed=config.seed, intent_fn=intent_fn)
        self.logs.world = self.world
        self.logs.agents = self.agents
        self.logs.junction = self.world.log

    def _intent(self, vid: str) -> Intent:
        return self.agents[vid].intent

    def _broadcast(self, msgs, now: int) -> None:
        for m in msgs:
            self.bus.broadcast(m, now)

    def _pump(self, now: int) -> None:
        for _ in range(MAX_DELIVERY_ROUNDS):
            due = self.bus.next_due()
            if due is None or due > now:
                return
            zone = self.world.in_zone(self.cfg.det_thresh)
            for receiver, msg in self.bus.deliver(now, zone):
                self._broadcast(self.agents[receiver].handle_message(msg, now), now)
        raise InvariantViolation(f"message storm at {now} ms")

    def _observe(self, now: int) -> None:
        poses = self.world.poses()
        heard = now % self.cfg.bsm_period_ms == 0
        fronts = self.world.fronts(poses) if heard else None
        for vid, agent in self.agents.items():
            agent.observe(poses.get(vid), now, poses if heard else None, fronts)

    def step(self) -> None:
        now = self.world.time_ms
        dt = self.cfg.dt_ms
        if self.agents:
            self._observe(now)
            for agent in self.agents.values():
                self._broadcast(agent.tick(now), now)
            self._pump(now)
            for vid, agent in self.agents.items():
                try:
                    agent.advance(dt)
                except InvariantExpired as exc:
                    raise InvariantViolation(f"{vid} at {now} ms: {exc}") from exc
                self.logs.max_arow_count = max(self.logs.max_arow_count, agent.automaton.state.arow_count)
        self.world.step()
        if self.agents:
            later = self.world.time_ms
            for vid in self.world.exited_now:
                self._broadcast(self.agents[vid].on_junction_exit(later), later)
            self._pump(later)

    def run(self) -> RunLogs:
        end = self.cfg.duration_ms
        while self.world.time_ms < end:
            self.step()
        if self.world.population != self.cfg.n_veh:
            raise InvariantViolation("vehicle population changed")
        return self.logs


def simulate(config: ScenarioConfig) -> RunLogs:
    return Simulation(config).run()


def stuck_vehicles(logs: RunLogs) -> list[str]:
    """Vehicles in a protocol location at the end that are not mid-crossing or mid-round."""
    out = []
    now = logs.world.time_ms
    for vid, agent in logs.agents.items():
        loc = agent.location
        if loc is Location.S0:
            continue
        last = max((e.time_ms for e in logs.events if e.vehicle == vid and e.event == "enter"), default=0)
        bound = agent.cfg.timing.bound(loc) or 0
        if now - last > bound:
            out.append(vid)
    return out


__all__ = ["InvariantViolation", "RunLogs", "Simulation", "simulate", "stuck_vehicles", "vehicle_ids", "Pose"]
