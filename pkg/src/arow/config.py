"""Scenario configuration and its YAML schema.

Every key is optional; omitted keys take the defaults below. Times are
given in seconds in the file and converted to integer milliseconds for the
simulator. Unknown keys are rejected.

Example::

    n_veh: 8
    nc_prob: 0.1
    mode: arow
    duration_s: 5000
    seed: 1
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import yaml

from arow.agent import AgentConfig
from arow.automaton import TimingParams
from arow.traffic import ControllerMode, KraussParams, LightPlan, WorldConfig


class ConfigError(ValueError):
    pass


def _ms(seconds: float) -> int:
    return int(round(seconds * 1000.0))


@dataclass(frozen=True)
class ScenarioConfig:
    n_veh: int = 4
    nc_prob: float = 0.0
    mode: ControllerMode = ControllerMode.AROW
    duration_s: float = 5000.0
    seed: int = 1
    dt_ms: int = 100
    bsm_period_ms: int = 100

    # protocol
    det_thresh: float = 10.0
    t1: float = 2.0
    t2: float = 2.0
    t3: float = 2.0
    t_turn: float = 30.0
    t_wait: float = 60.0
    arow_thresh: int = 2

    # radio
    bus_latency_ms: int = 0
    bus_loss: float = 0.0

    # car following
    v_max: float = 70.0
    accel: float = 2.6
    decel: float = 4.5
    sigma: float = 0.5
    min_gap: float = 2.5
    length: float = 5.0

    # baselines
    eps_tie: float = 0.5
    p_go: float = 0.1
    light_green_ns_s: float = 42.0
    light_green_ew_s: float = 42.0
    light_all_red_s: float = 3.0
    light_split: bool = True

    def __post_init__(self):
        try:
            object.__setattr__(self, "mode", ControllerMode(self.mode))
        except ValueError as exc:
            raise ConfigError(f"unknown mode {self.mode!r}") from exc
        if self.n_veh < 1:
            raise ConfigError("n_veh must be positive")
        if not 0.0 <= self.nc_prob <= 1.0:
            raise ConfigError("nc_prob must lie in [0, 1]")
        if self.duration_s <= 0:
            raise ConfigError("duration_s must be positive")
        if self.dt_ms <= 0 or self.bsm_period_ms <= 0 or self.bsm_period_ms % self.dt_ms:
            raise ConfigError("bsm_period_ms must be a positive multiple of dt_ms")
        for name in ("t1", "t2", "t3", "t_turn", "t_wait"):
            value = _ms(getattr(self, name))
            if value <= 0 or value % self.dt_ms:
                raise ConfigError(f"{name} must be a positive multiple of the step")
        if self.arow_thresh < 0:
            raise ConfigError("arow_thresh must be non-negative")
        if self.det_thresh <= 0:
            raise ConfigError("det_thresh must be positive")
        if self.bus_latency_ms < 0 or not 0.0 <= self.bus_loss <= 1.0:
            raise ConfigError("bad bus parameters")
        try:
            self.krauss()
            self.light()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def duration_ms(self) -> int:
        return _ms(self.duration_s)

    def timing(self) -> TimingParams:
        return TimingParams(_ms(self.t1), _ms(self.t2), _ms(self.t3), _ms(self.t_turn), _ms(self.t_wait))

    def krauss(self) -> KraussParams:
        return KraussParams(
            self.v_max, self.accel, self.decel, self.sigma, self.min_gap, self.length, self.dt_ms / 1000.0
        )

    def light(self) -> LightPlan:
        return LightPlan(_ms(self.light_green_ns_s), _ms(self.light_green_ew_s), _ms(self.light_all_red_s), self.light_split)

    def agent_config(self) -> AgentConfig:
        return AgentConfig(self.timing(), self.det_thresh, self.arow_thresh, self.nc_prob, self.dt_ms)

    def world_config(self) -> WorldConfig:
        return WorldConfig(
            mode=self.mode,
            krauss=self.krauss(),
            dt_ms=self.dt_ms,
            eps_tie=self.eps_tie,
            p_go=self.p_go,
            light=self.light(),
        )

    def with_(self, **changes) -> "ScenarioConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = str(self.mode)
        return d


FIELD_NAMES = frozenset(f.name for f in fields(ScenarioConfig))


def config_from_mapping(data: dict | None) -> ScenarioConfig:
    data = dict(data or {})
    unknown = sorted(set(data) - FIELD_NAMES)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        return ScenarioConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> ScenarioConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_mapping(data)
