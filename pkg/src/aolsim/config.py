"""Scenario configuration: YAML schema, strict loading, dotted overrides, episode setup.

Every section maps onto a dataclass; unknown keys are rejected at load time.
See ``configs/default.yaml`` for the documented default scenario.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any

import numpy as np
import yaml

from aolsim import channel
from aolsim.allocator import DEFAULT_MENU, BandwidthMenu, TrainSchedule
from aolsim.learning import ValueLearningConfig
from aolsim.loopsim import IDEAL_LINK, CqiLink, LoopConfig, episode_streams, validate_uplink
from aolsim.lqr import CostWeights, LqrSolution, solve_care
from aolsim.plant import PlantParams, linearize


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CostConfig:
    Q: tuple = ((1.0, 0.0, 0.0, 0.0), (0.0, 1.0, 0.0, 0.0), (0.0, 0.0, 1.0, 0.0), (0.0, 0.0, 0.0, 1.0))
    R: float = 1.0
    # common factor on Q and R; leaves the gain unchanged and sets how the LQR
    # integral weighs against the normalized bandwidth term of the stage cost
    scale: float = 300.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("cost.scale must be > 0")


@dataclass(frozen=True)
class LoopSection:
    dt_in: tuple = (0.001, 0.005, 0.010, 0.015, 0.020)
    dt_out: float = 0.001
    payload: float = 1024.0
    horizon: float = 10.0
    terminal_penalty: float = 10.0


@dataclass(frozen=True)
class ChannelConfig:
    ul_bandwidth: float = 10e6
    shared_cqi: bool = False
    # force every transmission to take zero time
    ideal: bool = False
    table: str | None = None


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 60
    seed_offset: int = 1_000_003
    deadlines: tuple = (0.001, 0.005, 0.010)
    workers: int = 1


@dataclass(frozen=True)
class SimulateConfig:
    episodes: int = 3
    # fixed:<Hz> | deadline:<s> | random | rl:<qtable path>
    policy: str = "deadline:0.01"
    dt_in: float | None = None


@dataclass
class ScenarioConfig:
    plant: PlantParams = field(default_factory=PlantParams)
    cost: CostConfig = field(default_factory=CostConfig)
    loop: LoopSection = field(default_factory=LoopSection)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    menu: tuple = DEFAULT_MENU
    value: ValueLearningConfig = field(default_factory=ValueLearningConfig)
    train: TrainSchedule = field(default_factory=TrainSchedule)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    seed: int = 0
    out: str = "runs/default"

    def __post_init__(self):
        if not self.loop.dt_in:
            raise ConfigError("loop.dt_in needs at least one value")
        for dt_in in self.loop.dt_in:
            cfg = self.loop_config(dt_in)
            # worst UL channel must still finish within dt_in
            validate_uplink(cfg, self.link, channel.CQI_MIN)
        self.bandwidth_menu  # validates
        self.weights

    # -- derived objects ------------------------------------------------------------------

    @cached_property
    def weights(self) -> CostWeights:
        c = self.cost.scale
        return CostWeights(c * np.array(self.cost.Q, dtype=float), c * np.array([[self.cost.R]], dtype=float))

    @cached_property
    def lqr_solution(self) -> LqrSolution:
        return solve_care(linearize(self.plant), self.weights)

    @cached_property
    def bandwidth_menu(self) -> BandwidthMenu:
        return BandwidthMenu(tuple(self.menu))

    @cached_property
    def cqi_table(self) -> channel.CqiTable:
        return channel.load_cqi_table(self.channel.table)

    @cached_property
    def link(self):
        if self.channel.ideal:
            return IDEAL_LINK
        return CqiLink(self.channel.ul_bandwidth, self.cqi_table)

    def loop_config(self, dt_in: float, seed: int | None = None) -> LoopConfig:
        return LoopConfig(
            dt_in=dt_in,
            dt_out=self.loop.dt_out,
            payload=self.loop.payload,
            ul_bandwidth=self.channel.ul_bandwidth,
            horizon=self.loop.horizon,
            seed=self.seed if seed is None else seed,
            terminal_penalty=self.loop.terminal_penalty,
        )

    def episode(self, index: int, seed: int | None = None, dt_in: float | None = None) -> "EpisodeSetup":
        """Deterministic per-episode setup: dt_in cycles through the sweep, CQIs are drawn per episode."""
        seed = self.seed if seed is None else seed
        plant_rng, chan_rng, policy_rng = episode_streams(seed, index)
        if dt_in is None:
            dt_in = self.loop.dt_in[index % len(self.loop.dt_in)]
        cqi_dl = channel.sample_cqi(chan_rng)
        cqi_ul = cqi_dl if self.channel.shared_cqi else channel.sample_cqi(chan_rng)
        return EpisodeSetup(self.loop_config(dt_in, seed), cqi_dl, cqi_ul, plant_rng, policy_rng)

    # -- serialisation --------------------------------------------------------------------

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)


@dataclass
class EpisodeSetup:
    loop: LoopConfig
    cqi_dl: int
    cqi_ul: int
    plant_rng: np.random.Generator
    policy_rng: np.random.Generator


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _tupleize(v):
    if isinstance(v, list):
        return tuple(_tupleize(x) for x in v)
    return v


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = SECTIONS.get((cls, name))
        path = f"{where}.{name}" if where else name
        kwargs[name] = _build(sub, value, path) if sub is not None else _tupleize(value)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


SECTIONS = {
    (ScenarioConfig, "plant"): PlantParams,
    (ScenarioConfig, "cost"): CostConfig,
    (ScenarioConfig, "loop"): LoopSection,
    (ScenarioConfig, "channel"): ChannelConfig,
    (ScenarioConfig, "value"): ValueLearningConfig,
    (ScenarioConfig, "train"): TrainSchedule,
    (ScenarioConfig, "evaluation"): EvalConfig,
    (ScenarioConfig, "simulate"): SimulateConfig,
}


def apply_override(data: dict, item: str) -> None:
    """Apply ``dotted.key=value`` in place; the value is parsed as YAML."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not KEY=VALUE")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r}: {p!r} is not a section")
    node[parts[-1]] = yaml.safe_load(raw)


def load_config(path=None, overrides=()) -> ScenarioConfig:
    data: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                data = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    for item in overrides:
        apply_override(data, item)
    return _build(ScenarioConfig, data, "")
