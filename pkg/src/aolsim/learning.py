"""Tabular TD(0) estimation of the expected quadratic cost over binned ages."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from aolsim.loopsim import AGE_FIELDS, EpisodeTrace, run_episode

if TYPE_CHECKING:
    from aolsim.config import ScenarioConfig


@dataclass(frozen=True)
class AgeBinning:
    bin_width: float = 0.005
    n_bins: int = 20

    def __post_init__(self):
        if not self.bin_width > 0:
            raise ValueError("bin_width must be > 0")
        if self.n_bins < 1:
            raise ValueError("n_bins must be >= 1")

    def __call__(self, age: float) -> int:
        return bin_index(age, self)

    def edges_ms(self) -> list[tuple[float, float]]:
        w = self.bin_width * 1e3
        return [(k * w, (k + 1) * w) for k in range(self.n_bins)]


def bin_index(age: float, b: AgeBinning) -> int:
    """floor(age / bin_width), clamped to the last bin."""
    if age < 0:
        raise ValueError(f"age must be >= 0, got {age}")
    # guard against 0.015/0.005 = 2.9999999999999996
    k = math.floor(age / b.bin_width + 1e-9)
    return min(k, b.n_bins - 1)


class Abstraction(enum.Enum):
    DL_AOL = "dl_aol"
    UL_AOL = "ul_aol"
    DL_AOI = "dl_aoi"
    UL_AOI = "ul_aoi"

    @property
    def column(self) -> int:
        return AGE_FIELDS.index(self.value)


@dataclass
class ValueTable:
    n_bins: int
    initial_value: float = 0.0
    v: np.ndarray = field(init=False)
    visits: np.ndarray = field(init=False)

    def __post_init__(self):
        self.v = np.full(self.n_bins, float(self.initial_value))
        self.visits = np.zeros(self.n_bins, dtype=np.int64)

    @property
    def visited(self) -> np.ndarray:
        return self.visits > 0


def td_update(table: ValueTable, s: int, s_next: int | None, stage_cost: float, alpha: float, gamma: float) -> float:
    """One TD(0) step in place; ``s_next=None`` marks a terminal transition.

    Returns the TD error ``stage_cost + gamma * V(s_next) - V(s)``.
    """
    if not 0 < alpha <= 1:
        raise ValueError("alpha must be in (0, 1]")
    if not 0 < gamma <= 1:
        raise ValueError("gamma must be in (0, 1]")
    nxt = 0.0 if s_next is None else gamma * table.v[s_next]
    delta = stage_cost + nxt - table.v[s]
    table.v[s] += alpha * delta
    table.visits[s] += 1
    return float(delta)


@dataclass(frozen=True)
class AlphaSchedule:
    """Per-state step size alpha0 / (1 + visits * kappa)."""

    alpha0: float = 0.5
    kappa: float = 0.01

    def __call__(self, visits: int) -> float:
        return self.alpha0 / (1.0 + visits * self.kappa)


@dataclass(frozen=True)
class ValueLearningConfig:
    episodes: int = 300
    gamma: float = 0.99
    alpha0: float = 0.5
    kappa: float = 0.01
    bin_width: float = 0.005
    n_bins: int = 20
    # behaviour policy while learning: "episode" draws one menu bandwidth per
    # episode, "decision" draws one per DL transmission, "fixed" uses `bandwidth`
    behavior: str = "episode"
    bandwidth: float | None = None

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if not 0 < self.alpha0 <= 1 or self.kappa < 0:
            raise ValueError("alpha0 must be in (0, 1] and kappa >= 0")
        if self.behavior not in ("episode", "decision", "fixed"):
            raise ValueError(f"unknown behavior {self.behavior!r}")
        if self.behavior == "fixed" and self.bandwidth is None:
            raise ValueError("behavior 'fixed' needs a bandwidth")

    @property
    def binning(self) -> AgeBinning:
        return AgeBinning(self.bin_width, self.n_bins)

    @property
    def alpha(self) -> AlphaSchedule:
        return AlphaSchedule(self.alpha0, self.kappa)


@dataclass
class ValueCurve:
    abstraction: Abstraction
    table: ValueTable
    binning: AgeBinning
    td_error: list[float] = field(default_factory=list)  # per-episode mean |delta|

    def reward(self) -> np.ndarray:
        """Negated value estimates; NaN where a bin was never visited."""
        out = -self.table.v.copy()
        out[~self.table.visited] = np.nan
        return out


def feed_trace(
    table: ValueTable,
    trace: EpisodeTrace,
    column: int,
    binning: AgeBinning,
    alpha: AlphaSchedule,
    gamma: float,
) -> float:
    """Apply TD(0) to every actuation step of one trace. Returns mean |delta|."""
    n = trace.n_steps
    if n == 0:
        return 0.0
    ages = trace.ages[:, column]
    bins = [bin_index(a, binning) for a in ages]
    terminal = trace.termination != "horizon"
    if not terminal:
        bins.append(bin_index(getattr(trace.final_ages, AGE_FIELDS[column]), binning))
    cost = trace.stage_cost
    v, visits = table.v, table.visits
    total = 0.0
    # inlined td_update; the loop is the hot path of value learning
    for k in range(n):
        s = bins[k]
        c = cost[k]
        if k == n - 1 and terminal:
            target = c + trace.terminal_penalty
        else:
            target = c + gamma * v[bins[k + 1]]
        delta = target - v[s]
        v[s] += alpha(visits[s]) * delta
        visits[s] += 1
        total += abs(delta)
    return total / n


def value_policy(cfg: ValueLearningConfig, menu: Sequence[float], rng: np.random.Generator):
    if cfg.behavior == "decision":
        return lambda dl_aol, cqi: float(menu[rng.integers(len(menu))])
    bw = cfg.bandwidth if cfg.behavior == "fixed" else float(menu[rng.integers(len(menu))])
    return lambda dl_aol, cqi: bw


def learn_value_curves(
    scenario: "ScenarioConfig",
    abstractions: Iterable[Abstraction] = (Abstraction.DL_AOL, Abstraction.DL_AOI, Abstraction.UL_AOI),
    episodes: int | None = None,
    seed: int | None = None,
    link=None,
) -> dict[Abstraction, ValueCurve]:
    """Learn one value curve per age abstraction from a shared set of episodes.

    Every episode is simulated once and its actuation steps feed each
    abstraction's table, so the TD-error traces are compared on identical
    data. Episodes run with the LQR controller and a bandwidth held fixed
    within each episode.
    """
    vcfg = scenario.value
    n_eps = episodes if episodes is not None else vcfg.episodes
    binning = vcfg.binning
    alpha = vcfg.alpha
    curves = {a: ValueCurve(a, ValueTable(binning.n_bins), binning) for a in abstractions}
    for ep in range(n_eps):
        setup = scenario.episode(ep, seed=seed)
        trace = run_episode(
            setup.loop,
            scenario.plant,
            scenario.lqr_solution,
            scenario.weights,
            setup.cqi_dl,
            setup.cqi_ul,
            value_policy(vcfg, scenario.menu, setup.policy_rng),
            link=link if link is not None else scenario.link,
            plant_rng=setup.plant_rng,
        )
        for a, curve in curves.items():
            curve.td_error.append(feed_trace(curve.table, trace, a.column, binning, alpha, vcfg.gamma))
    return curves


def learn_value_curve(scenario: "ScenarioConfig", abstraction: Abstraction = Abstraction.DL_AOL, episodes=None, seed=None, link=None) -> ValueCurve:
    return learn_value_curves(scenario, (abstraction,), episodes, seed, link)[abstraction]


def terminal_td_error(curve: ValueCurve, fraction: float = 0.1) -> float:
    """Mean of the per-episode |TD error| over the last ``fraction`` of episodes."""
    n = max(1, int(round(len(curve.td_error) * fraction)))
    return float(np.mean(curve.td_error[-n:]))
