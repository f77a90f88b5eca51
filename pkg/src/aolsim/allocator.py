"""DL bandwidth allocation: tabular epsilon-greedy TD control and fixed baselines.

The decision state is (DL-AoL bin, CQI) observed at every DL transmission
start; the per-decision cost is the quadratic cost integrated until the next
decision plus the chosen bandwidth normalised by the largest menu entry.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np

from aolsim import channel
from aolsim.learning import AgeBinning, bin_index
from aolsim.loopsim import EpisodeTrace, run_episode

if TYPE_CHECKING:
    from aolsim.config import ScenarioConfig

N_CQI = channel.CQI_MAX - channel.CQI_MIN + 1
QTABLE_FORMAT = "aolsim-qtable v1"
DEFAULT_MENU = tuple(float(k * 100e3) for k in range(1, 11))


@dataclass(frozen=True)
class McState:
    aol_bin: int
    cqi: int

    @property
    def index(self) -> int:
        return encode_state(self.aol_bin, self.cqi)


def encode_state(aol_bin: int, cqi: int) -> int:
    return aol_bin * N_CQI + (cqi - channel.CQI_MIN)


def decode_state(index: int) -> McState:
    b, c = divmod(index, N_CQI)
    return McState(b, c + channel.CQI_MIN)


@dataclass(frozen=True)
class BandwidthMenu:
    values: tuple[float, ...] = DEFAULT_MENU

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if not vals:
            raise ValueError("bandwidth menu is empty")
        if any(v <= 0 for v in vals) or any(b <= a for a, b in zip(vals, vals[1:])):
            raise ValueError("bandwidth menu must be positive and strictly increasing")
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return len(self.values)

    def __getitem__(self, i):
        return self.values[i]

    def __iter__(self):
        return iter(self.values)

    @property
    def b_max(self) -> float:
        return self.values[-1]

    def index(self, bandwidth: float) -> int:
        return self.values.index(float(bandwidth))


@dataclass
class QTable:
    n_states: int
    n_actions: int
    q: np.ndarray = field(init=False)
    visits: np.ndarray = field(init=False)

    def __post_init__(self):
        self.q = np.zeros((self.n_states, self.n_actions))
        self.visits = np.zeros((self.n_states, self.n_actions), dtype=np.int64)

    def greedy(self, s: int) -> int:
        # np.argmin returns the first minimum, i.e. the lowest bandwidth on ties
        return int(np.argmin(self.q[s]))


@dataclass(frozen=True)
class TrainSchedule:
    episodes: int = 20000
    eps0: float = 1.0
    eps_decay: float = 0.995  # per-episode multiplicative factor
    eps_floor: float = 0.05
    alpha0: float = 0.3
    alpha_decay: float = 0.999
    alpha_floor: float = 0.01
    gamma: float = 0.95
    # gamma applies per gamma_period seconds between decisions (semi-Markov
    # discounting); None discounts once per decision regardless of spacing
    gamma_period: float | None = 0.005
    rule: str = "q_learning"  # or "sarsa"
    # per-pair cap (n + 1)^-visit_exponent on the step size; 0 disables it
    visit_exponent: float = 0.7

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if not 0 < self.eps0 <= 1:
            raise ValueError("eps0 must be in (0, 1]")
        if not (0 < self.eps_decay <= 1 and 0 < self.alpha_decay <= 1):
            raise ValueError("decay factors must be in (0, 1]")
        if self.eps_floor < 0 or self.alpha_floor < 0:
            raise ValueError("floors must be >= 0")
        if not 0 < self.alpha0 <= 1:
            raise ValueError("alpha0 must be in (0, 1]")
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must be in [0, 1]")
        if self.gamma_period is not None and not self.gamma_period > 0:
            raise ValueError("gamma_period must be > 0 or null")
        if not 0 <= self.visit_exponent <= 1:
            raise ValueError("visit_exponent must be in [0, 1]")
        if self.rule not in ("q_learning", "sarsa"):
            raise ValueError(f"unknown TD control rule {self.rule!r}")

    def eps(self, episode: int) -> float:
        return max(self.eps_floor, self.eps0 * self.eps_decay**episode)

    def alpha(self, episode: int) -> float:
        return max(self.alpha_floor, self.alpha0 * self.alpha_decay**episode)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def stage_cost(lqr_cost: float, chosen: float, menu: BandwidthMenu) -> float:
    """Quadratic cost between decisions plus the normalised bandwidth b / b_max."""
    if float(chosen) not in menu.values:
        raise ValueError(f"bandwidth {chosen!r} is not in the menu")
    return lqr_cost + chosen / menu.b_max


def select_action(q: QTable, s: int, eps: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy over costs; returns an action index."""
    if not 0 <= eps <= 1:
        raise ValueError("eps must be in [0, 1]")
    if rng.random() < eps:
        return int(rng.integers(q.n_actions))
    return q.greedy(s)


def q_update(
    q: QTable,
    s: int,
    a: int,
    cost: float,
    s_next: int | None,
    alpha: float,
    gamma: float,
    a_next: int | None = None,
) -> float:
    """TD control step on costs, in place; returns the TD error.

    With ``a_next`` the bootstrap uses q(s_next, a_next) (SARSA), otherwise
    min over actions (Q-learning). ``s_next=None`` is a terminal transition.
    """
    if not 0 < alpha <= 1:
        raise ValueError("alpha must be in (0, 1]")
    if s_next is None:
        boot = 0.0
    elif a_next is None:
        boot = float(q.q[s_next].min())
    else:
        boot = float(q.q[s_next, a_next])
    delta = cost + gamma * boot - q.q[s, a]
    q.q[s, a] += alpha * delta
    q.visits[s, a] += 1
    return float(delta)


# --- policies -----------------------------------------------------------------------------


def fixed_deadline(deadline: float, payload: float, menu: BandwidthMenu, table: channel.CqiTable = channel.DEFAULT_TABLE):
    """Smallest bandwidth meeting a fixed delivery deadline for the current CQI."""
    if not deadline > 0:
        raise ValueError("deadline must be > 0")
    per_cqi = {c: channel.min_bandwidth_for_deadline(payload, c, deadline, menu.values, table) for c in table.efficiency}
    return lambda dl_aol, cqi: per_cqi[cqi]


def fixed_bandwidth(b: float, menu: BandwidthMenu):
    if float(b) not in menu.values:
        raise ValueError(f"bandwidth {b!r} is not in the menu")
    return lambda dl_aol, cqi: float(b)


def baseline_policy(kind: str, value: float, payload: float, menu: BandwidthMenu, table=channel.DEFAULT_TABLE):
    """``kind`` is ``fixed_deadline`` (value = T_r in s) or ``fixed_bandwidth`` (value in Hz)."""
    if kind == "fixed_deadline":
        return fixed_deadline(value, payload, menu, table)
    if kind == "fixed_bandwidth":
        return fixed_bandwidth(value, menu)
    raise ValueError(f"unknown baseline kind {kind!r}")


class EpsGreedyPolicy:
    """Loop policy callback that records the action indices it takes."""

    def __init__(self, q: QTable, menu: BandwidthMenu, binning: AgeBinning, eps: float, rng: np.random.Generator):
        self.q, self.menu, self.binning, self.eps, self.rng = q, menu, binning, eps, rng
        self.actions: list[int] = []

    def __call__(self, dl_aol: float, cqi: int) -> float:
        s = encode_state(bin_index(dl_aol, self.binning), cqi)
        a = select_action(self.q, s, self.eps, self.rng) if self.eps > 0 else self.q.greedy(s)
        self.actions.append(a)
        return self.menu[a]


def greedy_policy(q: QTable, menu: BandwidthMenu, binning: AgeBinning):
    def policy(dl_aol, cqi):
        return menu[q.greedy(encode_state(bin_index(dl_aol, binning), cqi))]

    return policy


# --- training -----------------------------------------------------------------------------


@dataclass
class TrainLogRow:
    episode: int
    eps: float
    alpha: float
    dt_in: float
    cqi: int
    total_lqr_cost: float
    total_bw_norm: float
    decisions: int
    mean_stage_cost: float
    termination: str


def update_from_trace(
    q: QTable,
    trace: EpisodeTrace,
    actions: Sequence[int],
    menu: BandwidthMenu,
    binning: AgeBinning,
    alpha: float,
    gamma: float,
    rule: str = "q_learning",
    visit_exponent: float = 0.0,
    gamma_period: float | None = None,
) -> list[float]:
    """Replay one episode's decisions through TD control. Returns per-decision stage costs.

    The step size of each (state, action) pair is min(alpha, (n + 1)^-omega)
    with n its prior visit count. An episode holds thousands of decisions, so
    the per-episode alpha alone would keep only the last few dozen noisy
    targets. A harmonic cap (omega = 1) fixes the noise but never forgets
    targets bootstrapped from the early, still-empty table; omega < 1 does both.

    With ``gamma_period`` the bootstrap is discounted by
    gamma ** (elapsed / gamma_period), elapsed being the time to the next
    decision (or to the episode end), so the look-ahead spans the same
    stretch of time whether decisions come every millisecond or every 50.
    """
    decs = trace.decisions
    states = [encode_state(bin_index(d.dl_aol, binning), d.cqi) for d in decs]
    terminal = trace.termination != "horizon"
    costs = []
    for k, d in enumerate(decs):
        c = stage_cost(d.lqr_cost, d.bandwidth, menu)
        costs.append(c)
        a_next = None
        if k + 1 < len(decs):
            s_next = states[k + 1]
            if rule == "sarsa":
                a_next = actions[k + 1]
        elif terminal:
            s_next = None
            c += trace.terminal_penalty
        else:
            s_next = encode_state(bin_index(trace.final_ages.dl_aol, binning), d.cqi)
            if rule == "sarsa":
                a_next = q.greedy(s_next)
        g = gamma
        if gamma_period is not None:
            t_next = decs[k + 1].t if k + 1 < len(decs) else trace.t_end
            g = gamma ** ((t_next - d.t) / gamma_period)
        step = min(alpha, (q.visits[states[k], actions[k]] + 1.0) ** -visit_exponent)
        q_update(q, states[k], actions[k], c, s_next, step, g, a_next)
    return costs


def train(
    scenario: "ScenarioConfig",
    menu: BandwidthMenu | None = None,
    schedule: TrainSchedule | None = None,
    seed: int | None = None,
    progress: Callable[[TrainLogRow], None] | None = None,
) -> tuple[QTable, list[TrainLogRow]]:
    """Train the allocation table over ``schedule.episodes`` sequential episodes."""
    menu = menu or scenario.bandwidth_menu
    schedule = schedule or scenario.train
    binning = scenario.value.binning
    q = QTable(binning.n_bins * N_CQI, len(menu))
    log = []
    for ep in range(schedule.episodes):
        eps, alpha = schedule.eps(ep), schedule.alpha(ep)
        setup = scenario.episode(ep, seed=seed)
        pol = EpsGreedyPolicy(q, menu, binning, eps, setup.policy_rng)
        trace = run_episode(
            setup.loop,
            scenario.plant,
            scenario.lqr_solution,
            scenario.weights,
            setup.cqi_dl,
            setup.cqi_ul,
            pol,
            link=scenario.link,
            plant_rng=setup.plant_rng,
            menu=menu.values,
        )
        costs = update_from_trace(
            q,
            trace,
            pol.actions,
            menu,
            binning,
            alpha,
            schedule.gamma,
            schedule.rule,
            schedule.visit_exponent,
            schedule.gamma_period,
        )
        row = TrainLogRow(
            episode=ep,
            eps=eps,
            alpha=alpha,
            dt_in=setup.loop.dt_in,
            cqi=setup.cqi_dl,
            total_lqr_cost=trace.total_cost,
            total_bw_norm=sum(d.bandwidth for d in trace.decisions) / menu.b_max,
            decisions=len(trace.decisions),
            mean_stage_cost=float(np.mean(costs)) if costs else 0.0,
            termination=trace.termination,
        )
        log.append(row)
        if progress:
            progress(row)
    return q, log


def write_train_log(log: Sequence[TrainLogRow], path) -> None:
    cols = list(TrainLogRow.__dataclass_fields__)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in log:
            w.writerow([repr(v) if isinstance(v, float) else v for v in (getattr(row, c) for c in cols)])


# --- persistence --------------------------------------------------------------------------


def save_qtable(q: QTable, path, binning: AgeBinning, menu: BandwidthMenu, schedule: TrainSchedule) -> None:
    header = {
        "binning": {"bin_width": binning.bin_width, "n_bins": binning.n_bins},
        "menu": list(menu.values),
        "schedule_sha": schedule.digest(),
    }
    with open(path, "w", newline="") as fh:
        fh.write(f"# {QTABLE_FORMAT}\n")
        fh.write(f"# {json.dumps(header, sort_keys=True)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(
            ["state", "aol_bin", "cqi"]
            + [f"q_{a}" for a in range(q.n_actions)]
            + [f"n_{a}" for a in range(q.n_actions)]
        )
        for s in range(q.n_states):
            st = decode_state(s)
            w.writerow([s, st.aol_bin, st.cqi] + [repr(float(v)) for v in q.q[s]] + [int(n) for n in q.visits[s]])


def load_qtable(path) -> tuple[QTable, AgeBinning, BandwidthMenu, str]:
    """Returns (table, binning, menu, schedule digest)."""
    with open(path) as fh:
        magic = fh.readline().strip()
        if magic != f"# {QTABLE_FORMAT}":
            raise ValueError(f"{path}: not a {QTABLE_FORMAT} file (got {magic!r})")
        header = json.loads(fh.readline()[1:])
        rows = list(csv.reader(fh))
    binning = AgeBinning(**header["binning"])
    menu = BandwidthMenu(tuple(header["menu"]))
    n_actions = len(menu)
    q = QTable(binning.n_bins * N_CQI, n_actions)
    body = rows[1:]
    if len(body) != q.n_states:
        raise ValueError(f"{path}: expected {q.n_states} state rows, found {len(body)}")
    for r in body:
        s = int(r[0])
        q.q[s] = [float(v) for v in r[3 : 3 + n_actions]]
        q.visits[s] = [int(v) for v in r[3 + n_actions : 3 + 2 * n_actions]]
    return q, binning, menu, header["schedule_sha"]


# --- evaluation ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EpisodeOutcome:
    index: int
    dt_in: float
    cqi: int
    bw_norm: float  # sum of b_i / b_max over decisions
    bw_hz: float  # sum of raw b_i over decisions
    decisions: int
    lqr_cost: float
    total_cost: float  # lqr cost plus terminal penalty
    termination: str
    discounted_cost_to_go: float  # mean over steps, see discounted_cost_to_go()


def discounted_cost_to_go(stage_cost: np.ndarray, gamma: float, tail_tol: float = 1e-2) -> float:
    """Mean over steps of sum_k gamma^k c_{t+k}, skipping steps whose window is truncated.

    Steps closer to the end than log(tail_tol)/log(gamma) are left out so the
    truncated tail stays below ``tail_tol`` relative weight.
    """
    n = len(stage_cost)
    if n == 0 or gamma <= 0:
        return float(np.mean(stage_cost)) if n else 0.0
    tail = int(math.ceil(math.log(tail_tol) / math.log(gamma))) if gamma < 1 else n
    g = np.zeros(n)
    acc = 0.0
    for k in range(n - 1, -1, -1):
        acc = stage_cost[k] + gamma * acc
        g[k] = acc
    keep = max(1, n - tail)
    return float(g[:keep].mean())


def evaluate_episode(scenario: "ScenarioConfig", policy_factory, index: int, dt_in: float, seed: int) -> EpisodeOutcome:
    setup = scenario.episode(index, seed=seed, dt_in=dt_in)
    policy = policy_factory(setup)
    trace = run_episode(
        setup.loop,
        scenario.plant,
        scenario.lqr_solution,
        scenario.weights,
        setup.cqi_dl,
        setup.cqi_ul,
        policy,
        link=scenario.link,
        plant_rng=setup.plant_rng,
    )
    menu = scenario.bandwidth_menu
    return EpisodeOutcome(
        index=index,
        dt_in=dt_in,
        cqi=setup.cqi_dl,
        bw_norm=sum(d.bandwidth for d in trace.decisions) / menu.b_max,
        bw_hz=float(sum(d.bandwidth for d in trace.decisions)),
        decisions=len(trace.decisions),
        lqr_cost=trace.lqr_cost,
        total_cost=trace.total_cost,
        termination=trace.termination,
        discounted_cost_to_go=discounted_cost_to_go(trace.stage_cost, scenario.value.gamma),
    )
