"""Event-driven co-simulation of the wireless control loop with loop-age bookkeeping.

The simulation clock is an integer count of nanoseconds so that periodic
grids, transmission deadlines and simultaneous events compare exactly.
Simultaneous events are served in the order deliveries, controller
reaction, sensing, actuation, then by insertion order.
"""

from __future__ import annotations

import csv
import heapq
from dataclasses import dataclass
from typing import Callable, NamedTuple, Protocol, Sequence

import numpy as np

from aolsim import channel
from aolsim.lqr import CostWeights, LqrSolution
from aolsim.plant import PlantParams, SimulationFault, StateVector, has_fallen, sample_initial_state, step

NS = 1_000_000_000

# event priorities for equal timestamps
_DELIVERY, _CONTROLLER, _SENSE, _ACTUATE = 0, 1, 2, 3

AGE_FIELDS = ("dl_aol", "ul_aol", "dl_aoi", "ul_aoi")


class LoopConfigError(ValueError):
    pass


def to_ns(seconds: float) -> int:
    return int(round(seconds * NS))


@dataclass(frozen=True)
class LoopConfig:
    dt_in: float = 0.005
    dt_out: float = 0.001
    payload: float = 1024.0
    ul_bandwidth: float = 10e6
    horizon: float = 10.0
    seed: int = 0
    terminal_penalty: float = 10.0

    def __post_init__(self):
        if not self.dt_out > 0:
            raise LoopConfigError("dt_out must be > 0")
        if not self.dt_in >= self.dt_out:
            raise LoopConfigError("dt_in must be >= dt_out")
        if to_ns(self.dt_in) % to_ns(self.dt_out):
            raise LoopConfigError("dt_in must be an integer multiple of dt_out")
        if not self.horizon > 0:
            raise LoopConfigError("horizon must be > 0")
        if not self.payload > 0 or not self.ul_bandwidth > 0:
            raise LoopConfigError("payload and ul_bandwidth must be > 0")
        if self.terminal_penalty < 0:
            raise LoopConfigError("terminal_penalty must be >= 0")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt_out))


class TimedSample(NamedTuple):
    state: StateVector
    t_i: int
    t_hat_j: int


class TimedCommand(NamedTuple):
    u: float
    t_hat_j: int
    t_i: int


@dataclass(frozen=True)
class AgeClocks:
    dl_aol: float
    ul_aol: float
    dl_aoi: float
    ul_aoi: float

    def get(self, name: str) -> float:
        return getattr(self, name)


@dataclass
class AgeOrigins:
    """Generation timestamps (ns) that the four age clocks are measured from.

    dl_aol: t_hat_j carried by the freshest sample held by the controller.
    ul_aoi: t_i of that sample.
    ul_aol: t_i carried by the command currently applied at the plant.
    dl_aoi: t_hat_j of the freshest command received at the plant.
    """

    dl_aol: int = 0
    ul_aol: int = 0
    dl_aoi: int = 0
    ul_aoi: int = 0


def age_at(origins: AgeOrigins, now: int) -> AgeClocks:
    """Recompute all ages at ``now`` (ns) from the stored origins."""
    if now < max(origins.dl_aol, origins.ul_aol, origins.dl_aoi, origins.ul_aoi):
        raise ValueError("age queried before a stored event time")
    return AgeClocks(
        (now - origins.dl_aol) / NS,
        (now - origins.ul_aol) / NS,
        (now - origins.dl_aoi) / NS,
        (now - origins.ul_aoi) / NS,
    )


class Link(Protocol):
    def ul_latency(self, payload: float, cqi: int) -> float: ...

    def dl_latency(self, payload: float, bandwidth: float, cqi: int) -> float: ...


@dataclass(frozen=True)
class CqiLink:
    """Latencies from the CQI efficiency table; UL uses a fixed bandwidth."""

    ul_bandwidth: float
    table: channel.CqiTable = channel.DEFAULT_TABLE

    def ul_latency(self, payload, cqi):
        return channel.latency(channel.TransmissionSpec(payload, self.ul_bandwidth, cqi), self.table)

    def dl_latency(self, payload, bandwidth, cqi):
        return channel.latency(channel.TransmissionSpec(payload, bandwidth, cqi), self.table)


@dataclass(frozen=True)
class FixedLatencyLink:
    ul: float = 0.0
    dl: float = 0.0

    def ul_latency(self, payload, cqi):
        return self.ul

    def dl_latency(self, payload, bandwidth, cqi):
        return self.dl


IDEAL_LINK = FixedLatencyLink(0.0, 0.0)

Policy = Callable[[float, int], float]


class LoopEvent(NamedTuple):
    t: int
    kind: str  # sense | ul_delivery | command | dl_delivery | actuate
    ages: AgeClocks
    info: dict


class Decision(NamedTuple):
    t: float
    dl_aol: float
    cqi: int
    bandwidth: float
    lqr_cost: float  # quadratic cost integrated until the next decision (or episode end)


@dataclass
class EpisodeTrace:
    t: np.ndarray
    states: np.ndarray
    u: np.ndarray
    ages: np.ndarray  # columns follow AGE_FIELDS
    stage_cost: np.ndarray
    decisions: list[Decision]
    final_ages: AgeClocks
    termination: str  # horizon | fallen | fault
    terminal_penalty: float
    cqi_dl: int
    cqi_ul: int
    x0: StateVector
    samples_overwritten: int = 0
    t_end: float = 0.0  # simulation time when the episode stopped (s)

    @property
    def lqr_cost(self) -> float:
        return float(self.stage_cost.sum())

    @property
    def total_cost(self) -> float:
        return self.lqr_cost + self.terminal_penalty

    @property
    def n_steps(self) -> int:
        return len(self.t)

    def age_series(self, name: str) -> np.ndarray:
        return self.ages[:, AGE_FIELDS.index(name)]

    def write_steps_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "x", "x_dot", "theta", "theta_dot", "u", *AGE_FIELDS, "stage_cost"])
            for k in range(len(self.t)):
                w.writerow(
                    [repr(float(self.t[k]))]
                    + [repr(float(v)) for v in self.states[k]]
                    + [repr(float(self.u[k]))]
                    + [repr(float(v)) for v in self.ages[k]]
                    + [repr(float(self.stage_cost[k]))]
                )

    def write_decisions_csv(self, path, bin_of: Callable[[float], int]) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "aol_bin", "cqi", "bandwidth", "stage_cost_until_next_decision"])
            for d in self.decisions:
                w.writerow([repr(d.t), bin_of(d.dl_aol), d.cqi, repr(float(d.bandwidth)), repr(d.lqr_cost)])


def episode_streams(seed: int, index: int = 0) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    """Independent (plant, channel, policy) generators for one episode."""
    children = np.random.SeedSequence([seed, index]).spawn(3)
    return tuple(np.random.default_rng(c) for c in children)


def validate_uplink(cfg: LoopConfig, link: Link, cqi_ul: int) -> None:
    lat = link.ul_latency(cfg.payload, cqi_ul)
    if to_ns(lat) > to_ns(cfg.dt_in):
        raise LoopConfigError(
            f"UL latency {lat * 1e3:.4f} ms at CQI {cqi_ul} exceeds dt_in {cfg.dt_in * 1e3:g} ms; "
            "raise ul_bandwidth or dt_in"
        )


def run_episode(
    cfg: LoopConfig,
    plant_params: PlantParams,
    lqr_sol: LqrSolution,
    weights: CostWeights,
    cqi_dl: int,
    cqi_ul: int,
    policy: Policy,
    observers: Sequence[Callable[[LoopEvent], None]] = (),
    *,
    link: Link | None = None,
    plant_rng: np.random.Generator | None = None,
    x0: StateVector | None = None,
    menu: Sequence[float] | None = None,
    noise: bool = True,
) -> EpisodeTrace:
    """Simulate one episode of the sensing/uplink/controller/downlink/actuation loop.

    ``policy(dl_aol_seconds, cqi_dl)`` picks the DL bandwidth at every
    transmission start. The plant RNG supplies the initial angle (unless
    ``x0`` is given) and one disturbance draw per actuation step.
    """
    link = link if link is not None else CqiLink(cfg.ul_bandwidth)
    validate_uplink(cfg, link, cqi_ul)
    if plant_rng is None:
        plant_rng = episode_streams(cfg.seed)[0]
    state = StateVector(*x0) if x0 is not None else sample_initial_state(plant_rng, plant_params)
    x_init = state
    n_steps = cfg.n_steps
    w_all = plant_rng.standard_normal(n_steps) * plant_params.noise_sigma
    if not noise:
        w_all[:] = 0.0

    dt_in, dt_out, horizon = to_ns(cfg.dt_in), to_ns(cfg.dt_out), n_steps * to_ns(cfg.dt_out)
    dt_out_s = dt_out / NS
    ul_lat = to_ns(link.ul_latency(cfg.payload, cqi_ul))
    K = tuple(float(k) for k in lqr_sol.gain)
    Qm = tuple(tuple(float(v) for v in row) for row in weights.Q)
    r = float(weights.R[0, 0])
    payload = cfg.payload
    menu_set = set(menu) if menu is not None else None

    t_arr = np.empty(n_steps)
    x_arr = np.empty((n_steps, 4))
    u_arr = np.empty(n_steps)
    age_arr = np.empty((n_steps, 4))
    cost_arr = np.empty(n_steps)

    queue: list = []
    seq = 0

    def push(t, prio, kind, data=None):
        nonlocal seq
        heapq.heappush(queue, (t, prio, seq, kind, data))
        seq += 1

    org = AgeOrigins()
    # controller memory and DL state
    ctrl_sample: TimedSample | None = None
    last_served_ti = -1
    dl_busy = False
    # plant memory
    received_cmd = TimedCommand(0.0, 0, 0)
    applied_cmd = received_cmd

    decisions_raw: list[list] = []
    cum_cost = 0.0
    overwritten = 0
    termination = "horizon"
    penalty = 0.0
    steps_done = 0
    notify = bool(observers)

    def emit(t, kind, **info):
        ev = LoopEvent(t, kind, age_at(org, t), info)
        for ob in observers:
            ob(ev)

    push(0, _SENSE, "sense")
    push(0, _ACTUATE, "actuate")

    while queue:
        now, _, _, kind, data = heapq.heappop(queue)

        if kind == "actuate":
            applied_cmd = received_cmd
            org.ul_aol = applied_cmd.t_i
            u = applied_cmd.u
            x = state
            # x'Qx + r u^2, left endpoint
            qx = 0.0
            for i in range(4):
                row = Qm[i]
                qx += x[i] * (row[0] * x[0] + row[1] * x[1] + row[2] * x[2] + row[3] * x[3])
            c = (qx + r * u * u) * dt_out_s
            m = steps_done
            t_arr[m] = now / NS
            x_arr[m] = x
            u_arr[m] = u
            age_arr[m] = (
                (now - org.dl_aol) / NS,
                (now - org.ul_aol) / NS,
                (now - org.dl_aoi) / NS,
                (now - org.ul_aoi) / NS,
            )
            cost_arr[m] = c
            cum_cost += c
            steps_done += 1
            if notify:
                emit(now, "actuate", u=u, t_i=applied_cmd.t_i, t_hat_j=applied_cmd.t_hat_j)
            try:
                state = step(state, u, dt_out_s, float(w_all[m]), plant_params)
            except SimulationFault:
                termination, penalty = "fault", cfg.terminal_penalty
                now += dt_out
                break
            if has_fallen(state, plant_params):
                termination, penalty = "fallen", cfg.terminal_penalty
                now += dt_out
                break
            if steps_done < n_steps:
                push(now + dt_out, _ACTUATE, "actuate")
            else:
                now = horizon
                break

        elif kind == "sense":
            sample = TimedSample(state, now, applied_cmd.t_hat_j)
            push(now + ul_lat, _DELIVERY, "ul_delivery", sample)
            if notify:
                emit(now, "sense", t_i=sample.t_i, t_hat_j=sample.t_hat_j)
            if now + dt_in < horizon:
                push(now + dt_in, _SENSE, "sense")

        elif kind == "ul_delivery":
            if ctrl_sample is not None and ctrl_sample.t_i > last_served_ti:
                overwritten += 1
            ctrl_sample = data
            org.dl_aol = data.t_hat_j
            org.ul_aoi = data.t_i
            if notify:
                emit(now, "ul_delivery", t_i=data.t_i, t_hat_j=data.t_hat_j)
            push(now, _CONTROLLER, "controller")

        elif kind == "controller":
            if dl_busy or ctrl_sample is None or ctrl_sample.t_i <= last_served_ti:
                continue
            s = ctrl_sample.state
            u = -(K[0] * s[0] + K[1] * s[1] + K[2] * s[2] + K[3] * s[3])
            cmd = TimedCommand(u, now, ctrl_sample.t_i)
            last_served_ti = ctrl_sample.t_i
            dl_aol = (now - org.dl_aol) / NS
            bw = policy(dl_aol, cqi_dl)
            if menu_set is not None and bw not in menu_set:
                raise ValueError(f"policy returned bandwidth {bw!r} outside the menu")
            dl_busy = True
            decisions_raw.append([now / NS, dl_aol, cqi_dl, bw, cum_cost])
            if notify:
                emit(now, "command", u=u, t_i=cmd.t_i, t_hat_j=cmd.t_hat_j, bandwidth=bw)
            push(now + to_ns(link.dl_latency(payload, bw, cqi_dl)), _DELIVERY, "dl_delivery", cmd)

        elif kind == "dl_delivery":
            dl_busy = False
            received_cmd = data
            org.dl_aoi = data.t_hat_j
            if notify:
                emit(now, "dl_delivery", t_i=data.t_i, t_hat_j=data.t_hat_j)
            push(now, _CONTROLLER, "controller")

    decisions = []
    for k, (t, aol, cqi, bw, c0) in enumerate(decisions_raw):
        c1 = decisions_raw[k + 1][4] if k + 1 < len(decisions_raw) else cum_cost
        decisions.append(Decision(t, aol, cqi, bw, c1 - c0))

    return EpisodeTrace(
        t=t_arr[:steps_done],
        states=x_arr[:steps_done],
        u=u_arr[:steps_done],
        ages=age_arr[:steps_done],
        stage_cost=cost_arr[:steps_done],
        decisions=decisions,
        final_ages=age_at(org, now),
        termination=termination,
        terminal_penalty=penalty,
        cqi_dl=cqi_dl,
        cqi_ul=cqi_ul,
        x0=x_init,
        samples_overwritten=overwritten,
        t_end=now / NS,
    )
