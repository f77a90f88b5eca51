"""Experiment pipelines behind the command-line subcommands.

Every pipeline writes CSVs first and renders figures from those CSVs, and
drops a ``manifest.json`` (config digest, seeds, package versions) plus the
resolved ``config.yaml`` next to them. Nothing written depends on wall-clock
time, so reruns with the same configuration are byte-identical.
"""

from __future__ import annotations

import csv
import json
import math
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import matplotlib
import numpy as np
import yaml

import aolsim
from aolsim import plots
from aolsim.allocator import (
    EpisodeOutcome,
    baseline_policy,
    evaluate_episode,
    greedy_policy,
    load_qtable,
    save_qtable,
    train,
    write_train_log,
)
from aolsim.config import ScenarioConfig
from aolsim.learning import Abstraction, ValueCurve, learn_value_curves, terminal_td_error
from aolsim.loopsim import run_episode

ALL_ABSTRACTIONS = (Abstraction.DL_AOL, Abstraction.UL_AOL, Abstraction.DL_AOI, Abstraction.UL_AOI)
Z95 = 1.959963984540054


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_rows(path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def write_manifest(out: Path, scenario: ScenarioConfig, command: str, seeds, **extra) -> None:
    out.mkdir(parents=True, exist_ok=True)
    scenario.dump(out / "config.yaml")
    manifest = {
        "command": command,
        "config_sha256": scenario.digest(),
        "seeds": list(seeds),
        "versions": {
            "aolsim": aolsim.__version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "pyyaml": yaml.__version__,
            "matplotlib": matplotlib.__version__,
        },
        **extra,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


# --- policies -------------------------------------------------------------------------------


def make_policy_factory(spec: str, scenario: ScenarioConfig) -> Callable:
    """Parse ``fixed:<Hz>``, ``deadline:<s>``, ``random`` or ``rl:<qtable>`` into a factory.

    The factory takes an ``EpisodeSetup`` and returns the loop policy for it.
    """
    kind, _, arg = spec.partition(":")
    menu = scenario.bandwidth_menu
    if kind == "fixed":
        pol = baseline_policy("fixed_bandwidth", float(arg), scenario.loop.payload, menu, scenario.cqi_table)
        return lambda setup: pol
    if kind == "deadline":
        pol = baseline_policy("fixed_deadline", float(arg), scenario.loop.payload, menu, scenario.cqi_table)
        return lambda setup: pol
    if kind == "random":
        return lambda setup: (lambda dl_aol, cqi, rng=setup.policy_rng: menu[int(rng.integers(len(menu)))])
    if kind == "rl":
        q, binning, qmenu, _ = load_qtable(arg)
        if tuple(qmenu.values) != tuple(menu.values):
            raise ValueError(f"{arg}: bandwidth menu differs from the scenario menu")
        pol = greedy_policy(q, qmenu, binning)
        return lambda setup: pol
    raise ValueError(f"unknown policy {spec!r}; use fixed:<Hz>, deadline:<s>, random or rl:<path>")


# --- simulate -------------------------------------------------------------------------------


def run_simulate(scenario: ScenarioConfig, out: Path, episodes: int | None = None) -> list[dict]:
    sim = scenario.simulate
    n = sim.episodes if episodes is None else episodes
    factory = make_policy_factory(sim.policy, scenario)
    out = Path(out)
    write_manifest(out, scenario, "simulate", [scenario.seed], episodes=n, policy=sim.policy)
    binning = scenario.value.binning
    b_max = scenario.bandwidth_menu.b_max
    summary = []
    for i in range(n):
        setup = scenario.episode(i, dt_in=sim.dt_in)
        trace = run_episode(
            setup.loop,
            scenario.plant,
            scenario.lqr_solution,
            scenario.weights,
            setup.cqi_dl,
            setup.cqi_ul,
            factory(setup),
            link=scenario.link,
            plant_rng=setup.plant_rng,
        )
        trace.write_steps_csv(out / f"steps_{i:04d}.csv")
        trace.write_decisions_csv(out / f"decisions_{i:04d}.csv", binning)
        summary.append(
            {
                "episode": i,
                "dt_in_ms": setup.loop.dt_in * 1e3,
                "cqi_dl": setup.cqi_dl,
                "cqi_ul": setup.cqi_ul,
                "steps": trace.n_steps,
                "decisions": len(trace.decisions),
                "bw_norm": sum(d.bandwidth for d in trace.decisions) / b_max,
                "lqr_cost": trace.lqr_cost,
                "total_cost": trace.total_cost,
                "termination": trace.termination,
            }
        )
    cols = list(summary[0]) if summary else ["episode"]
    write_rows(out / "summary.csv", cols, ([r[c] for c in cols] for r in summary))
    return summary


# --- value curves ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CurveShape:
    """Plateau-then-degrade summary of a reward curve (reward = -V, higher is better)."""

    first: float  # reward of the 0-5 ms bin
    plateau_mean: float
    plateau_min: float
    plateau_max: float
    degraded_mean: float

    @property
    def plateau_variation(self) -> float:
        return self.plateau_max - self.plateau_min

    @property
    def drop(self) -> float:
        return self.plateau_mean - self.degraded_mean

    @property
    def first_ok(self) -> bool:
        # the first bin may sit below the plateau by less than the plateau-to-degraded drop
        return self.first >= self.plateau_mean - self.drop

    @property
    def drop_ok(self) -> bool:
        return self.drop >= 5.0 * self.plateau_variation


def _band(binning, lo: float, hi: float) -> list[int]:
    w = binning.bin_width
    return [k for k in range(binning.n_bins) if k * w >= lo - 1e-12 and (k + 1) * w <= hi + 1e-12]


def curve_shape(reward: np.ndarray, binning, plateau=(0.010, 0.040), degraded=(0.060, 0.100)) -> CurveShape:
    """Summarise a reward curve over the plateau and degraded age bands (seconds)."""
    pl = reward[_band(binning, *plateau)]
    dg = reward[_band(binning, *degraded)]

    def stat(f, v):
        # NaN when no bin in the band was visited
        v = v[~np.isnan(v)]
        return float(f(v)) if v.size else math.nan

    return CurveShape(
        first=float(reward[0]),
        plateau_mean=stat(np.mean, pl),
        plateau_min=stat(np.min, pl),
        plateau_max=stat(np.max, pl),
        degraded_mean=stat(np.mean, dg),
    )


def read_value_curve(path, abstraction: str = "dl_aol") -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if r["abstraction"] == abstraction]
    return np.array([float(r["value"]) if r["value"] not in ("", "nan") else np.nan for r in rows])


def run_learn_value(
    scenario: ScenarioConfig, out: Path, episodes: int | None = None, abstractions=ALL_ABSTRACTIONS
) -> dict[Abstraction, ValueCurve]:
    out = Path(out)
    n = scenario.value.episodes if episodes is None else episodes
    write_manifest(out, scenario, "learn-value", [scenario.seed], episodes=n)
    curves = learn_value_curves(scenario, abstractions, episodes=n)
    binning = scenario.value.binning
    rows = []
    for a, c in curves.items():
        r = c.reward()
        for k, (lo, hi) in enumerate(binning.edges_ms()):
            rows.append([a.value, k, lo, hi, "" if np.isnan(r[k]) else float(r[k]), int(c.table.visits[k])])
    write_rows(out / "value_curve.csv", ["abstraction", "bin", "bin_low_ms", "bin_high_ms", "value", "visits"], rows)
    write_rows(
        out / "td_error.csv",
        ["episode", "abstraction", "mean_abs_td_error"],
        ([ep, a.value, e] for a, c in curves.items() for ep, e in enumerate(c.td_error)),
    )
    summary = []
    for a, c in curves.items():
        sh = curve_shape(c.reward(), binning)
        summary.append([a.value, terminal_td_error(c), sh.first, sh.plateau_mean, sh.plateau_variation, sh.degraded_mean, sh.drop])
    write_rows(
        out / "value_summary.csv",
        ["abstraction", "terminal_td_error", "first_bin", "plateau_mean", "plateau_variation", "degraded_mean", "drop"],
        summary,
    )
    plots.plot_value_curve(out / "value_curve.csv", out / "value_curve.svg")
    plots.plot_td_error(out / "td_error.csv", out / "td_error.svg")
    return curves


# --- training -------------------------------------------------------------------------------


def run_train(scenario: ScenarioConfig, out: Path, episodes: int | None = None, progress=None):
    out = Path(out)
    schedule = scenario.train
    if episodes is not None:
        schedule = type(schedule)(**{**asdict(schedule), "episodes": episodes})
    write_manifest(out, scenario, "train", [scenario.seed], episodes=schedule.episodes, schedule_sha=schedule.digest())
    q, log = train(scenario, schedule=schedule, progress=progress)
    save_qtable(q, out / "qtable.csv", scenario.value.binning, scenario.bandwidth_menu, schedule)
    write_train_log(log, out / "train_log.csv")
    plots.plot_train_log(out / "train_log.csv", out / "train_log.svg")
    return q, log


# --- comparison -----------------------------------------------------------------------------


@dataclass(frozen=True)
class MethodTotals:
    method: str
    dt_in_ms: str  # a period in ms, or "all"
    episodes: int
    bw_norm: float
    bw_norm_ci: float
    bw_hz: float
    lqr_cost: float
    lqr_cost_ci: float
    cost_to_go: float  # mean discounted cost-to-go per actuation step
    falls: int


def _total_ci(x: np.ndarray) -> float:
    """95% half-width of a sum of iid terms."""
    return float(Z95 * x.std(ddof=1) * math.sqrt(len(x))) if len(x) > 1 else 0.0


def _totals(method: str, label: str, outs: Sequence[EpisodeOutcome]) -> MethodTotals:
    bw = np.array([o.bw_norm for o in outs])
    lqr = np.array([o.lqr_cost for o in outs])
    return MethodTotals(
        method=method,
        dt_in_ms=label,
        episodes=len(outs),
        bw_norm=float(bw.sum()),
        bw_norm_ci=_total_ci(bw),
        bw_hz=float(sum(o.bw_hz for o in outs)),
        lqr_cost=float(lqr.sum()),
        lqr_cost_ci=_total_ci(lqr),
        cost_to_go=float(np.mean([o.discounted_cost_to_go for o in outs])),
        falls=sum(o.termination != "horizon" for o in outs),
    )


@dataclass(frozen=True)
class PairedDiff:
    """Paired per-episode difference ``a - b`` summed over the evaluation set."""

    a: str
    b: str
    metric: str
    total: float
    ci: float

    @property
    def significant(self) -> bool:
        return abs(self.total) > self.ci


@dataclass
class ComparisonReport:
    totals: list[MethodTotals]
    outcomes: dict[str, list[EpisodeOutcome]]
    seed: int

    def total(self, method: str, dt_in_ms: str = "all") -> MethodTotals:
        for t in self.totals:
            if t.method == method and t.dt_in_ms == dt_in_ms:
                return t
        raise KeyError((method, dt_in_ms))

    def paired(self, a: str, b: str, metric: str = "bw_norm") -> PairedDiff:
        d = np.array([getattr(x, metric) - getattr(y, metric) for x, y in zip(self.outcomes[a], self.outcomes[b])])
        return PairedDiff(a, b, metric, float(d.sum()), _total_ci(d))


def _eval_job(args):
    scenario, spec, index, dt_in, seed = args
    return evaluate_episode(scenario, make_policy_factory(spec, scenario), index, dt_in, seed)


def evaluate_methods(
    scenario: ScenarioConfig, methods: dict[str, str], episodes: int | None = None, seed: int | None = None
) -> ComparisonReport:
    """Evaluate each ``name -> policy spec`` on identical episode seeds and CQI draws.

    Every sensing period in the scenario's sweep gets ``episodes`` episodes.
    """
    ev = scenario.evaluation
    n = ev.episodes if episodes is None else episodes
    seed = scenario.seed + ev.seed_offset if seed is None else seed
    grid = [(i, dt) for dt in scenario.loop.dt_in for i in range(n)]
    outcomes: dict[str, list[EpisodeOutcome]] = {}
    for name, spec in methods.items():
        jobs = [(scenario, spec, i, dt, seed) for i, dt in grid]
        if ev.workers > 1:
            # map() keeps submission order, so results do not depend on scheduling
            with ProcessPoolExecutor(ev.workers) as pool:
                outcomes[name] = list(pool.map(_eval_job, jobs, chunksize=8))
        else:
            outcomes[name] = [_eval_job(j) for j in jobs]
    totals = []
    for name, outs in outcomes.items():
        for dt in scenario.loop.dt_in:
            totals.append(_totals(name, f"{dt * 1e3:g}", [o for o in outs if o.dt_in == dt]))
        totals.append(_totals(name, "all", outs))
    return ComparisonReport(totals, outcomes, seed)


def default_methods(scenario: ScenarioConfig, qtable: str | None) -> dict[str, str]:
    methods = {}
    if qtable is not None:
        methods["RL"] = f"rl:{qtable}"
    for d in scenario.evaluation.deadlines:
        methods[f"T_r={d * 1e3:g}ms"] = f"deadline:{d!r}"
    return methods


def run_compare(
    scenario: ScenarioConfig,
    out: Path,
    qtable: str | None,
    episodes: int | None = None,
    value_curve: str | None = None,
) -> ComparisonReport:
    out = Path(out)
    methods = default_methods(scenario, qtable)
    n = scenario.evaluation.episodes if episodes is None else episodes
    report = evaluate_methods(scenario, methods, n)
    write_manifest(out, scenario, "compare", [report.seed], episodes_per_dt_in=n, methods=methods)
    cols = list(MethodTotals.__dataclass_fields__)
    write_rows(out / "comparison.csv", cols, ([getattr(t, c) for c in cols] for t in report.totals))
    ecols = ["method"] + list(EpisodeOutcome.__dataclass_fields__)
    write_rows(
        out / "episodes.csv",
        ecols,
        ([m] + [getattr(o, c) for c in ecols[1:]] for m, outs in report.outcomes.items() for o in outs),
    )
    names = list(methods)
    ref = names[-1]  # the loosest deadline
    diffs = [report.paired(m, ref, metric) for m in names[:-1] for metric in ("bw_norm", "lqr_cost")]
    write_rows(
        out / "paired.csv",
        ["a", "b", "metric", "total_diff", "ci95", "significant"],
        ([d.a, d.b, d.metric, d.total, d.ci, d.significant] for d in diffs),
    )
    if value_curve is not None:
        sh = curve_shape(read_value_curve(value_curve), scenario.value.binning)
        write_rows(
            out / "plateau_check.csv",
            ["method", "reward_level", "plateau_min", "plateau_max", "within_plateau"],
            (
                [m, -report.total(m).cost_to_go, sh.plateau_min, sh.plateau_max, -report.total(m).cost_to_go >= sh.plateau_min]
                for m in names
            ),
        )
    plots.plot_comparison(out / "comparison.csv", out / "bandwidth.svg", "bw_norm", "total bandwidth (sum b/b_max)")
    plots.plot_comparison(out / "comparison.csv", out / "lqr_cost.svg", "lqr_cost", "total LQR cost")
    return report


# --- seed sweep ------------------------------------------------------------------------------


def run_sweep(scenario: ScenarioConfig, out: Path, seeds: Sequence[int], episodes: int | None = None) -> list[list]:
    """Learn value curves for every seed and tabulate terminal TD errors and curve shape."""
    out = Path(out)
    write_manifest(out, scenario, "sweep", seeds, episodes=episodes or scenario.value.episodes)
    rows = []
    for s in seeds:
        sub = ScenarioConfig(**{**{f: getattr(scenario, f) for f in scenario.__dataclass_fields__}, "seed": s})
        curves = run_learn_value(sub, out / f"seed_{s}", episodes)
        for a, c in curves.items():
            sh = curve_shape(c.reward(), sub.value.binning)
            rows.append([s, a.value, terminal_td_error(c), sh.first_ok, sh.drop_ok])
    write_rows(out / "sweep.csv", ["seed", "abstraction", "terminal_td_error", "first_bin_ok", "drop_ok"], rows)
    return rows
