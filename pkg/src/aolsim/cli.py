"""``aolsim`` command-line entry point.

Exit codes: 0 success, 2 usage, 3 configuration, 4 input/output,
5 simulation fault, 6 LQR solver failure, 1 anything else. On failure one
JSON line ``{"error": <category>, "message": ...}`` goes to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from aolsim import experiments
from aolsim.config import ConfigError, ScenarioConfig, load_config
from aolsim.loopsim import LoopConfigError
from aolsim.lqr import LqrSolverError
from aolsim.plant import DomainError, SimulationFault

EXIT_CODES = {"usage": 2, "config": 3, "io": 4, "simulation": 5, "solver": 6, "internal": 1}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="scenario YAML (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.add_argument("--episodes", type=int, help="override the episode count of this command")
    p.add_argument("--out", type=Path, help="output directory (default: scenario 'out' / command)")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="dotted config override, YAML value")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="aolsim", description="Loop-age-aware bandwidth allocation experiments.")
    sub = ap.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("simulate", help="run episodes with one policy and write traces"))
    _common(sub.add_parser("learn-value", help="learn value curves per age abstraction"))
    _common(sub.add_parser("train", help="train the bandwidth allocation table"))
    p = sub.add_parser("compare", help="evaluate RL and deadline baselines on common seeds")
    _common(p)
    p.add_argument("--qtable", help="trained table (qtable.csv); baselines only when omitted")
    p.add_argument("--value-curve", help="value_curve.csv used for the plateau check")
    p = sub.add_parser("sweep", help="learn value curves over several seeds")
    _common(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    return ap


def _scenario(args) -> ScenarioConfig:
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides)


def _positive(n, what="--episodes"):
    if n is not None and n < 1:
        raise ConfigError(f"{what} must be >= 1")
    return n


def run(args) -> None:
    sc = _scenario(args)
    out = args.out or Path(sc.out) / args.command
    n = _positive(args.episodes)
    if args.command == "simulate":
        rows = experiments.run_simulate(sc, out, n)
        print(f"simulated {len(rows)} episode(s) -> {out}")
    elif args.command == "learn-value":
        curves = experiments.run_learn_value(sc, out, n)
        print(f"value curves for {', '.join(a.value for a in curves)} -> {out}")
    elif args.command == "train":
        q, log = experiments.run_train(sc, out, n)
        print(f"trained {len(log)} episode(s) -> {out / 'qtable.csv'}")
    elif args.command == "compare":
        if args.qtable is not None and not Path(args.qtable).exists():
            raise FileNotFoundError(f"Q-table {args.qtable} not found; run 'aolsim train' first")
        report = experiments.run_compare(sc, out, args.qtable, n, args.value_curve)
        for t in report.totals:
            if t.dt_in_ms == "all":
                print(f"{t.method:>12}  bw {t.bw_norm:10.1f} +- {t.bw_norm_ci:7.1f}  lqr {t.lqr_cost:12.4g}  falls {t.falls}")
    elif args.command == "sweep":
        experiments.run_sweep(sc, out, args.seeds, n)
        print(f"sweep over seeds {args.seeds} -> {out}")


def _category(exc: BaseException) -> str:
    if isinstance(exc, (ConfigError, LoopConfigError)):
        return "config"
    if isinstance(exc, OSError):
        return "io"
    if isinstance(exc, (SimulationFault, DomainError)):
        return "simulation"
    if isinstance(exc, LqrSolverError):
        return "solver"
    if isinstance(exc, ValueError):
        return "config"
    return "internal"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run(args)
    except Exception as exc:  # noqa: BLE001 - mapped onto an exit code
        cat = _category(exc)
        print(json.dumps({"error": cat, "message": str(exc)}), file=sys.stderr)
        return EXIT_CODES[cat]
    return 0


if __name__ == "__main__":
    sys.exit(main())
