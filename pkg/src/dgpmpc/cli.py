"""Command-line entry point: ``dgp-mpc run`` and ``dgp-mpc metrics``.

Exit codes: 0 success, 1 configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from dgpmpc.errors import ConfigError, NumericalFailureError
from dgpmpc import harness

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2

# flag dest -> (section or None, config key)
_FLAG_KEYS = {
    "env": (None, "env"),
    "layers": (None, "layers"),
    "kernel": (None, "kernel"),
    "episodes": (None, "episodes"),
    "seed": (None, "seed"),
    "inducing": (None, "inducing"),
    "task_horizon": (None, "task_horizon"),
    "train_steps": (None, "train_steps"),
    "metric_episodes": (None, "metric_episodes"),
    "preset": (None, "preset"),
    "out": (None, "out"),
    "particles": ("planner", "num_particles"),
    "popsize": ("planner", "num_sequences"),
    "horizon": ("planner", "horizon"),
    "cem_iters": ("planner", "cem_iterations"),
    "elite_frac": ("planner", "elite_fraction"),
    "actions_per_replan": ("planner", "actions_per_replan"),
    "workers": ("planner", "workers"),
}


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; here that slot means numerical failure."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dgp-mpc", description="DGP dynamics models with CEM model-predictive control.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress per episode")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run one seed of the episode loop")
    run.add_argument("--config", type=Path, help="TOML file; flags override its values")
    run.add_argument("--env", choices=harness.ENV_NAMES)
    run.add_argument("--layers", type=int)
    run.add_argument("--kernel", help="sexp, matern52, matern32 or matern12 (comma-separated for per-layer)")
    run.add_argument("--episodes", type=int, help="total episodes including the random first one")
    run.add_argument("--seed", type=int)
    run.add_argument("--inducing", type=int, help="inducing points M")
    run.add_argument("--particles", type=int, help="particles P")
    run.add_argument("--popsize", type=int, help="CEM population K")
    run.add_argument("--horizon", type=int, help="planning horizon H")
    run.add_argument("--cem-iters", type=int)
    run.add_argument("--elite-frac", type=float)
    run.add_argument("--actions-per-replan", type=int)
    run.add_argument("--workers", type=int, help="rollout threads; results do not depend on it")
    run.add_argument("--task-horizon", type=int, help="control steps per episode")
    run.add_argument("--train-steps", type=int, help="SG-HMC steps per episode")
    run.add_argument("--metric-episodes", type=int, help="E for the average-reward metric")
    run.add_argument("--preset", choices=[p for p in harness.PRESETS if p])
    run.add_argument("--oracle-dynamics", action="store_true", default=None,
                     help="plan with the true simulator instead of the DGP")
    run.add_argument("--out", help="output directory")

    met = sub.add_parser("metrics", help="recompute metrics from one or more run directories")
    met.add_argument("--in", dest="inputs", nargs="+", type=Path, required=True)
    met.add_argument("--metric-episodes", type=int, help="defaults to the value in the first run's config echo")
    met.add_argument("--out", type=Path, help="write metrics.csv here")
    return parser


def flag_overrides(args: argparse.Namespace) -> dict:
    out: dict = {}
    for dest, (section, key) in _FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if dest == "kernel" and "," in value:
            value = [v.strip() for v in value.split(",")]
        if section is None:
            out[key] = value
        else:
            out.setdefault(section, {})[key] = value
    if args.oracle_dynamics:
        out["oracle_dynamics"] = True
    return out


def _run(args) -> int:
    config = harness.load_config(args.config, flag_overrides(args))
    out = Path(config.out)
    status = EXIT_OK
    try:
        logs = harness.run_experiment(config, out_dir=out)
    except harness.ExperimentAborted as exc:
        logging.error("%s", exc)
        logs, status = exc.logs, EXIT_NUMERICAL
    metrics = harness.compute_metrics(logs, config.metric_episodes)
    harness.write_outputs(logs, metrics, config, out)
    print(f"seed {config.seed}: episode rewards {[round(r, 3) for r in metrics.episode_rewards[config.seed]]}")
    n = min(config.metric_episodes, len(metrics.episode_rewards[config.seed]))
    print(f"average over first {n} episodes: {metrics.mean:.4f}")
    return status


def _metrics(args) -> int:
    logs: List[harness.EpisodeLog] = []
    E = args.metric_episodes
    for d in args.inputs:
        logs.extend(harness.read_episodes_csv(d / "episodes.csv"))
        echo = d / "config.echo.toml"
        if E is None and echo.exists():
            E = harness.load_config(echo).metric_episodes
    if not logs:
        raise ConfigError("no episodes found in the given directories")
    metrics = harness.compute_metrics(logs, E or harness.RunConfig.metric_episodes)
    for seed, totals in metrics.episode_rewards.items():
        print(f"seed {seed}: average {metrics.average[seed]:.4f}, best {max(totals):.4f}, episodes {len(totals)}")
    print(f"average episode reward (first {metrics.metric_episodes}): {metrics.mean:.4f} +- {metrics.std:.4f}"
          f" over {len(metrics.average)} seeds")
    if args.out is not None:
        harness.write_metrics_csv(metrics, args.out / "metrics.csv")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return _run(args) if args.command == "run" else _metrics(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailureError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
