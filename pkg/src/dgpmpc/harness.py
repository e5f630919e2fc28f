"""Episode loop, run configuration, metrics and CSV outputs.

Configuration precedence is: built-in defaults, then per-environment
defaults (horizons, episode lengths), then an optional preset, then the
TOML file, then command-line flags.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import tomli
import tomli_w

from dgpmpc.checkpoint import save_checkpoint
from dgpmpc.dgp import TransitionBatch, build_model, with_inducing_refresh
from dgpmpc.environments import ENV_NAMES, Environment, make_env
from dgpmpc.errors import ConfigError, InvalidArgumentError, NumericalFailureError
from dgpmpc.inference import HyperOptConfig, SghmcConfig, TrainingTrace, train_model
from dgpmpc.kernels import KernelFamily
from dgpmpc.planning import CemProposal, OracleDynamics, PlannerConfig, plan, shift_proposal
from dgpmpc.rng import StreamKey

logger = logging.getLogger(__name__)

ENV_DEFAULTS = {
    "cartpole-modified": {"task_horizon": 200, "planner": {"horizon": 30}},
    "cartpole-center": {"task_horizon": 200, "planner": {"horizon": 30}},
    "reacher": {"task_horizon": 150, "planner": {"horizon": 20}},
}

PRESETS = {
    "": {},
    # planner rows of the half-cheetah column, usable on any environment here
    "cheetah-style": {"metric_episodes": 10, "planner": {"horizon": 40, "cem_iterations": 10, "actions_per_replan": 2}},
}

_SECTIONS = {"planner": PlannerConfig, "sghmc": SghmcConfig, "hyper": HyperOptConfig}


@dataclass(frozen=True)
class RunConfig:
    env: str = "cartpole-modified"
    layers: int = 2
    kernel: Tuple[str, ...] = ("matern32", "matern32")
    inducing: int = 200
    episodes: int = 16
    task_horizon: int = 200
    seed: int = 0
    out: str = "runs/latest"
    oracle_dynamics: bool = False
    train_steps: int = 2000
    metric_episodes: int = 15
    preset: str = ""
    write_traces: bool = False
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    sghmc: SghmcConfig = field(default_factory=SghmcConfig)
    hyper: HyperOptConfig = field(default_factory=HyperOptConfig)
    env_params: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.env not in ENV_NAMES:
            raise ConfigError(f"unknown environment {self.env!r}; choose from {', '.join(ENV_NAMES)}")
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {', '.join(p for p in PRESETS if p)}")
        for name in ("layers", "inducing", "episodes", "task_horizon", "metric_episodes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.train_steps < 0:
            raise ConfigError("train_steps must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        kernel = (self.kernel,) if isinstance(self.kernel, str) else tuple(self.kernel)
        if len(kernel) == 1:
            kernel = kernel * self.layers
        if len(kernel) != self.layers:
            raise ConfigError(f"{len(kernel)} kernel families given for {self.layers} layers")
        try:
            kernel = tuple(KernelFamily.parse(k).value for k in kernel)
        except InvalidArgumentError as exc:
            raise ConfigError(str(exc)) from None
        object.__setattr__(self, "kernel", kernel)
        object.__setattr__(self, "env_params", dict(self.env_params))

    def make_env(self) -> Environment:
        try:
            return make_env(self.env, **self.env_params)
        except (TypeError, InvalidArgumentError) as exc:
            raise ConfigError(f"bad env_params {self.env_params}: {exc}") from None

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name in _SECTIONS:
                value = dataclasses.asdict(value)
            elif f.name == "kernel":
                value = list(value)
            elif f.name == "env_params":
                value = dict(value)
            out[f.name] = value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        _check_keys(data)
        kwargs = dict(data)
        try:
            for name, section in _SECTIONS.items():
                if name in kwargs:
                    kwargs[name] = section(**kwargs[name])
            return cls(**kwargs)
        except (InvalidArgumentError, TypeError) as exc:
            raise ConfigError(str(exc)) from None


_TOP_KEYS = {f.name for f in dataclasses.fields(RunConfig)}


def _check_keys(data: dict, where: str = "config") -> None:
    for key, value in data.items():
        if key not in _TOP_KEYS:
            raise ConfigError(f"unknown key {key!r} in {where}")
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table in {where}")
            allowed = {f.name for f in dataclasses.fields(_SECTIONS[key])}
            for sub in value:
                if sub not in allowed:
                    raise ConfigError(f"unknown key {key}.{sub!r} in {where}")
        if key == "env_params" and not isinstance(value, dict):
            raise ConfigError(f"[env_params] must be a table in {where}")


def _merge(base: dict, top: dict) -> dict:
    out = dict(base)
    for key, value in top.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def read_toml(path) -> dict:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            return tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except tomli.TOMLDecodeError as exc:
        # the decoder message carries the line and column
        raise ConfigError(f"{path}: {exc}") from None


def load_config(path=None, overrides: Optional[dict] = None) -> RunConfig:
    """Resolve defaults < environment defaults < preset < file < ``overrides``."""
    user = {}
    if path is not None:
        user = read_toml(path)
        _check_keys(user, str(path))
    if overrides:
        _check_keys(overrides, "command-line flags")
        user = _merge(user, overrides)
    env = user.get("env", RunConfig.env)
    preset = user.get("preset", "")
    if env not in ENV_DEFAULTS:
        raise ConfigError(f"unknown environment {env!r}; choose from {', '.join(ENV_NAMES)}")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(p for p in PRESETS if p)}")
    resolved = _merge(_merge(ENV_DEFAULTS[env], PRESETS[preset]), user)
    if "kernel" not in resolved:
        resolved["kernel"] = RunConfig.kernel[0]
    return RunConfig.from_dict(resolved)


def dump_config(config: RunConfig) -> str:
    return tomli_w.dumps(config.to_dict())


# ---------------------------------------------------------------- episode loop


@dataclass
class EpisodeLog:
    seed: int
    episode: int
    first_step: int  # global control-step index of t = 0
    states: np.ndarray  # T x S, state at which each action was taken
    actions: np.ndarray  # T x A
    rewards: np.ndarray  # T, r(s_{t+1}, a_t)
    wall_clock: float = 0.0
    warnings: List[str] = field(default_factory=list)
    aborted: Optional[str] = None

    @property
    def total_reward(self) -> float:
        return float(sum(self.rewards.tolist()))

    @property
    def length(self) -> int:
        return len(self.rewards)


class ExperimentAborted(RuntimeError):
    """Raised after an unrecoverable numerical failure; carries the logs so far."""

    def __init__(self, message: str, logs: List[EpisodeLog]):
        super().__init__(message)
        self.logs = logs


class _RandomPolicy:
    """Uniform actions within the bounds (the data-collection episode)."""

    def __init__(self, env, rng):
        self.env, self.rng = env, rng
        self.plans = 0

    def act(self, t, s):
        return self.rng.uniform(self.env.action_low, self.env.action_high)


class _MpcPolicy:
    """Receding-horizon CEM: replan every ``actions_per_replan`` steps."""

    def __init__(self, config, env, key, episode, model, reservoir):
        self.config, self.env, self.key, self.episode = config, env, key, episode
        self.model, self.reservoir = model, reservoir
        self.proposal = CemProposal.initial(config.planner.horizon, env.action_low, env.action_high)
        self.dynamics = OracleDynamics(env.batch_step, 1) if config.oracle_dynamics else None
        self.queue: List[np.ndarray] = []
        self.plans = 0

    def act(self, t, s):
        if not self.queue:
            planner = self.config.planner
            m, proposal = plan(self.model, self.reservoir, s, self.proposal, planner, self.env.reward,
                               self.key.child("plan", self.episode, t), dynamics=self.dynamics)
            n = min(planner.actions_per_replan, self.config.task_horizon - t)
            self.queue = list(m[:n])
            self.proposal = shift_proposal(proposal, n)
            self.plans += 1
        return self.queue.pop(0)


def _run_episode(config, env, key, episode, first_step, policy) -> Tuple[EpisodeLog, TransitionBatch]:
    start = time.perf_counter()
    s = env.reset(key.generator("reset", episode))
    states, actions, rewards, nexts = [], [], [], []
    aborted = None
    try:
        for t in range(config.task_horizon):
            a = np.asarray(policy.act(t, s), dtype=np.float64).reshape(env.action_dim)
            nxt = env.step(s, a)
            r = float(env.reward(nxt, a))
            states.append(s)
            actions.append(a)
            rewards.append(r)
            nexts.append(nxt)
            s = nxt
    except NumericalFailureError as exc:
        aborted = f"aborted at t={len(rewards)}: {exc}"
    S, A = env.state_dim, env.action_dim
    log = EpisodeLog(
        config.seed, episode, first_step,
        np.array(states).reshape(-1, S), np.array(actions).reshape(-1, A), np.array(rewards),
        time.perf_counter() - start, aborted=aborted,
    )
    batch = TransitionBatch(log.states, log.actions, np.array(nexts).reshape(-1, S)) if rewards else None
    return log, batch


def run_experiment(config: RunConfig, out_dir=None) -> List[EpisodeLog]:
    """One random episode, then alternate training, planning and acting.

    With ``oracle_dynamics`` the true simulator replaces the DGP and every
    episode is planned.  Raises :class:`ExperimentAborted` (holding the
    partial logs) when an episode hits an unrecoverable numerical failure.
    """
    env = config.make_env()
    key = StreamKey(config.seed)
    logs: List[EpisodeLog] = []
    data: Optional[TransitionBatch] = None
    model = reservoir = None
    step = 0
    for episode in range(config.episodes):
        warnings: List[str] = []
        if episode == 0 and not config.oracle_dynamics:
            policy = _RandomPolicy(env, key.generator("random", episode))
        else:
            if not config.oracle_dynamics:
                try:
                    model, reservoir = _train(config, env, key, episode, data, model, out_dir)
                except NumericalFailureError as exc:
                    msg = f"training failed: {exc}"
                    logs.append(EpisodeLog(config.seed, episode, step, np.zeros((0, env.state_dim)),
                                           np.zeros((0, env.action_dim)), np.zeros(0), aborted=msg))
                    raise ExperimentAborted(msg, logs) from exc
                warnings.extend(reservoir.warnings)
            policy = _MpcPolicy(config, env, key, episode, model, reservoir)
        log, batch = _run_episode(config, env, key, episode, step, policy)
        log.warnings = warnings
        logs.append(log)
        step += log.length
        if batch is not None:
            data = batch if data is None else _concat(data, batch)
        logger.info("seed %d episode %d: reward %.3f (%.1f s, %d plans)", config.seed, episode,
                    log.total_reward, log.wall_clock, policy.plans)
        if log.aborted:
            raise ExperimentAborted(f"episode {episode} {log.aborted}", logs)
    if out_dir is not None and model is not None:
        save_checkpoint(Path(out_dir) / "model.ckpt", model, reservoir)
    return logs


def _train(config, env, key, episode, data, model, out_dir):
    if model is None:
        model, init = build_model(env.state_dim, env.action_dim, config.layers, list(config.kernel),
                                  config.inducing, data, key.generator("init", episode))
    else:
        model, init = with_inducing_refresh(model, data, key.generator("refresh", episode))
    trace = TrainingTrace() if config.write_traces else None
    model, reservoir = train_model(model, data, config.sghmc, config.hyper, key.generator("train", episode),
                                   steps=config.train_steps, initial=init, trace=trace)
    if trace is not None and out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        trace.write_csv(Path(out_dir) / f"train_trace_ep{episode:03d}.csv")
    return model, reservoir


def _concat(a: TransitionBatch, b: TransitionBatch) -> TransitionBatch:
    return TransitionBatch(np.concatenate([a.states, b.states]), np.concatenate([a.actions, b.actions]),
                           np.concatenate([a.next_states, b.next_states]))


# ---------------------------------------------------------------- metrics


@dataclass
class MetricsReport:
    episode_rewards: Dict[int, List[float]]  # seed -> reward per episode
    max_seen: Dict[int, np.ndarray]  # seed -> per control step
    average: Dict[int, float]  # seed -> mean reward over the first E episodes
    mean: float
    std: float  # sample standard deviation across seeds (n - 1); 0 for one seed
    metric_episodes: int


def compute_metrics(logs: Sequence[EpisodeLog], metric_episodes: int = 15) -> MetricsReport:
    if not logs:
        raise InvalidArgumentError("compute_metrics needs at least one episode log")
    by_seed: Dict[int, List[EpisodeLog]] = {}
    for log in logs:
        by_seed.setdefault(log.seed, []).append(log)
    rewards, curves, averages = {}, {}, {}
    for seed in sorted(by_seed):
        eps = sorted(by_seed[seed], key=lambda l: l.episode)
        totals = [l.total_reward for l in eps]
        rewards[seed] = totals
        # each step carries the best total among episodes started so far
        best = np.maximum.accumulate(np.array(totals))
        curves[seed] = np.repeat(best, [max(l.length, 0) for l in eps])
        averages[seed] = float(np.mean(totals[:metric_episodes]))
    values = np.array(list(averages.values()))
    std = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return MetricsReport(rewards, curves, averages, float(values.mean()), std, metric_episodes)


# ---------------------------------------------------------------- outputs


def _fmt(x) -> str:
    return repr(float(x))


def episodes_header(state_dim: int, action_dim: int) -> List[str]:
    return (["seed", "episode", "step", "t"] + [f"action_{i}" for i in range(action_dim)]
            + [f"state_{i}" for i in range(state_dim)] + ["reward"])


def write_episodes_csv(logs: Sequence[EpisodeLog], path, state_dim: int, action_dim: int) -> None:
    with _open_out(path) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(episodes_header(state_dim, action_dim))
        for log in logs:
            for t in range(log.length):
                writer.writerow([log.seed, log.episode, log.first_step + t, t]
                                + [_fmt(v) for v in log.actions[t]] + [_fmt(v) for v in log.states[t]]
                                + [_fmt(log.rewards[t])])


def read_episodes_csv(path) -> List[EpisodeLog]:
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    if not rows:
        raise ConfigError(f"{path} is empty")
    header = rows[0]
    a_cols = [i for i, h in enumerate(header) if h.startswith("action_")]
    s_cols = [i for i, h in enumerate(header) if h.startswith("state_")]
    groups: Dict[Tuple[int, int], list] = {}
    for row in rows[1:]:
        groups.setdefault((int(row[0]), int(row[1])), []).append(row)
    logs = []
    for (seed, episode), rs in groups.items():
        logs.append(EpisodeLog(
            seed, episode, int(rs[0][2]),
            np.array([[float(r[i]) for i in s_cols] for r in rs]).reshape(len(rs), len(s_cols)),
            np.array([[float(r[i]) for i in a_cols] for r in rs]).reshape(len(rs), len(a_cols)),
            np.array([float(r[-1]) for r in rs]),
        ))
    return logs


def write_metrics_csv(metrics: MetricsReport, path) -> None:
    with _open_out(path) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["metric", "seed", "index", "value"])
        for seed, totals in metrics.episode_rewards.items():
            for e, r in enumerate(totals):
                writer.writerow(["episode_reward", seed, e, _fmt(r)])
        for seed, curve in metrics.max_seen.items():
            for k, v in enumerate(curve):
                writer.writerow(["max_seen", seed, k, _fmt(v)])
        for seed, avg in metrics.average.items():
            writer.writerow(["average_reward", seed, metrics.metric_episodes, _fmt(avg)])
        writer.writerow(["average_reward_mean", "", metrics.metric_episodes, _fmt(metrics.mean)])
        writer.writerow(["average_reward_std", "", metrics.metric_episodes, _fmt(metrics.std)])


class _open_out:
    """Text writer with UTF-8, LF endings and path context on I/O errors."""

    def __init__(self, path):
        self.path = Path(path)

    def __enter__(self):
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.fh = self.path.open("w", newline="", encoding="utf-8")
        except OSError as exc:
            raise OSError(f"cannot write {self.path}: {exc}") from exc
        return self.fh

    def __exit__(self, *exc):
        self.fh.close()
        return False


def write_outputs(logs: Sequence[EpisodeLog], metrics: MetricsReport, config: RunConfig, out_dir) -> None:
    out = Path(out_dir)
    env = config.make_env()
    write_episodes_csv(logs, out / "episodes.csv", env.state_dim, env.action_dim)
    write_metrics_csv(metrics, out / "metrics.csv")
    with _open_out(out / "config.echo.toml") as fh:
        fh.write(dump_config(config))
    with _open_out(out / "warnings.log") as fh:
        for log in logs:
            for w in log.warnings:
                fh.write(f"seed {log.seed} episode {log.episode}: {w}\n")
            if log.aborted:
                fh.write(f"seed {log.seed} episode {log.episode}: ABORTED {log.aborted}\n")
    # wall-clock is kept out of the CSVs so they stay reproducible
    with _open_out(out / "timing.log") as fh:
        for log in logs:
            fh.write(f"seed {log.seed} episode {log.episode}: {log.wall_clock:.3f} s\n")
