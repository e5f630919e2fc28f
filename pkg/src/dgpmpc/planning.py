"""Particle trajectory sampling and cross-entropy-method MPC.

A rollout draws ``P`` particles.  Within a particle all ``K`` candidate
action sequences are pushed through the model *jointly*: at every timestep
the ``K`` state-action rows form one joint Gaussian per layer, so similar
candidates see consistent dynamics.  Each particle holds a single posterior
sample of U for the whole horizon and draws noise from its own stream.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from dgpmpc.dgp import DgpModel, PosteriorSample, dgp_forward_batch, prepare_batch
from dgpmpc.errors import InvalidArgumentError, NumericalFailureError
from dgpmpc.inference import PosteriorReservoir, resample_posterior
from dgpmpc.rng import StreamKey

logger = logging.getLogger(__name__)

V_FLOOR = 1e-6


@dataclass(frozen=True)
class CemProposal:
    mean: np.ndarray
    var: np.ndarray
    action_low: np.ndarray
    action_high: np.ndarray
    v_floor: float = V_FLOOR

    def __post_init__(self):
        low = np.asarray(self.action_low, dtype=np.float64).reshape(-1)
        high = np.asarray(self.action_high, dtype=np.float64).reshape(-1)
        mean = np.asarray(self.mean, dtype=np.float64)
        var = np.asarray(self.var, dtype=np.float64)
        if mean.ndim != 2 or mean.shape != var.shape or mean.shape[1] != low.size or low.shape != high.shape:
            raise InvalidArgumentError("proposal mean/var must be H x A matching the action bounds")
        if np.any(low > high):
            raise InvalidArgumentError("action_low must not exceed action_high")
        object.__setattr__(self, "mean", np.clip(mean, low, high))
        object.__setattr__(self, "var", np.maximum(var, self.v_floor))
        object.__setattr__(self, "action_low", low)
        object.__setattr__(self, "action_high", high)

    @property
    def horizon(self) -> int:
        return self.mean.shape[0]

    @property
    def action_dim(self) -> int:
        return self.mean.shape[1]

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.action_low + self.action_high)

    @property
    def initial_var(self) -> np.ndarray:
        return ((self.action_high - self.action_low) / 4.0) ** 2

    @classmethod
    def initial(cls, horizon: int, action_low, action_high, v_floor: float = V_FLOOR) -> "CemProposal":
        low = np.asarray(action_low, dtype=np.float64).reshape(-1)
        high = np.asarray(action_high, dtype=np.float64).reshape(-1)
        mean = np.tile(0.5 * (low + high), (horizon, 1))
        var = np.tile(((high - low) / 4.0) ** 2, (horizon, 1))
        return cls(mean, var, low, high, v_floor)

    def replace(self, mean=None, var=None) -> "CemProposal":
        return CemProposal(self.mean if mean is None else mean, self.var if var is None else var,
                           self.action_low, self.action_high, self.v_floor)


@dataclass(frozen=True)
class PlannerConfig:
    horizon: int = 30
    num_sequences: int = 300
    num_particles: int = 5
    cem_iterations: int = 5
    elite_fraction: float = 0.1
    actions_per_replan: int = 1
    include_noise: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.horizon < 1 or self.num_sequences < 1 or self.num_particles < 1:
            raise InvalidArgumentError("horizon, num_sequences and num_particles must be >= 1")
        if self.cem_iterations < 0:
            raise InvalidArgumentError("cem_iterations must be >= 0")
        if not 0 < self.elite_fraction <= 1:
            raise InvalidArgumentError(f"elite_fraction must lie in (0, 1], got {self.elite_fraction}")
        if not 1 <= self.actions_per_replan <= self.horizon:
            raise InvalidArgumentError("actions_per_replan must lie in [1, horizon]")
        if self.workers < 1:
            raise InvalidArgumentError("workers must be >= 1")

    @property
    def num_elites(self) -> int:
        return elite_count(self.elite_fraction, self.num_sequences)


def elite_count(elite_fraction: float, K: int) -> int:
    return max(1, int(round(elite_fraction * K)))


@dataclass
class TrajectoryBatch:
    states: np.ndarray  # P x K x (H+1) x S
    actions: np.ndarray  # K x H x A


def sample_action_sequences(proposal: CemProposal, K: int, rng: np.random.Generator) -> np.ndarray:
    """K draws from N(m, diag v), clipped to the action bounds."""
    H, A = proposal.mean.shape
    draws = proposal.mean + np.sqrt(proposal.var) * rng.standard_normal((K, H, A))
    return np.clip(draws, proposal.action_low, proposal.action_high)


# ---------------------------------------------------------------- dynamics back-ends


class DgpDynamics:
    """Trajectory sampler backed by a DGP and a fixed posterior sample per particle."""

    def __init__(self, model: DgpModel, samples: Sequence[PosteriorSample], include_noise: bool = False,
                 workers: int = 1):
        self.model = model
        self.samples = list(samples)
        self.include_noise = include_noise
        self.workers = workers
        # contiguous particle chunks, one per worker, each pushed through the model as one batch
        bounds = np.linspace(0, len(self.samples), min(workers, len(self.samples)) + 1).round().astype(int)
        self._chunks = [range(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
        self._prepared = [prepare_batch(model, [self.samples[p] for p in chunk]) for chunk in self._chunks]

    @classmethod
    def from_reservoir(cls, model: DgpModel, reservoir: PosteriorReservoir, num_particles: int, key: StreamKey,
                       include_noise: bool = False, workers: int = 1) -> "DgpDynamics":
        samples = [resample_posterior(reservoir, key.generator("posterior", p)) for p in range(num_particles)]
        return cls(model, samples, include_noise, workers)

    @property
    def num_particles(self) -> int:
        return len(self.samples)

    def _chunk(self, c: int, s0: np.ndarray, actions: np.ndarray, key: StreamKey) -> np.ndarray:
        chunk = self._chunks[c]
        K, H, _ = actions.shape
        B = len(chunk)
        rngs = [key.generator("particle", p) for p in chunk]
        out = np.empty((B, K, H + 1, s0.size))
        out[:, :, 0] = s0
        current = torch.from_numpy(np.tile(s0, (B, K, 1)))
        acts = torch.from_numpy(actions)
        for t in range(H):
            inputs = torch.cat([current, acts[:, t].expand(B, K, -1)], dim=-1)
            try:
                delta = dgp_forward_batch(self.model, self._prepared[c], inputs, self.include_noise, rngs)
            except NumericalFailureError as exc:
                raise NumericalFailureError(f"rollout failed at particle {chunk.start}-{chunk.stop - 1}, "
                                            f"step {t}: {exc}") from exc
            current = current + delta
            out[:, :, t + 1] = current.numpy()
        return out

    def rollout(self, s0, actions: np.ndarray, key: StreamKey) -> np.ndarray:
        s0 = np.asarray(s0, dtype=np.float64).reshape(-1)
        with torch.no_grad():
            if len(self._chunks) > 1:
                with ThreadPoolExecutor(max_workers=len(self._chunks)) as pool:
                    parts = list(pool.map(lambda c: self._chunk(c, s0, actions, key), range(len(self._chunks))))
            else:
                parts = [self._chunk(0, s0, actions, key)]
        return np.concatenate(parts)


class OracleDynamics:
    """Uses a known vectorised step function; every particle is identical."""

    def __init__(self, batch_step: Callable, num_particles: int = 1):
        self.batch_step = batch_step
        self.num_particles = num_particles

    def rollout(self, s0, actions: np.ndarray, key: Optional[StreamKey] = None) -> np.ndarray:
        s0 = np.asarray(s0, dtype=np.float64).reshape(-1)
        K, H, _ = actions.shape
        out = np.empty((K, H + 1, s0.size))
        out[:, 0] = s0
        for t in range(H):
            out[:, t + 1] = self.batch_step(out[:, t], actions[:, t])
        return np.broadcast_to(out, (self.num_particles,) + out.shape)


def rollout(
    model: DgpModel,
    reservoir: PosteriorReservoir,
    s0,
    actions: np.ndarray,
    config: PlannerConfig,
    key: StreamKey,
) -> TrajectoryBatch:
    """Sample ``P`` particle trajectories for all ``K`` sequences (joint within a particle)."""
    actions = np.asarray(actions, dtype=np.float64)
    dyn = DgpDynamics.from_reservoir(model, reservoir, config.num_particles, key, config.include_noise, config.workers)
    return TrajectoryBatch(dyn.rollout(s0, actions, key), actions)


# ---------------------------------------------------------------- CEM


def expected_reward(batch: TrajectoryBatch, reward_fn: Callable, actions: Optional[np.ndarray] = None) -> np.ndarray:
    """Per sequence: sum over t of the particle-mean of r(s_{t+1}, a_t).

    Non-finite totals are demoted to -inf so they never become elites.
    """
    actions = batch.actions if actions is None else actions
    states = batch.states
    P, K, H1, _ = states.shape
    if actions.shape[:2] != (K, H1 - 1):
        raise InvalidArgumentError("actions do not match the trajectory batch")
    r = np.asarray(reward_fn(states[:, :, 1:], np.broadcast_to(actions, (P,) + actions.shape)), dtype=np.float64)
    r = np.broadcast_to(r, (P, K, H1 - 1))
    with np.errstate(invalid="ignore", over="ignore"):
        totals = r.mean(axis=0).sum(axis=1)
    bad = ~np.isfinite(totals)
    if np.any(bad):
        logger.warning("non-finite expected reward for %d of %d sequences; treated as -inf", int(bad.sum()), K)
        totals = np.where(bad, -np.inf, totals)
    return totals


def cem_refit(proposal: CemProposal, actions: np.ndarray, rewards: np.ndarray, elite_fraction: float) -> CemProposal:
    """Refit mean and variance to the top sequences; ties go to the lower index."""
    rewards = np.asarray(rewards, dtype=np.float64)
    K = len(rewards)
    n_elite = elite_count(elite_fraction, K)
    if not 1 <= n_elite <= K:
        raise InvalidArgumentError("elite count must lie in [1, K]")
    if np.all(rewards == -np.inf):
        logger.warning("every sequence scored -inf; keeping the previous proposal")
        return proposal
    order = np.argsort(-rewards, kind="stable")
    elites = actions[order[:n_elite]]
    return proposal.replace(mean=elites.mean(axis=0), var=elites.var(axis=0))


@dataclass
class PlanTrace:
    """Per-CEM-iteration reward summaries (optional planner debug dump)."""

    rows: List[dict] = field(default_factory=list)

    def record(self, iteration: int, rewards: np.ndarray, proposal: CemProposal) -> None:
        finite = rewards[np.isfinite(rewards)]
        self.rows.append({
            "iteration": iteration,
            "best": float(finite.max()) if finite.size else float("-inf"),
            "mean": float(finite.mean()) if finite.size else float("-inf"),
            "worst": float(finite.min()) if finite.size else float("-inf"),
            "mean_norm": float(np.linalg.norm(proposal.mean)),
        })

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["iteration", "best", "mean", "worst", "mean_norm"],
                                    lineterminator="\n")
            writer.writeheader()
            writer.writerows(self.rows)


def plan_with(
    dynamics,
    s0,
    proposal: CemProposal,
    config: PlannerConfig,
    reward_fn: Callable,
    key: StreamKey,
    trace: Optional[PlanTrace] = None,
) -> Tuple[np.ndarray, CemProposal]:
    """CEM over action sequences scored by ``dynamics.rollout``; returns (final mean, proposal)."""
    for it in range(config.cem_iterations):
        actions = sample_action_sequences(proposal, config.num_sequences, key.generator("actions", it))
        states = dynamics.rollout(s0, actions, key.child("cem", it))
        rewards = expected_reward(TrajectoryBatch(states, actions), reward_fn, actions)
        proposal = cem_refit(proposal, actions, rewards, config.elite_fraction)
        if trace is not None:
            trace.record(it, rewards, proposal)
    return proposal.mean.copy(), proposal


def plan(
    model: Optional[DgpModel],
    reservoir: Optional[PosteriorReservoir],
    s0,
    proposal: CemProposal,
    config: PlannerConfig,
    reward_fn: Callable,
    key: StreamKey,
    dynamics=None,
    trace: Optional[PlanTrace] = None,
) -> Tuple[np.ndarray, CemProposal]:
    """Choose an action sequence by CEM under the DGP (or an injected ``dynamics``).

    Posterior samples are drawn once per call and held across CEM iterations.
    """
    if dynamics is None:
        dynamics = DgpDynamics.from_reservoir(model, reservoir, config.num_particles, key, config.include_noise,
                                              config.workers)
    return plan_with(dynamics, s0, proposal, config, reward_fn, key, trace)


def shift_proposal(proposal: CemProposal, steps_executed: int) -> CemProposal:
    """Drop executed rows and append fresh rows at the bound midpoint with the initial variance."""
    H = proposal.horizon
    if not 1 <= steps_executed <= H:
        raise InvalidArgumentError(f"steps_executed must lie in [1, {H}]")
    n = steps_executed
    mean = np.concatenate([proposal.mean[n:], np.tile(proposal.midpoint, (n, 1))])
    var = np.concatenate([proposal.var[n:], np.tile(proposal.initial_var, (n, 1))])
    return proposal.replace(mean=mean, var=var)
