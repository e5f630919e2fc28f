"""SG-HMC over inducing outputs with moving-window empirical Bayes.

The sampler only needs a *target*: any object with
``grad(position, rng) -> (neg_log_density, gradients)``.  :class:`DgpTarget`
wires a model and dataset into that shape with minibatched, pathwise
stochastic gradients; :class:`GaussianTarget` is an analytic target used for
checking the sampler itself.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from dgpmpc.dgp import DgpModel, GpLayer, PosteriorSample, TransitionBatch, log_joint
from dgpmpc.errors import InvalidArgumentError, InvalidStateError, NumericalFailureError
from dgpmpc.kernels import KernelSpec, as_tensor

logger = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6


@dataclass(frozen=True)
class SghmcConfig:
    step_size: float = 5e-4
    friction: Optional[float] = None  # defaults to 0.05 / step_size * mass
    noise_estimate: float = 0.0
    mass: float = 1.0
    burn_in_steps: int = 500
    thinning: int = 20
    reservoir_size: int = 20
    minibatch_size: int = 100

    def __post_init__(self):
        if self.friction is None:
            object.__setattr__(self, "friction", 0.05 / self.step_size * self.mass)
        if self.step_size <= 0 or self.mass <= 0 or self.friction <= 0:
            raise InvalidArgumentError("step_size, mass and friction must be positive")
        if self.noise_estimate < 0:
            raise InvalidArgumentError("noise_estimate must be non-negative")
        if self.step_size * (self.friction - self.noise_estimate) < 0:
            raise InvalidArgumentError("friction must be at least the gradient-noise estimate")
        if self.reservoir_size < 1 or self.thinning < 1:
            raise InvalidArgumentError("reservoir_size and thinning must be >= 1")
        if self.burn_in_steps < 0 or self.minibatch_size < 1:
            raise InvalidArgumentError("burn_in_steps must be >= 0 and minibatch_size >= 1")

    @property
    def injected_variance(self) -> float:
        return 2.0 * self.step_size * (self.friction - self.noise_estimate)


@dataclass(frozen=True)
class HyperOptConfig:
    learning_rate: float = 1e-2
    steps_per_episode: int = 200
    optimize_Z: bool = False
    hyper_interval: int = 10

    def __post_init__(self):
        if self.learning_rate < 0:
            raise InvalidArgumentError("learning_rate must be non-negative")
        if self.hyper_interval < 1:
            raise InvalidArgumentError("hyper_interval must be >= 1")


class PosteriorReservoir:
    """The live SG-HMC chain plus a ring buffer of recent thinned positions."""

    def __init__(self, position: Sequence[torch.Tensor], config: SghmcConfig):
        self.position: List[torch.Tensor] = [as_tensor(u).detach().clone() for u in position]
        self.momentum: List[torch.Tensor] = [torch.zeros_like(u) for u in self.position]
        self.samples: deque = deque(maxlen=config.reservoir_size)
        self.step_size = config.step_size
        self.steps_taken = 0
        self.warnings: List[str] = []
        self.last_value = float("nan")

    @property
    def capacity(self) -> int:
        return self.samples.maxlen

    def __len__(self) -> int:
        return len(self.samples)

    def push(self, position: Sequence[torch.Tensor]) -> None:
        self.samples.append(PosteriorSample(tuple(u.detach().clone() for u in position)))

    def warn(self, message: str) -> None:
        self.warnings.append(message)
        logger.warning(message)


class GaussianTarget:
    """Negative log-density of N(mean, cov) over a single position array."""

    def __init__(self, mean, cov):
        self.mean = as_tensor(mean)
        self.precision = torch.linalg.inv(as_tensor(cov))

    def grad(self, position, rng=None):
        d = position[0] - self.mean
        g = d @ self.precision
        return float(0.5 * (g * d).sum()), [g]


class DgpTarget:
    """Minibatched stochastic gradient of the negative log joint over U."""

    def __init__(self, model: DgpModel, dataset: TransitionBatch, minibatch_size: int):
        if len(dataset) == 0:
            raise InvalidArgumentError("the dataset is empty")
        self.model = model
        self.dataset = dataset
        self.minibatch_size = min(int(minibatch_size), len(dataset))

    def minibatch(self, rng: np.random.Generator) -> TransitionBatch:
        N = len(self.dataset)
        if self.minibatch_size >= N:
            return self.dataset
        return self.dataset.subset(np.sort(rng.choice(N, size=self.minibatch_size, replace=False)))

    def grad(self, position, rng):
        batch = self.minibatch(rng)
        value, grads = neg_log_joint_and_grad(self.model, position, batch, len(self.dataset), rng)
        return value, grads


def neg_log_joint_and_grad(
    model: DgpModel,
    U: Sequence[torch.Tensor],
    batch: TransitionBatch,
    dataset_size: int,
    rng: Optional[np.random.Generator],
    noise=None,
) -> Tuple[float, List[torch.Tensor]]:
    leaves = [as_tensor(u).detach().clone().requires_grad_(True) for u in U]
    scale = dataset_size / len(batch)
    value, _ = log_joint(model, leaves, batch, rng, likelihood_scale=scale, noise=noise)
    (-value).backward()
    return float(-value.detach()), [u.grad.detach() for u in leaves]


def grad_neg_log_joint(
    model: DgpModel,
    U: Sequence[torch.Tensor],
    batch: TransitionBatch,
    dataset_size: int,
    rng: Optional[np.random.Generator],
    noise=None,
) -> List[torch.Tensor]:
    """Gradient over U of ``-(N/|batch|) log-likelihood(batch) - log-prior(U)``.

    ``dataset_size=0`` leaves only the prior.  ``noise`` freezes the
    reparameterisation path (see :func:`dgpmpc.dgp.log_joint`).
    """
    return neg_log_joint_and_grad(model, U, batch, dataset_size, rng, noise)[1]


def sghmc_step(reservoir: PosteriorReservoir, target, config: SghmcConfig, rng: np.random.Generator):
    """One SG-HMC update of the live chain, in place; returns the reservoir.

    r <- r - eps grad - eps C r / m + N(0, 2 eps (C - B));  U <- U + eps r / m
    """
    eps = reservoir.step_size
    value, grads = target.grad(reservoir.position, rng)
    reservoir.last_value = value
    noise_sd = math.sqrt(2.0 * eps * (config.friction - config.noise_estimate))
    decay = eps * config.friction / config.mass
    new_r = []
    new_u = []
    for u, r, g in zip(reservoir.position, reservoir.momentum, grads):
        r = r - eps * g - decay * r
        if noise_sd > 0:
            r = r + noise_sd * torch.from_numpy(rng.standard_normal(tuple(r.shape)))
        new_r.append(r)
        new_u.append(u + (eps / config.mass) * r)
    diverged = any(
        not bool(torch.all(torch.isfinite(u))) or float(torch.max(torch.abs(u))) > DIVERGENCE_LIMIT
        for u in new_u if u.numel()
    )
    if diverged:
        reservoir.step_size = eps / 2.0
        reservoir.momentum = [torch.zeros_like(u) for u in reservoir.position]
        reservoir.warn(f"SG-HMC diverged at step {reservoir.steps_taken}; momentum reset, step size -> {eps / 2:.3g}")
    else:
        reservoir.position = new_u
        reservoir.momentum = new_r
    reservoir.steps_taken += 1
    past = reservoir.steps_taken - config.burn_in_steps
    if past > 0 and past % config.thinning == 0:
        reservoir.push(reservoir.position)
    return reservoir


def resample_posterior(reservoir: PosteriorReservoir, rng: np.random.Generator) -> PosteriorSample:
    if len(reservoir.samples) == 0:
        raise InvalidStateError("the posterior reservoir is empty; train the model first")
    return reservoir.samples[int(rng.integers(len(reservoir.samples)))]


class HyperState:
    """Log-space hyperparameter leaves plus their Adam optimiser."""

    def __init__(self, model: DgpModel, config: HyperOptConfig):
        self.log_lengthscales = [torch.log(l.kernel.lengthscales.detach()).clone().requires_grad_(True)
                                 for l in model.layers]
        self.log_variances = [torch.log(l.kernel.signal_variance.detach()).clone().requires_grad_(True)
                              for l in model.layers]
        self.log_beta = torch.log(model.noise_precision.detach()).clone().requires_grad_(True)
        self.Z = [l.inducing_inputs.detach().clone().requires_grad_(config.optimize_Z) for l in model.layers]
        params = self.log_lengthscales + self.log_variances + [self.log_beta]
        if config.optimize_Z:
            params += self.Z
        self.optimizer = torch.optim.Adam(params, lr=config.learning_rate)

    def load(self, model: DgpModel) -> None:
        with torch.no_grad():
            for i, layer in enumerate(model.layers):
                self.log_lengthscales[i].copy_(torch.log(layer.kernel.lengthscales.detach()))
                self.log_variances[i].copy_(torch.log(layer.kernel.signal_variance.detach()))
                self.Z[i].copy_(layer.inducing_inputs.detach())
            self.log_beta.copy_(torch.log(model.noise_precision.detach()))

    def live_model(self, model: DgpModel) -> DgpModel:
        layers = tuple(
            GpLayer(KernelSpec.from_log(l.kernel.family, ll, lv), z, l.output_dim, l.mean_kind)
            for l, ll, lv, z in zip(model.layers, self.log_lengthscales, self.log_variances, self.Z)
        )
        return replace(model, layers=layers, noise_precision=torch.exp(self.log_beta))


def window_objective(model: DgpModel, samples, batch: TransitionBatch, dataset_size: int, rng):
    """(1/W) sum_w log_joint(model, U_w, batch), skipping non-finite terms."""
    scale = dataset_size / len(batch)
    terms = []
    for s in samples:
        value, _ = log_joint(model, list(s.inducing_outputs), batch, rng, likelihood_scale=scale)
        if bool(torch.isfinite(value.detach())):
            terms.append(value)
    if not terms:
        return None
    return torch.stack(terms).mean()


def hyper_step(
    model: DgpModel,
    reservoir: PosteriorReservoir,
    dataset: TransitionBatch,
    config: HyperOptConfig,
    rng: np.random.Generator,
    state: Optional[HyperState] = None,
    minibatch_size: Optional[int] = None,
) -> Tuple[DgpModel, HyperState]:
    """One Adam ascent step on the window-averaged log joint.

    Works on log lengthscales, log signal variances, log beta and (with
    ``optimize_Z``) the inducing inputs.  Passing the returned state back in
    keeps the Adam moments across calls.
    """
    samples = list(reservoir.samples) or [PosteriorSample(tuple(reservoir.position))]
    if config.learning_rate == 0:
        # the log/exp round trip is not bit-exact; a zero step must be
        return model, state if state is not None else HyperState(model, config)
    if state is None:
        state = HyperState(model, config)
    else:
        state.load(model)
    N = len(dataset)
    if minibatch_size is not None and minibatch_size < N:
        batch = dataset.subset(np.sort(rng.choice(N, size=minibatch_size, replace=False)))
    else:
        batch = dataset
    state.optimizer.zero_grad()
    try:
        objective = window_objective(state.live_model(model), samples, batch, N, rng)
    except NumericalFailureError as exc:
        objective = None
        logger.warning("hyperparameter objective failed: %s", exc)
    if objective is None:
        reservoir.warn("hyperparameter step skipped: no finite objective over the window")
        return model, state
    (-objective / max(N, 1)).backward()
    grads_ok = all(
        p.grad is None or bool(torch.all(torch.isfinite(p.grad)))
        for g in state.optimizer.param_groups for p in g["params"]
    )
    if not grads_ok:
        reservoir.warn("hyperparameter step skipped: non-finite gradient")
        return model, state
    state.optimizer.step()
    with torch.no_grad():
        new_model = state.live_model(model).detached()
    return new_model, state


@dataclass
class TrainingTrace:
    """Rows of (step, neg_log_joint, beta, mean lengthscale per layer, warnings)."""

    rows: List[dict] = field(default_factory=list)

    def record(self, step: int, value: float, model: DgpModel, warnings: int) -> None:
        row = {"step": step, "neg_log_joint": value, "beta": float(model.noise_precision)}
        for i, layer in enumerate(model.layers):
            row[f"mean_lengthscale_{i}"] = float(layer.kernel.lengthscales.mean())
        row["jitter_warnings"] = warnings
        self.rows.append(row)

    def write_csv(self, path) -> None:
        path = Path(path)
        if not self.rows:
            path.write_text("step,neg_log_joint,beta,jitter_warnings\n")
            return
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(self.rows[0]), lineterminator="\n")
            writer.writeheader()
            writer.writerows(self.rows)


def train_model(
    model: DgpModel,
    dataset: TransitionBatch,
    sghmc_config: SghmcConfig,
    hyper_config: HyperOptConfig,
    rng: np.random.Generator,
    steps: int = 2000,
    initial: Optional[PosteriorSample] = None,
    reservoir: Optional[PosteriorReservoir] = None,
    trace: Optional[TrainingTrace] = None,
) -> Tuple[DgpModel, PosteriorReservoir]:
    """Interleave SG-HMC over U with empirical-Bayes steps on {theta, beta, Z}.

    One hyper step runs after every ``hyper_config.hyper_interval`` sampler
    steps, capped at ``hyper_config.steps_per_episode`` hyper steps.
    """
    if len(dataset) < min(sghmc_config.minibatch_size, 1):
        raise InvalidArgumentError("not enough data to train")
    if reservoir is None:
        if initial is None:
            initial = PosteriorSample(tuple(
                l.mean(l.inducing_inputs).detach().clone() for l in model.layers
            ))
        reservoir = PosteriorReservoir(initial.inducing_outputs, sghmc_config)
    if steps <= 0:
        return model, reservoir
    hyper_state = None
    hyper_done = 0
    target = DgpTarget(model, dataset, sghmc_config.minibatch_size)
    for step in range(steps):
        try:
            sghmc_step(reservoir, target, sghmc_config, rng)
        except NumericalFailureError as exc:
            reservoir.step_size /= 2.0
            reservoir.momentum = [torch.zeros_like(u) for u in reservoir.position]
            reservoir.warn(f"sampler step {step} failed ({exc}); momentum reset, step size halved")
            if reservoir.step_size < sghmc_config.step_size * 1e-6:
                raise
            continue
        if (
            hyper_config.learning_rate > 0
            and (step + 1) % hyper_config.hyper_interval == 0
            and hyper_done < hyper_config.steps_per_episode
        ):
            model, hyper_state = hyper_step(model, reservoir, dataset, hyper_config, rng, hyper_state,
                                            minibatch_size=sghmc_config.minibatch_size)
            hyper_done += 1
            target = DgpTarget(model, dataset, sghmc_config.minibatch_size)
            if trace is not None:
                trace.record(step + 1, reservoir.last_value, model, len(reservoir.warnings))
    if len(reservoir.samples) == 0:
        reservoir.warn("no post-burn-in samples collected; storing the final chain position")
        reservoir.push(reservoir.position)
    return model, reservoir
