"""Sparse deep GP transition model.

The model predicts state deltas: ``s' = s + f_L(...f_1(s, a))``.  Inner
layers warp the joint state-action space around an identity mean; the last
layer maps to state deltas around a zero mean.  Each layer is summarised by
inducing inputs ``Z`` and inducing outputs ``U`` (the latter live in
:class:`PosteriorSample` and are what SG-HMC samples).

Inputs and targets are standardised by a :class:`Normalizer` held on the
model; :func:`dgp_forward` and :func:`predict_next_states` take and return
raw (environment) units, the likelihood in :func:`log_joint` works in
standardised units.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
from sklearn.cluster import kmeans_plusplus

from dgpmpc.errors import InvalidArgumentError
from dgpmpc.kernels import (
    DTYPE,
    KernelFamily,
    KernelSpec,
    as_tensor,
    kernel_diag,
    kernel_matrix,
    jittered_cholesky,
    stabilized_cholesky,
)

LOG_2PI = math.log(2.0 * math.pi)


class MeanKind(str, enum.Enum):
    IDENTITY = "identity"
    ZERO = "zero"


@dataclass(frozen=True)
class GpLayer:
    kernel: KernelSpec
    inducing_inputs: torch.Tensor
    output_dim: int
    mean_kind: MeanKind

    def __post_init__(self):
        Z = as_tensor(self.inducing_inputs)
        object.__setattr__(self, "inducing_inputs", Z)
        object.__setattr__(self, "mean_kind", MeanKind(self.mean_kind))
        if Z.ndim != 2 or Z.shape[0] < 1:
            raise InvalidArgumentError(f"inducing inputs must be a non-empty matrix, got shape {tuple(Z.shape)}")
        if Z.shape[1] != self.kernel.input_dim:
            raise InvalidArgumentError(
                f"inducing inputs have {Z.shape[1]} columns but the kernel has {self.kernel.input_dim} lengthscales"
            )
        if self.output_dim < 1:
            raise InvalidArgumentError("output_dim must be positive")
        if self.mean_kind is MeanKind.IDENTITY and self.output_dim != self.input_dim:
            raise InvalidArgumentError("an identity-mean layer needs input_dim == output_dim")

    @property
    def input_dim(self) -> int:
        return int(self.inducing_inputs.shape[1])

    @property
    def num_inducing(self) -> int:
        return int(self.inducing_inputs.shape[0])

    def mean(self, X: torch.Tensor) -> torch.Tensor:
        if self.mean_kind is MeanKind.IDENTITY:
            return X
        return X.new_zeros((*X.shape[:-1], self.output_dim))

    def detached(self) -> "GpLayer":
        return GpLayer(self.kernel.detached(), self.inducing_inputs.detach().clone(), self.output_dim, self.mean_kind)


@dataclass(frozen=True)
class Normalizer:
    """Per-column affine standardisation of inputs and delta targets."""

    input_mean: np.ndarray
    input_std: np.ndarray
    output_mean: np.ndarray
    output_std: np.ndarray

    @classmethod
    def identity(cls, input_dim: int, output_dim: int) -> "Normalizer":
        return cls(np.zeros(input_dim), np.ones(input_dim), np.zeros(output_dim), np.ones(output_dim))

    @classmethod
    def fit(cls, inputs: np.ndarray, deltas: np.ndarray, min_std: float = 1e-6) -> "Normalizer":
        inputs = np.asarray(inputs, dtype=np.float64)
        deltas = np.asarray(deltas, dtype=np.float64)
        in_std = inputs.std(axis=0)
        out_std = deltas.std(axis=0)
        return cls(
            inputs.mean(axis=0),
            np.where(in_std > min_std, in_std, 1.0),
            deltas.mean(axis=0),
            np.where(out_std > min_std, out_std, 1.0),
        )

    def normalize_inputs(self, X: torch.Tensor) -> torch.Tensor:
        return (X - torch.from_numpy(self.input_mean)) / torch.from_numpy(self.input_std)

    def normalize_deltas(self, D: torch.Tensor) -> torch.Tensor:
        return (D - torch.from_numpy(self.output_mean)) / torch.from_numpy(self.output_std)

    def denormalize_deltas(self, D: torch.Tensor) -> torch.Tensor:
        return D * torch.from_numpy(self.output_std) + torch.from_numpy(self.output_mean)


@dataclass(frozen=True)
class DgpModel:
    layers: Tuple[GpLayer, ...]
    noise_precision: torch.Tensor
    state_dim: int
    action_dim: int
    normalizer: Optional[Normalizer] = None
    jitter: float = 1e-6

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        beta = as_tensor(self.noise_precision).reshape(())
        object.__setattr__(self, "noise_precision", beta)
        if not layers:
            raise InvalidArgumentError("a model needs at least one layer")
        if not bool(beta.detach() > 0) or not math.isfinite(float(beta.detach())):
            raise InvalidArgumentError(f"noise precision must be positive, got {float(beta.detach())}")
        width = self.state_dim + self.action_dim
        for i, layer in enumerate(layers):
            last = i == len(layers) - 1
            want_out = self.state_dim if last else width
            want_mean = MeanKind.ZERO if last else MeanKind.IDENTITY
            if layer.input_dim != width or layer.output_dim != want_out:
                raise InvalidArgumentError(
                    f"layer {i} maps {layer.input_dim}->{layer.output_dim}, expected {width}->{want_out}"
                )
            if layer.mean_kind is not want_mean:
                raise InvalidArgumentError(f"layer {i} must use a {want_mean.value} mean")
        if self.normalizer is None:
            object.__setattr__(self, "normalizer", Normalizer.identity(width, self.state_dim))

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def input_dim(self) -> int:
        return self.state_dim + self.action_dim

    def detached(self) -> "DgpModel":
        return replace(
            self,
            layers=tuple(layer.detached() for layer in self.layers),
            noise_precision=self.noise_precision.detach().clone(),
        )

    def check_sample(self, U: Sequence[torch.Tensor]) -> None:
        if len(U) != self.num_layers:
            raise InvalidArgumentError(f"expected {self.num_layers} inducing-output matrices, got {len(U)}")
        for i, (layer, u) in enumerate(zip(self.layers, U)):
            if tuple(u.shape) != (layer.num_inducing, layer.output_dim):
                raise InvalidArgumentError(
                    f"inducing outputs of layer {i} have shape {tuple(u.shape)}, "
                    f"expected {(layer.num_inducing, layer.output_dim)}"
                )


@dataclass(frozen=True)
class PosteriorSample:
    inducing_outputs: Tuple[torch.Tensor, ...]

    def __post_init__(self):
        object.__setattr__(self, "inducing_outputs", tuple(as_tensor(u) for u in self.inducing_outputs))

    def __len__(self) -> int:
        return len(self.inducing_outputs)

    def __iter__(self):
        return iter(self.inducing_outputs)

    def __getitem__(self, i):
        return self.inducing_outputs[i]

    def clone(self) -> "PosteriorSample":
        return PosteriorSample(tuple(u.detach().clone() for u in self.inducing_outputs))


@dataclass(frozen=True)
class TransitionBatch:
    """Stacked transition tuples ``(s_t, a_t, s_{t+1})``."""

    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.states, dtype=np.float64))
        a = np.asarray(self.actions, dtype=np.float64)
        a = a.reshape(len(s), -1) if a.size else a.reshape(len(s), 0)
        n = np.atleast_2d(np.asarray(self.next_states, dtype=np.float64))
        if not (len(s) == len(a) == len(n)) or s.shape != n.shape:
            raise InvalidArgumentError("states, actions and next_states must have matching row counts and shapes")
        object.__setattr__(self, "states", s)
        object.__setattr__(self, "actions", a)
        object.__setattr__(self, "next_states", n)

    @classmethod
    def from_tuples(cls, tuples) -> "TransitionBatch":
        tuples = list(tuples)
        if not tuples:
            raise InvalidArgumentError("no transitions given")
        return cls(
            np.stack([np.asarray(t[0], dtype=np.float64) for t in tuples]),
            np.stack([np.atleast_1d(np.asarray(t[1], dtype=np.float64)) for t in tuples]),
            np.stack([np.asarray(t[2], dtype=np.float64) for t in tuples]),
        )

    def __len__(self) -> int:
        return len(self.states)

    @property
    def inputs(self) -> np.ndarray:
        return np.concatenate([self.states, self.actions], axis=1)

    @property
    def deltas(self) -> np.ndarray:
        return self.next_states - self.states

    def subset(self, idx) -> "TransitionBatch":
        return TransitionBatch(self.states[idx], self.actions[idx], self.next_states[idx])


class LayerConditional(NamedTuple):
    """Joint Gaussian over the outputs of one layer at ``n`` inputs.

    ``cov`` is shared by every output column and ``chol`` factors it plus
    ``jitter``.  ``source[i]`` is the first row bitwise equal to row ``i``;
    sampling copies that row, so duplicated inputs get duplicated outputs.
    Every field may carry leading batch axes (one entry per particle).
    """

    mean: torch.Tensor
    cov: torch.Tensor
    chol: torch.Tensor
    jitter: float
    source: np.ndarray


class PreparedLayer(NamedTuple):
    """Per-(layer, U) quantities that do not depend on the query inputs."""

    chol_zz: torch.Tensor
    whitened: torch.Tensor  # L_zz^{-1} (U - m(Z))
    jitter: float


def prepare_layer(layer: GpLayer, U: torch.Tensor, jitter: float = 1e-6) -> PreparedLayer:
    Z = layer.inducing_inputs
    sv = float(layer.kernel.signal_variance.detach())
    Lz, jz = stabilized_cholesky(kernel_matrix(layer.kernel, Z), base_jitter=jitter * sv, max_jitter=1e-2 * sv)
    w = torch.linalg.solve_triangular(Lz, as_tensor(U) - layer.mean(Z), upper=False)
    return PreparedLayer(Lz, w, jz)


def prepare(model: DgpModel, sample: PosteriorSample) -> List[PreparedLayer]:
    model.check_sample(sample.inducing_outputs)
    return [prepare_layer(layer, u, model.jitter) for layer, u in zip(model.layers, sample)]


def _row_sources(X: torch.Tensor) -> np.ndarray:
    """Index of the first bitwise-equal row, for every row (batched over leading axes)."""
    arr = X.detach().numpy()
    if arr.ndim >= 2 and arr.shape[-2] > 1 and not np.isnan(arr).any():
        # fast path: equal rows have equal fingerprints, so distinct fingerprints mean distinct rows
        fp = arr[..., 0].copy()
        for j in range(1, arr.shape[-1]):
            fp += arr[..., j] * (1.0 + 0.6180339887498949 * j)  # elementwise, so equal rows match exactly
        fp.sort(axis=-1)
        distinct = (np.diff(fp, axis=-1) != 0).all(axis=-1)
        if np.all(distinct):
            return np.broadcast_to(np.arange(arr.shape[-2]), arr.shape[:-1]).copy()
    if arr.ndim > 2:
        flat = arr.reshape(-1, *arr.shape[-2:])
        return np.stack([_row_sources(torch.from_numpy(a)) for a in flat]).reshape(arr.shape[:-1])
    n = arr.shape[0]
    if n <= 1:
        return np.arange(n)
    arr = np.ascontiguousarray(arr) + 0.0  # folds -0.0 into +0.0
    # one opaque byte string per row: bitwise-equal rows collapse
    rows = arr.view(np.dtype((np.void, arr.dtype.itemsize * arr.shape[1]))).reshape(-1)
    _, first, inverse = np.unique(rows, return_index=True, return_inverse=True)
    if len(first) == n:
        return np.arange(n)
    return first[inverse.reshape(-1)]


def _conditional(layer: GpLayer, chol_zz: torch.Tensor, whitened: torch.Tensor, F: torch.Tensor, jitter: float):
    Z = layer.inducing_inputs
    if F.ndim > 2:
        Z = Z.expand(*F.shape[:-2], *Z.shape)
    Kzf = kernel_matrix(layer.kernel, Z, F)
    A = torch.linalg.solve_triangular(chol_zz, Kzf, upper=False)
    At = A.transpose(-1, -2)
    mean = layer.mean(F) + At @ whitened
    if torch.is_grad_enabled() and (A.requires_grad or F.requires_grad):
        cov = kernel_matrix(layer.kernel, F) - At @ A
        cov = 0.5 * (cov + cov.transpose(-1, -2))
    else:
        cov = kernel_matrix(layer.kernel, F).sub_(At @ A)
        cov = cov.add(cov.transpose(-1, -2)).mul_(0.5)
    sv = float(layer.kernel.signal_variance.detach())
    chol, jf = jittered_cholesky(cov, jitter * sv, 1e-2 * sv)
    return LayerConditional(mean, cov, chol, jf, _row_sources(F))


def layer_conditional(
    layer: GpLayer,
    U: torch.Tensor,
    F_in: torch.Tensor,
    jitter: float = 1e-6,
    prepared: Optional[PreparedLayer] = None,
) -> LayerConditional:
    """Gaussian conditional of a layer's outputs at ``F_in`` given ``(Z, U)``.

    mean = m(F) + K_fz K_zz^{-1} (U - m(Z)),  cov = K_ff - K_fz K_zz^{-1} K_zf.
    """
    F_in = as_tensor(F_in)
    if F_in.ndim != 2 or F_in.shape[1] != layer.input_dim:
        raise InvalidArgumentError(f"layer expects inputs with {layer.input_dim} columns, got {tuple(F_in.shape)}")
    if prepared is None:
        prepared = prepare_layer(layer, U, jitter)
    return _conditional(layer, prepared.chol_zz, prepared.whitened, F_in, jitter)


def layer_marginals(
    layer: GpLayer, F_in: torch.Tensor, prepared: PreparedLayer
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Per-row conditional mean and variance (the diagonal of the conditional)."""
    Kzf = kernel_matrix(layer.kernel, layer.inducing_inputs, F_in)
    A = torch.linalg.solve_triangular(prepared.chol_zz, Kzf, upper=False)
    mean = layer.mean(F_in) + A.T @ prepared.whitened
    var = torch.clamp(kernel_diag(layer.kernel, F_in) - (A * A).sum(0), min=0.0)
    return mean, var


def sample_layer_output(cond: LayerConditional, rng) -> torch.Tensor:
    """Draw ``mean + chol @ E`` jointly over rows; output columns are independent.

    For a batched conditional ``rng`` is a sequence with one generator per
    leading entry.
    """
    n, d = cond.mean.shape[-2:]
    if n == 0:
        return cond.mean
    if cond.mean.ndim == 2:
        E = torch.from_numpy(rng.standard_normal((n, d)))
        return (cond.mean + cond.chol @ E)[cond.source]
    E = torch.from_numpy(np.stack([g.standard_normal((n, d)) for g in rng]))
    draws = cond.mean + cond.chol @ E
    return draws[np.arange(len(rng))[:, None], cond.source]


def _propagate(
    model: DgpModel,
    prepared: Sequence[PreparedLayer],
    X: torch.Tensor,
    rng,
    include_noise: bool,
) -> torch.Tensor:
    F = X
    for layer, prep in zip(model.layers, prepared):
        cond = _conditional(layer, prep.chol_zz, prep.whitened, F, model.jitter)
        F = sample_layer_output(cond, rng)
    if include_noise:
        sd = 1.0 / math.sqrt(float(model.noise_precision))
        if F.ndim == 2:
            noise = rng.standard_normal(tuple(F.shape))
        else:
            noise = np.stack([g.standard_normal(tuple(F.shape[1:])) for g in rng])
        F = F + torch.from_numpy(noise * sd)
    return F


def dgp_forward(
    model: DgpModel,
    sample: PosteriorSample,
    inputs,
    include_noise: bool,
    rng: np.random.Generator,
    prepared: Optional[Sequence[PreparedLayer]] = None,
) -> torch.Tensor:
    """Sample state deltas for ``n`` state-action rows, jointly across rows."""
    X = as_tensor(inputs)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise InvalidArgumentError(f"inputs must have {model.input_dim} columns, got shape {tuple(X.shape)}")
    if X.shape[0] == 0:
        return X.new_zeros((0, model.state_dim))
    if prepared is None:
        prepared = prepare(model, sample)
    norm = model.normalizer
    out = _propagate(model, prepared, norm.normalize_inputs(X), rng, include_noise)
    return norm.denormalize_deltas(out)


def prepare_batch(model: DgpModel, samples: Sequence[PosteriorSample]) -> List[PreparedLayer]:
    """Prepared layers for several samples at once; ``whitened`` gains a leading axis."""
    per_sample = [prepare(model, s) for s in samples]
    return [
        PreparedLayer(layers[0].chol_zz, torch.stack([p.whitened for p in layers]), max(p.jitter for p in layers))
        for layers in zip(*per_sample)
    ]


def dgp_forward_batch(
    model: DgpModel,
    prepared: Sequence[PreparedLayer],
    inputs: torch.Tensor,
    include_noise: bool,
    rngs: Sequence[np.random.Generator],
) -> torch.Tensor:
    """:func:`dgp_forward` for ``B`` independent samples at once.

    ``inputs`` is ``B x n x (S+A)`` and entry ``b`` uses ``prepared`` slice
    ``b`` and ``rngs[b]``; the slices are independent of each other.
    """
    X = as_tensor(inputs)
    if X.ndim != 3 or X.shape[0] != len(rngs) or X.shape[2] != model.input_dim:
        raise InvalidArgumentError(f"expected B x n x {model.input_dim} inputs for {len(rngs)} streams")
    norm = model.normalizer
    out = _propagate(model, prepared, norm.normalize_inputs(X), list(rngs), include_noise)
    return norm.denormalize_deltas(out)


def predict_next_states(
    model: DgpModel,
    sample: PosteriorSample,
    states,
    actions,
    include_noise: bool,
    rng: np.random.Generator,
    prepared: Optional[Sequence[PreparedLayer]] = None,
) -> torch.Tensor:
    S = as_tensor(states)
    A = as_tensor(actions)
    if S.ndim == 1:
        S = S[None, :]
    if A.ndim == 1:
        A = A.reshape(S.shape[0], -1)
    if S.shape[0] != A.shape[0]:
        raise InvalidArgumentError(f"{S.shape[0]} states but {A.shape[0]} actions")
    return S + dgp_forward(model, sample, torch.cat([S, A], dim=1), include_noise, rng, prepared)


@dataclass
class PathRecord:
    """Reparameterisation noise and resulting layer outputs of one pass."""

    noise: List[torch.Tensor]
    outputs: List[torch.Tensor] = field(default_factory=list)


def log_prior(model: DgpModel, U: Sequence[torch.Tensor]) -> torch.Tensor:
    """Sum over layers and output columns of log N(U[:, d] | m(Z)[:, d], K_zz)."""
    total = torch.zeros((), dtype=DTYPE)
    for layer, u in zip(model.layers, U):
        prep = prepare_layer(layer, u, model.jitter)
        M, D = u.shape
        logdet = 2.0 * torch.log(torch.diagonal(prep.chol_zz)).sum()
        total = total - 0.5 * (prep.whitened * prep.whitened).sum() - 0.5 * D * logdet - 0.5 * M * D * LOG_2PI
    return total


def log_joint(
    model: DgpModel,
    U: Sequence[torch.Tensor],
    batch: TransitionBatch,
    rng: Optional[np.random.Generator] = None,
    likelihood_scale: float = 1.0,
    noise: Optional[Sequence[torch.Tensor]] = None,
) -> Tuple[torch.Tensor, PathRecord]:
    """Log density of observed deltas and inducing outputs along one sampled path.

    Inner layers are sampled by reparameterisation (per-row marginals; the
    likelihood only depends on them row by row).  The last layer contributes
    its conditional mean, observed through Gaussian noise of precision beta.
    Pass ``noise`` to evaluate on a frozen path.
    """
    if batch is None or len(batch) == 0:
        raise InvalidArgumentError("log_joint needs a non-empty batch")
    model.check_sample(U)
    norm = model.normalizer
    X = norm.normalize_inputs(torch.from_numpy(batch.inputs))
    Y = norm.normalize_deltas(torch.from_numpy(batch.deltas))
    n = X.shape[0]
    record = PathRecord(noise=list(noise) if noise is not None else [])
    F = X
    prior = torch.zeros((), dtype=DTYPE)
    last = model.num_layers - 1
    for i, (layer, u) in enumerate(zip(model.layers, U)):
        prep = prepare_layer(layer, u, model.jitter)
        M, D = u.shape
        logdet = 2.0 * torch.log(torch.diagonal(prep.chol_zz)).sum()
        prior = prior - 0.5 * (prep.whitened * prep.whitened).sum() - 0.5 * D * logdet - 0.5 * M * D * LOG_2PI
        mean, var = layer_marginals(layer, F, prep)
        if i < last:
            if noise is None:
                if rng is None:
                    raise InvalidArgumentError("an rng or a frozen noise path is required for L > 1")
                record.noise.append(torch.from_numpy(rng.standard_normal((n, layer.output_dim))))
            eps = record.noise[i]
            sv = layer.kernel.signal_variance
            F = mean + torch.sqrt(var + model.jitter * sv)[:, None] * eps
        else:
            F = mean
        record.outputs.append(F)
    beta = model.noise_precision
    resid = Y - F
    S = Y.shape[1]
    loglik = 0.5 * n * S * (torch.log(beta) - LOG_2PI) - 0.5 * beta * (resid * resid).sum()
    return likelihood_scale * loglik + prior, record


def select_inducing_inputs(
    inputs: np.ndarray, num_inducing: int, rng: np.random.Generator, pad_scale: float = 1e-3
) -> Tuple[np.ndarray, np.ndarray]:
    """k-means++ seeding over data rows; pads with jittered duplicates when N < M.

    Returns the inducing inputs and, for each one, the index of its source row.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    N = len(inputs)
    if N == 0:
        raise InvalidArgumentError("cannot place inducing points without data")
    if N >= num_inducing:
        seed = int(rng.integers(0, 2**31 - 1))
        _, idx = kmeans_plusplus(inputs, num_inducing, random_state=seed)
        idx = np.asarray(idx)
        return inputs[idx].copy(), idx
    extra = rng.integers(0, N, size=num_inducing - N)
    idx = np.concatenate([rng.permutation(N), extra])
    Z = inputs[idx].copy()
    Z[N:] += pad_scale * rng.standard_normal(Z[N:].shape)
    return Z, idx


def build_model(
    state_dim: int,
    action_dim: int,
    num_layers: int,
    kernels,
    num_inducing: int,
    dataset: Optional[TransitionBatch],
    rng: np.random.Generator,
    noise_precision: float = 100.0,
    inner_signal_variance: float = 0.01,
    final_signal_variance: float = 1.0,
    lengthscale: float = 1.0,
    normalize: bool = True,
    jitter: float = 1e-6,
) -> Tuple[DgpModel, PosteriorSample]:
    """Initialise a model and a starting point for the sampler.

    ``kernels`` is one family for all layers or a sequence with one per layer.
    Inner-layer U starts at Z (identity warp); final-layer U starts at the
    standardised targets of the rows Z was copied from.
    """
    if num_layers < 1:
        raise InvalidArgumentError("num_layers must be >= 1")
    if isinstance(kernels, (str, KernelFamily)):
        kernels = [kernels] * num_layers
    kernels = [KernelFamily.parse(k) for k in kernels]
    if len(kernels) != num_layers:
        raise InvalidArgumentError(f"{len(kernels)} kernel families for {num_layers} layers")
    width = state_dim + action_dim
    if dataset is not None and len(dataset) > 0:
        norm = Normalizer.fit(dataset.inputs, dataset.deltas) if normalize else Normalizer.identity(width, state_dim)
        Xn = (dataset.inputs - norm.input_mean) / norm.input_std
        Yn = (dataset.deltas - norm.output_mean) / norm.output_std
        Z, idx = select_inducing_inputs(Xn, num_inducing, rng)
        final_U = Yn[idx]
    else:
        norm = Normalizer.identity(width, state_dim)
        Z = rng.standard_normal((num_inducing, width))
        final_U = np.zeros((num_inducing, state_dim))
    layers = []
    U = []
    for i, fam in enumerate(kernels):
        last = i == num_layers - 1
        spec = KernelSpec(
            fam,
            torch.full((width,), float(lengthscale), dtype=DTYPE),
            torch.tensor(final_signal_variance if last else inner_signal_variance, dtype=DTYPE),
        )
        layers.append(GpLayer(spec, torch.from_numpy(Z.copy()), state_dim if last else width,
                              MeanKind.ZERO if last else MeanKind.IDENTITY))
        U.append(torch.from_numpy(final_U.copy() if last else Z.copy()))
    model = DgpModel(tuple(layers), torch.tensor(float(noise_precision), dtype=DTYPE), state_dim, action_dim,
                     norm, jitter)
    return model, PosteriorSample(tuple(U))


def with_inducing_refresh(
    model: DgpModel, dataset: TransitionBatch, rng: np.random.Generator, refit_normalizer: bool = True
) -> Tuple[DgpModel, PosteriorSample]:
    """Re-place Z on (possibly grown) data while keeping kernel hyperparameters and beta."""
    norm = Normalizer.fit(dataset.inputs, dataset.deltas) if refit_normalizer else model.normalizer
    Xn = (dataset.inputs - norm.input_mean) / norm.input_std
    Yn = (dataset.deltas - norm.output_mean) / norm.output_std
    M = model.layers[0].num_inducing
    Z, idx = select_inducing_inputs(Xn, M, rng)
    layers = []
    U = []
    for i, layer in enumerate(model.layers):
        last = i == model.num_layers - 1
        layers.append(GpLayer(layer.kernel.detached(), torch.from_numpy(Z.copy()), layer.output_dim, layer.mean_kind))
        U.append(torch.from_numpy(Yn[idx].copy() if last else Z.copy()))
    new = replace(model, layers=tuple(layers), noise_precision=model.noise_precision.detach().clone(),
                  normalizer=norm)
    return new, PosteriorSample(tuple(U))
