"""Stationary ARD kernels and jitter-stabilised Cholesky factorisation.

All matrices are float64 torch tensors so the same code path serves both
prediction and autograd-based hyperparameter learning.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Union

import numpy as np
import torch

from dgpmpc.errors import InvalidArgumentError, NumericalFailureError

DTYPE = torch.float64
ArrayLike = Union[np.ndarray, torch.Tensor, list, tuple, float]

_SQRT3 = math.sqrt(3.0)
_SQRT5 = math.sqrt(5.0)


def as_tensor(x: ArrayLike) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


class KernelFamily(str, enum.Enum):
    SEXP = "sexp"
    MATERN52 = "matern52"
    MATERN32 = "matern32"
    MATERN12 = "matern12"

    @classmethod
    def parse(cls, name: Union[str, "KernelFamily"]) -> "KernelFamily":
        if isinstance(name, KernelFamily):
            return name
        key = str(name).strip().lower().replace("-", "").replace("_", "").replace("/", "")
        aliases = {"se": "sexp", "rbf": "sexp", "sqexp": "sexp", "matern": "matern52"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise InvalidArgumentError(f"unknown kernel family {name!r}") from None


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family with ARD lengthscales and a signal variance.

    ``lengthscales`` and ``signal_variance`` may be tensors that require
    grad; everything downstream stays differentiable.
    """

    family: KernelFamily
    lengthscales: torch.Tensor
    signal_variance: torch.Tensor

    def __post_init__(self):
        object.__setattr__(self, "family", KernelFamily.parse(self.family))
        ls = as_tensor(self.lengthscales).reshape(-1)
        sv = as_tensor(self.signal_variance).reshape(())
        if ls.numel() == 0:
            raise InvalidArgumentError("a kernel needs at least one lengthscale")
        with torch.no_grad():
            if not bool(torch.all(torch.isfinite(ls))) or not bool(torch.all(ls > 0)):
                raise InvalidArgumentError(f"lengthscales must be finite and positive, got {ls.tolist()}")
            if not bool(torch.isfinite(sv)) or not bool(sv > 0):
                raise InvalidArgumentError(f"signal variance must be finite and positive, got {float(sv)}")
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "signal_variance", sv)

    @property
    def input_dim(self) -> int:
        return int(self.lengthscales.numel())

    @classmethod
    def from_log(cls, family, log_lengthscales: torch.Tensor, log_signal_variance: torch.Tensor) -> "KernelSpec":
        return cls(family, torch.exp(log_lengthscales), torch.exp(log_signal_variance))

    def detached(self) -> "KernelSpec":
        return KernelSpec(self.family, self.lengthscales.detach().clone(), self.signal_variance.detach().clone())


def _check_columns(spec: KernelSpec, X: torch.Tensor, name: str) -> None:
    if X.ndim < 2 or X.shape[-1] != spec.input_dim:
        raise InvalidArgumentError(
            f"{name} must have {spec.input_dim} columns to match the lengthscales, got shape {tuple(X.shape)}"
        )


def scaled_dist(spec: KernelSpec, X: torch.Tensor, Y: torch.Tensor) -> torch.Tensor:
    """Euclidean distance between lengthscale-scaled rows (leading batch axes allowed).

    Uses exact coordinate differences rather than the ``|x|^2 + |y|^2 - 2xy``
    expansion, so identical rows are exactly 0 apart.
    """
    return torch.cdist(X / spec.lengthscales, Y / spec.lengthscales, compute_mode="donot_use_mm_for_euclid_dist")


def kernel_from_dist(family: KernelFamily, variance: torch.Tensor, r: torch.Tensor) -> torch.Tensor:
    if not (torch.is_grad_enabled() and (r.requires_grad or variance.requires_grad)):
        return _kernel_from_dist_inplace(family, variance, r)
    if family is KernelFamily.SEXP:
        return variance * torch.exp(-0.5 * r * r)
    if family is KernelFamily.MATERN12:
        return variance * torch.exp(-r)
    if family is KernelFamily.MATERN32:
        s = _SQRT3 * r
        return variance * (1.0 + s) * torch.exp(-s)
    s = _SQRT5 * r
    return variance * (1.0 + s + s * s / 3.0) * torch.exp(-s)


def _kernel_from_dist_inplace(family: KernelFamily, variance: torch.Tensor, r: torch.Tensor) -> torch.Tensor:
    # same operation order as kernel_from_dist (bitwise-equal results), fewer temporaries
    if family is KernelFamily.SEXP:
        return r.mul(-0.5).mul_(r).exp_().mul_(variance)
    if family is KernelFamily.MATERN12:
        return r.neg().exp_().mul_(variance)
    s = r.mul(_SQRT3 if family is KernelFamily.MATERN32 else _SQRT5)
    out = s.add(1.0)
    if family is KernelFamily.MATERN52:
        out.add_(s.mul(s).div_(3.0))
    return out.mul_(variance).mul_(s.neg_().exp_())


def kernel_matrix(spec: KernelSpec, X: ArrayLike, Y: Optional[ArrayLike] = None) -> torch.Tensor:
    """Cross-covariance ``K[i, j] = k(X_i, Y_j)``; ``Y`` defaults to ``X``."""
    X = as_tensor(X)
    Y = X if Y is None else as_tensor(Y)
    _check_columns(spec, X, "X")
    _check_columns(spec, Y, "Y")
    return kernel_from_dist(spec.family, spec.signal_variance, scaled_dist(spec, X, Y))


def kernel_diag(spec: KernelSpec, X: ArrayLike) -> torch.Tensor:
    X = as_tensor(X)
    _check_columns(spec, X, "X")
    return spec.signal_variance * torch.ones(X.shape[0], dtype=DTYPE)


def kernel_eval(spec: KernelSpec, x: ArrayLike, y: ArrayLike) -> float:
    x = as_tensor(x).reshape(-1)
    y = as_tensor(y).reshape(-1)
    if x.numel() != spec.input_dim or y.numel() != spec.input_dim:
        raise InvalidArgumentError(
            f"kernel inputs must have dimension {spec.input_dim}, got {x.numel()} and {y.numel()}"
        )
    return float(kernel_matrix(spec, x[None, :], y[None, :])[0, 0])


class CholeskyResult(NamedTuple):
    factor: torch.Tensor
    jitter: float


def stabilized_cholesky(
    K: ArrayLike,
    base_jitter: float = 1e-6,
    max_jitter: Optional[float] = None,
    symmetry_rtol: float = 1e-12,
) -> CholeskyResult:
    """Factor ``K + jitter * I``, escalating jitter tenfold until it succeeds.

    ``max_jitter`` defaults to 1e-2 times the mean diagonal, which is the
    signal variance for the stationary kernels above.
    """
    K = as_tensor(K)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise InvalidArgumentError(f"expected a square matrix, got shape {tuple(K.shape)}")
    n = K.shape[0]
    if n == 0:
        return CholeskyResult(K.new_zeros((0, 0)), 0.0)
    with torch.no_grad():
        scale = float(torch.max(torch.abs(K))) if n else 0.0
        asym = float(torch.max(torch.abs(K - K.T)))
    if not math.isfinite(scale):
        raise NumericalFailureError(f"{n}x{n} matrix has non-finite entries")
    if asym > symmetry_rtol * max(scale, 1e-300):
        raise InvalidArgumentError(f"matrix is not symmetric (max asymmetry {asym:.3g} at scale {scale:.3g})")
    if max_jitter is None:
        max_jitter = 1e-2 * max(float(torch.mean(torch.diagonal(K)).detach()), 1e-300)
    if base_jitter <= 0:
        raise InvalidArgumentError("base_jitter must be positive")
    return jittered_cholesky(K, base_jitter, max_jitter)


def jittered_cholesky(K: torch.Tensor, base_jitter: float, max_jitter: float) -> CholeskyResult:
    """The escalation loop of :func:`stabilized_cholesky` without input checks.

    For callers that built ``K`` symmetric themselves; non-finite input
    surfaces as a factorization failure (LAPACK flags NaN pivots in ``info``).
    """
    n = K.shape[-1]
    eye = torch.eye(n, dtype=K.dtype)
    jitter = float(base_jitter)
    L, info = torch.linalg.cholesky_ex(K + jitter * eye)
    if K.ndim > 2:
        # batched: escalate only the matrices that failed; report the largest jitter used
        bad = info != 0
        used = jitter
        while bool(bad.any()):
            if jitter >= max_jitter:
                raise NumericalFailureError(f"Cholesky of {n}x{n} matrix failed with jitter {jitter:.3g}")
            jitter = min(jitter * 10.0, max_jitter)
            Lb, ib = torch.linalg.cholesky_ex(K[bad] + jitter * eye)
            L = L.clone()
            L[bad] = Lb
            still = torch.zeros_like(bad)
            still[bad] = ib != 0
            bad = still
            used = jitter
        return CholeskyResult(L, used)
    while int(info) != 0:
        if jitter >= max_jitter:
            raise NumericalFailureError(f"Cholesky of {n}x{n} matrix failed with jitter {jitter:.3g}")
        jitter = min(jitter * 10.0, max_jitter)
        L, info = torch.linalg.cholesky_ex(K + jitter * eye)
    return CholeskyResult(L, jitter)
