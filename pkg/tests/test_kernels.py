import math

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dgpmpc.errors import InvalidArgumentError, NumericalFailureError
from dgpmpc.kernels import (
    KernelFamily,
    KernelSpec,
    kernel_eval,
    kernel_matrix,
    stabilized_cholesky,
)

FAMILIES = list(KernelFamily)


def spec(family, ls, sv=1.0):
    return KernelSpec(family, ls, sv)


def test_sexp_zero_distance_is_signal_variance():
    k = spec("sexp", [0.3, 2.0], 1.7)
    x = np.array([0.4, -1.2])
    assert kernel_eval(k, x, x) == pytest.approx(1.7, abs=0)


def test_matern12_unit_distance():
    # high-precision scalar oracle for sigma^2 exp(-r)
    expected = float(mpmath.exp(-1))
    got = kernel_eval(spec("matern12", [1.0]), [0.0], [1.0])
    assert got == pytest.approx(expected, rel=1e-15)
    assert got == pytest.approx(0.36787944, abs=1e-8)


@pytest.mark.parametrize("family,formula", [
    ("matern32", lambda r: (1 + mpmath.sqrt(3) * r) * mpmath.exp(-mpmath.sqrt(3) * r)),
    ("matern52", lambda r: (1 + mpmath.sqrt(5) * r + 5 * r**2 / 3) * mpmath.exp(-mpmath.sqrt(5) * r)),
    ("sexp", lambda r: mpmath.exp(-r**2 / 2)),
])
def test_closed_forms_against_mpmath(family, formula):
    mpmath.mp.dps = 30
    ls = [0.7, 1.9]
    x, y = [0.1, -0.4], [1.3, 0.8]
    r = mpmath.sqrt(sum((mpmath.mpf(a) - b) ** 2 / mpmath.mpf(l) ** 2 for a, b, l in zip(x, y, ls)))
    assert kernel_eval(spec(family, ls, 2.5), x, y) == pytest.approx(float(2.5 * formula(r)), rel=1e-13)


def test_matern32_zero_distance():
    assert kernel_eval(spec("matern32", [2.0], 1.5), [0.0], [0.0]) == 1.5


def test_ard_monotonicity():
    k = spec("sexp", [1.0, 10.0])
    assert kernel_eval(k, [0, 0], [1, 0]) < kernel_eval(k, [0, 0], [0, 1])


def test_dimension_mismatch():
    k = spec("matern52", [1.0, 1.0])
    with pytest.raises(InvalidArgumentError):
        kernel_eval(k, [0.0], [0.0])
    with pytest.raises(InvalidArgumentError):
        kernel_matrix(k, np.zeros((3, 3)), np.zeros((2, 2)))


def test_invalid_hyperparameters():
    with pytest.raises(InvalidArgumentError):
        spec("sexp", [1.0, -1.0])
    with pytest.raises(InvalidArgumentError):
        spec("sexp", [1.0], 0.0)


def test_kernel_matrix_small_cases():
    k = spec("matern32", [0.5, 0.5], 2.0)
    assert kernel_matrix(k, [[0.1, 0.2]]).tolist() == [[2.0]]
    X = np.array([[0.3, 0.3], [0.3, 0.3]])
    assert np.all(kernel_matrix(k, X, X).numpy() == 2.0)


@pytest.mark.parametrize("family", FAMILIES)
def test_kernel_matrix_entries_and_symmetry(family):
    rng = np.random.default_rng(3)
    k = spec(family, rng.uniform(0.5, 2, 3), 1.3)
    X = rng.standard_normal((5, 3))
    K = kernel_matrix(k, X).numpy()
    np.testing.assert_allclose(K, K.T, atol=1e-12, rtol=0)
    for i in range(5):
        for j in range(5):
            assert K[i, j] == kernel_eval(k, X[i], X[j])


@pytest.mark.parametrize("family", FAMILIES)
def test_positive_definite_with_small_jitter(family):
    rng = np.random.default_rng(11)
    for _ in range(100):
        d = int(rng.integers(1, 6))
        n = int(rng.integers(1, 51))
        k = spec(family, rng.uniform(0.1, 3.0, d), rng.uniform(0.5, 2.0))
        K = kernel_matrix(k, rng.standard_normal((n, d)))
        L, info = torch.linalg.cholesky_ex(K + 1e-6 * torch.eye(n, dtype=K.dtype))
        assert int(info) == 0


finite = st.floats(-5, 5, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(
    family=st.sampled_from(FAMILIES),
    x=st.lists(finite, min_size=3, max_size=3),
    y=st.lists(finite, min_size=3, max_size=3),
    ls=st.lists(st.floats(0.05, 10), min_size=3, max_size=3),
    scale=st.floats(0.01, 100),
)
def test_exchangeable_and_scale_invariant(family, x, y, ls, scale):
    k = spec(family, ls, 1.0)
    kxy = kernel_eval(k, x, y)
    assert abs(kxy - kernel_eval(k, y, x)) <= 1e-14
    scaled = spec(family, [scale * l for l in ls], 1.0)
    kxy_scaled = kernel_eval(scaled, [scale * v for v in x], [scale * v for v in y])
    assert kxy_scaled == pytest.approx(kxy, rel=1e-12, abs=1e-300)


def test_family_ordering_on_grid():
    # smoothness ordering only holds near the origin; the tails cross further out
    r = np.linspace(0.0, 1.0, 101)
    vals = {f: np.array([kernel_eval(spec(f, [1.0]), [0.0], [v]) for v in r]) for f in FAMILIES}
    assert vals[KernelFamily.SEXP][0] == vals[KernelFamily.MATERN12][0] == 1.0
    assert np.all(vals[KernelFamily.SEXP][1:] >= vals[KernelFamily.MATERN52][1:])
    assert np.all(vals[KernelFamily.MATERN52][1:] >= vals[KernelFamily.MATERN32][1:])
    assert np.all(vals[KernelFamily.MATERN32][1:] >= vals[KernelFamily.MATERN12][1:])


def test_family_parsing():
    assert KernelFamily.parse("Matern-3/2") is KernelFamily.MATERN32
    assert KernelFamily.parse("SEXP") is KernelFamily.SEXP
    with pytest.raises(InvalidArgumentError):
        KernelFamily.parse("linear")


def test_cholesky_identity():
    L, jitter = stabilized_cholesky(torch.eye(3, dtype=torch.float64), base_jitter=1e-6)
    assert jitter == 1e-6
    np.testing.assert_allclose(L.numpy(), math.sqrt(1 + 1e-6) * np.eye(3), rtol=1e-15)


def test_cholesky_rank_one_escalates():
    v = np.array([1.0, 2.0, -0.5])
    K = np.outer(v, v)
    L, jitter = stabilized_cholesky(K, base_jitter=1e-20, max_jitter=1e-2)
    assert jitter > 1e-20
    # eigendecomposition oracle for K + jitter I
    w, V = np.linalg.eigh(K)
    oracle = V @ np.diag(w + jitter) @ V.T
    LLt = (L @ L.T).numpy()
    assert np.linalg.norm(LLt - K) <= jitter * math.sqrt(3) * (1 + 1e-6) + 1e-14
    np.testing.assert_allclose(LLt, oracle, atol=1e-12)


def test_cholesky_rejects_asymmetric():
    K = np.array([[1.0, 0.5], [0.4, 1.0]])
    with pytest.raises(InvalidArgumentError):
        stabilized_cholesky(K)


def test_cholesky_gives_up_at_cap():
    K = -np.eye(4)
    with pytest.raises(NumericalFailureError, match="4x4"):
        stabilized_cholesky(K, base_jitter=1e-6, max_jitter=1e-2)
