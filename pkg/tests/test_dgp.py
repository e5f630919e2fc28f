import math

import numpy as np
import pytest
import torch

from dgpmpc.dgp import (
    DgpModel,
    GpLayer,
    LayerConditional,
    MeanKind,
    Normalizer,
    PosteriorSample,
    TransitionBatch,
    build_model,
    dgp_forward,
    layer_conditional,
    log_joint,
    log_prior,
    predict_next_states,
    sample_layer_output,
)
from dgpmpc.errors import InvalidArgumentError
from dgpmpc.inference import grad_neg_log_joint
from dgpmpc.kernels import KernelSpec, kernel_matrix


def final_layer(Z, out_dim=1, family="sexp", ls=1.0, sv=1.0):
    Z = np.asarray(Z, dtype=np.float64)
    return GpLayer(KernelSpec(family, [ls] * Z.shape[1], sv), torch.from_numpy(Z), out_dim, MeanKind.ZERO)


def dense_gp(layer, X, Y, Xs, noise_var):
    """Textbook GP regression by dense solves (noise_var may be the jitter)."""
    k = lambda a, b: kernel_matrix(layer.kernel, a, b).numpy()
    K = k(X, X) + noise_var * np.eye(len(X))
    Ks = k(Xs, X)
    mean = Ks @ np.linalg.solve(K, Y)
    cov = k(Xs, Xs) - Ks @ np.linalg.solve(K, Ks.T)
    return mean, cov


def test_interpolates_at_support_point():
    rng = np.random.default_rng(0)
    Z = rng.uniform(-2, 2, (6, 2))
    layer = final_layer(Z, out_dim=2)
    U = torch.from_numpy(rng.standard_normal((6, 2)))
    cond = layer_conditional(layer, U, torch.from_numpy(Z[3:4]), jitter=1e-12)
    np.testing.assert_allclose(cond.mean.numpy(), U[3:4].numpy(), atol=1e-6)
    assert abs(float(cond.cov[0, 0])) < 1e-6


def test_identity_mean_offset_cancels_at_support_point():
    rng = np.random.default_rng(1)
    Z = rng.uniform(-2, 2, (5, 3))
    layer = GpLayer(KernelSpec("matern52", [1.0] * 3, 0.5), torch.from_numpy(Z), 3, MeanKind.IDENTITY)
    U = torch.from_numpy(rng.standard_normal((5, 3)))
    cond = layer_conditional(layer, U, torch.from_numpy(Z[2:3]), jitter=1e-12)
    np.testing.assert_allclose(cond.mean.numpy(), U[2:3].numpy(), atol=1e-6)


@pytest.mark.parametrize("family", ["sexp", "matern52", "matern32", "matern12"])
def test_matches_dense_gp_when_inducing_at_training_inputs(family):
    rng = np.random.default_rng(2)
    X = rng.uniform(-3, 3, (15, 2))
    Y = np.sin(X[:, :1]) + 0.3 * X[:, 1:]
    layer = final_layer(X, family=family, ls=1.3, sv=0.8)
    Xs = rng.uniform(-4, 4, (4, 2))
    cond = layer_conditional(layer, torch.from_numpy(Y), torch.from_numpy(Xs), jitter=1e-6)
    jitter = 1e-6 * 0.8
    mean, cov = dense_gp(layer, X, Y, Xs, jitter)
    np.testing.assert_allclose(cond.mean.numpy(), mean, rtol=1e-8, atol=1e-12)
    np.testing.assert_allclose(np.diag(cond.cov.numpy()), np.diag(cov), rtol=1e-8)


def test_identical_rows_give_identical_conditional():
    rng = np.random.default_rng(3)
    layer = final_layer(rng.standard_normal((8, 2)), out_dim=2)
    U = torch.from_numpy(rng.standard_normal((8, 2)))
    F = torch.from_numpy(np.array([[0.1, 0.2], [0.5, -0.3], [0.1, 0.2]]))
    cond = layer_conditional(layer, U, F)
    assert torch.equal(cond.mean[0], cond.mean[2])
    assert torch.equal(cond.cov[0], cond.cov[2])
    assert torch.equal(cond.cov[:, 0], cond.cov[:, 2])
    out = sample_layer_output(cond, np.random.default_rng(0))
    assert torch.equal(out[0], out[2])
    assert not torch.equal(out[0], out[1])


def test_conditional_is_permutation_equivariant():
    rng = np.random.default_rng(4)
    layer = final_layer(rng.standard_normal((7, 3)), out_dim=2, family="matern32")
    U = torch.from_numpy(rng.standard_normal((7, 2)))
    F = torch.from_numpy(rng.standard_normal((5, 3)))
    perm = rng.permutation(5)
    a = layer_conditional(layer, U, F)
    b = layer_conditional(layer, U, F[perm])
    np.testing.assert_allclose(b.mean.numpy(), a.mean.numpy()[perm], atol=1e-12)
    np.testing.assert_allclose(b.cov.numpy(), a.cov.numpy()[np.ix_(perm, perm)], atol=1e-12)


def test_sample_with_zero_covariance_returns_mean():
    rng = np.random.default_rng(5)
    Z = rng.standard_normal((4, 2))
    layer = final_layer(Z)
    U = torch.from_numpy(rng.standard_normal((4, 1)))
    cond = layer_conditional(layer, U, torch.from_numpy(Z[:2]), jitter=1e-12)
    out = sample_layer_output(cond, np.random.default_rng(1))
    # residual spread is the jitter's standard deviation
    assert float(torch.max(torch.abs(out - cond.mean))) <= 6 * math.sqrt(cond.jitter) + 1e-6


def test_sample_unit_gaussian_moments():
    # one row, 10^5 independent output columns sharing cov [[1]]
    n_draws = 100_000
    cond = LayerConditional(
        mean=torch.zeros((1, n_draws), dtype=torch.float64),
        cov=torch.ones((1, 1), dtype=torch.float64),
        chol=torch.ones((1, 1), dtype=torch.float64),
        jitter=0.0,
        source=np.array([0]),
    )
    draws = sample_layer_output(cond, np.random.default_rng(6)).numpy().ravel()
    assert -0.02 <= draws.mean() <= 0.02
    assert 0.97 <= draws.var() <= 1.03


def exact_gp_model(X, Y, family="sexp", ls=1.0, sv=1.0, beta=1e4, jitter=1e-6):
    layer = final_layer(X, out_dim=Y.shape[1], family=family, ls=ls, sv=sv)
    S = Y.shape[1]
    model = DgpModel((layer,), torch.tensor(beta), S, X.shape[1] - S, None, jitter)
    return model, PosteriorSample((torch.from_numpy(Y),))


def test_forward_moments_match_exact_gp():
    rng = np.random.default_rng(7)
    X = rng.uniform(-2, 2, (10, 2))
    Y = np.cos(X[:, :1]) * X[:, 1:]
    model, sample = exact_gp_model(X, Y, ls=0.8)
    Xs = np.array([[0.3, -0.4], [2.5, 2.5]])
    mean, cov = dense_gp(model.layers[0], X, Y, Xs, 1e-6)
    draws = np.stack([
        dgp_forward(model, sample, Xs, False, np.random.default_rng(1000 + i)).numpy() for i in range(10_000)
    ])[..., 0]
    sd = np.sqrt(np.diag(cov))
    se_mean = sd / math.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(0) - mean[:, 0]) <= 3 * se_mean)
    se_var = np.diag(cov) * math.sqrt(2.0 / (len(draws) - 1))
    assert np.all(np.abs(draws.var(0, ddof=1) - np.diag(cov)) <= 3 * se_var)


def test_forward_duplicate_rows_and_empty_input():
    rng = np.random.default_rng(8)
    model, U = build_model(2, 1, 3, "matern32", 12, None, rng)
    inputs = rng.standard_normal((4, 3))
    inputs[3] = inputs[1]
    out = dgp_forward(model, U, inputs, False, np.random.default_rng(0))
    assert torch.equal(out[1], out[3])
    assert dgp_forward(model, U, np.zeros((0, 3)), False, np.random.default_rng(0)).shape == (0, 2)


def test_forward_rejects_wrong_width():
    rng = np.random.default_rng(9)
    model, U = build_model(2, 1, 1, "sexp", 5, None, rng)
    with pytest.raises(InvalidArgumentError):
        dgp_forward(model, U, np.zeros((2, 4)), False, rng)


def test_residual_identity_far_from_data():
    Z = np.zeros((3, 3))
    Z[:, 0] = [0.0, 0.1, 0.2]
    layer = final_layer(Z, out_dim=2, sv=1e-14)
    model = DgpModel((layer,), torch.tensor(1e6), 2, 1)
    sample = PosteriorSample((torch.zeros((3, 2), dtype=torch.float64),))
    s = np.array([[50.0, -40.0]])
    out = predict_next_states(model, sample, s, np.array([[30.0]]), False, np.random.default_rng(0))
    np.testing.assert_allclose(out.numpy(), s, atol=1e-6)


def test_predict_is_forward_plus_state():
    rng = np.random.default_rng(10)
    model, U = build_model(2, 1, 2, "sexp", 10, None, rng)
    s = rng.standard_normal((3, 2))
    a = rng.standard_normal((3, 1))
    nxt = predict_next_states(model, U, s, a, True, np.random.default_rng(5))
    delta = dgp_forward(model, U, np.hstack([s, a]), True, np.random.default_rng(5))
    assert torch.equal(nxt, torch.from_numpy(s) + delta)
    with pytest.raises(InvalidArgumentError):
        predict_next_states(model, U, s, a[:2], False, rng)


def test_noise_adds_beta_inverse_variance():
    beta = 4.0
    Z = np.zeros((2, 2))
    Z[1, 0] = 0.5
    layer = final_layer(Z, out_dim=1, ls=0.1, sv=0.3)
    model = DgpModel((layer,), torch.tensor(beta), 1, 1)
    sample = PosteriorSample((torch.zeros((2, 1), dtype=torch.float64),))
    # distinct inputs spaced far apart and far from Z: i.i.d. prior draws
    X = np.column_stack([100.0 + 10.0 * np.arange(2000), np.zeros(2000)])
    s0 = torch.from_numpy(X[:, :1])
    quiet, noisy = [], []
    for b in range(50):
        quiet.append(predict_next_states(model, sample, s0, X[:, 1:], False, np.random.default_rng(b)) - s0)
        noisy.append(predict_next_states(model, sample, s0, X[:, 1:], True, np.random.default_rng(b)) - s0)
    extra = torch.cat(noisy).var().item() - torch.cat(quiet).var().item()
    assert extra == pytest.approx(1.0 / beta, rel=0.05)


def test_log_joint_prior_at_mean_matches_logdet():
    rng = np.random.default_rng(12)
    model, _ = build_model(2, 1, 2, "matern52", 6, None, rng)
    U = [layer.mean(layer.inducing_inputs) for layer in model.layers]
    expected = 0.0
    for layer in model.layers:
        K = kernel_matrix(layer.kernel, layer.inducing_inputs).numpy()
        sv = float(layer.kernel.signal_variance)
        _, logdet = np.linalg.slogdet(K + model.jitter * sv * np.eye(len(K)))
        M, D = layer.num_inducing, layer.output_dim
        expected += -0.5 * (M * D * math.log(2 * math.pi) + D * logdet)
    assert float(log_prior(model, U)) == pytest.approx(expected, rel=1e-10)


def test_log_joint_increases_as_residual_shrinks():
    X = np.array([[0.0, 0.0]])
    model, sample = exact_gp_model(np.array([[0.0, 0.0], [1.0, 1.0]]), np.array([[0.5], [0.2]]), beta=1e4)
    values = []
    for obs in [1.5, 1.0, 0.7, 0.55, 0.5]:
        batch = TransitionBatch(X[:, :1], X[:, 1:], X[:, :1] + obs)
        values.append(float(log_joint(model, list(sample), batch)[0]))
    assert all(b > a for a, b in zip(values, values[1:]))


def test_log_joint_rejects_empty_batch():
    model, sample = exact_gp_model(np.array([[0.0, 0.0]]), np.array([[0.0]]))
    empty = TransitionBatch(np.zeros((0, 1)), np.zeros((0, 1)), np.zeros((0, 1)))
    with pytest.raises(InvalidArgumentError):
        log_joint(model, list(sample), empty)


def test_exact_gp_posterior_mean_is_stationary_point():
    s = np.linspace(-2, 2, 8)[:, None]
    a = np.zeros((8, 1))
    a[::2] = 1.0
    X = np.hstack([s, a])
    y = np.sin(s) + 0.1 * a
    beta = 50.0
    model, _ = exact_gp_model(X, y, ls=1.0, beta=beta, jitter=1e-12)
    K = kernel_matrix(model.layers[0].kernel, X).numpy()
    post_mean = K @ np.linalg.solve(K + np.eye(8) / beta, y)
    batch = TransitionBatch(s, a, s + y)
    (g,) = grad_neg_log_joint(model, [torch.from_numpy(post_mean)], batch, len(batch), None)
    assert float(torch.linalg.norm(g)) <= 1e-6


def test_normalizer_round_trip():
    rng = np.random.default_rng(14)
    X = rng.standard_normal((50, 3)) * [1, 10, 0.1] + [0, 5, -1]
    D = rng.standard_normal((50, 2)) * 3
    n = Normalizer.fit(X, D)
    d = torch.from_numpy(D)
    np.testing.assert_allclose(n.denormalize_deltas(n.normalize_deltas(d)).numpy(), D, atol=1e-12)
    np.testing.assert_allclose(n.normalize_inputs(torch.from_numpy(X)).numpy().std(0), 1.0, atol=1e-12)


def test_model_validates_layer_chain():
    rng = np.random.default_rng(15)
    model, _ = build_model(2, 1, 2, "sexp", 4, None, rng)
    with pytest.raises(InvalidArgumentError):
        DgpModel(model.layers[::-1], model.noise_precision, 2, 1)
    with pytest.raises(InvalidArgumentError):
        DgpModel(model.layers, torch.tensor(-1.0), 2, 1)
    with pytest.raises(InvalidArgumentError):
        model.check_sample([torch.zeros((4, 3)), torch.zeros((3, 2))])


def test_build_model_places_inducing_on_data():
    rng = np.random.default_rng(16)
    s = rng.standard_normal((40, 2))
    a = rng.standard_normal((40, 1))
    data = TransitionBatch(s, a, s + 0.1 * a)
    model, U = build_model(2, 1, 2, "sexp", 10, data, rng)
    Xn = (data.inputs - model.normalizer.input_mean) / model.normalizer.input_std
    Z = model.layers[0].inducing_inputs.numpy()
    assert all(np.any(np.all(np.isclose(Xn, z), axis=1)) for z in Z)
    padded, _ = build_model(2, 1, 1, "sexp", 60, data, rng)
    assert padded.layers[0].num_inducing == 60
