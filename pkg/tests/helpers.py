import numpy as np
import torch

from dgpmpc.dgp import TransitionBatch, build_model


def linear_dataset(rng, n, noise=0.01):
    """s' = 0.9 s + a + N(0, noise^2) on s, a ~ U(-1, 1)."""
    s = rng.uniform(-1, 1, (n, 1))
    a = rng.uniform(-1, 1, (n, 1))
    return TransitionBatch(s, a, 0.9 * s + a + noise * rng.standard_normal((n, 1)))


def tiny_deep_problem(seed=0):
    """L=2, M=3, N=5, one state and one action dimension."""
    rng = np.random.default_rng(seed)
    s = rng.uniform(-1, 1, (5, 1))
    a = rng.uniform(-1, 1, (5, 1))
    data = TransitionBatch(s, a, s + np.sin(2 * s) + 0.5 * a)
    model, _ = build_model(1, 1, 2, "matern52", 3, data, rng, inner_signal_variance=0.3, noise_precision=20.0)
    U = [torch.from_numpy(rng.standard_normal((3, layer.output_dim)) * 0.5) for layer in model.layers]
    U[0] = U[0] + model.layers[0].inducing_inputs
    return model, U, data


def batch_means_se(x, n_batches=50):
    """Monte-Carlo standard error of the mean of an autocorrelated series."""
    x = np.asarray(x)
    usable = len(x) - len(x) % n_batches
    means = x[:usable].reshape(n_batches, -1, *x.shape[1:]).mean(axis=1)
    return means.std(axis=0, ddof=1) / np.sqrt(n_batches)
