"""Shared independent oracles for the test suite: central finite differences
for gradients and explicitly constructed dense Gaussians for the streaming
likelihood paths."""

import numpy as np
from scipy.stats import multivariate_normal


def finite_difference_grads(value_fn, params, step=1e-5):
    """Central-difference gradient of ``value_fn()`` w.r.t. every parameter
    entry. ``value_fn`` must re-evaluate from the parameters' current values."""
    grads = []
    for p in params:
        g = np.zeros_like(p.value)
        flat_v = p.value.reshape(-1)
        flat_g = g.reshape(-1)
        for j in range(flat_v.size):
            orig = flat_v[j]
            flat_v[j] = orig + step
            f_plus = value_fn()
            flat_v[j] = orig - step
            f_minus = value_fn()
            flat_v[j] = orig
            flat_g[j] = (f_plus - f_minus) / (2.0 * step)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric):
    """max over entries of |a-n| / max(1, |a|, |n|)."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def assert_grads_match(build_root, params, rel_tol=1e-4, step=1e-5):
    """Check tape gradients of ``build_root() -> scalar Var`` against central
    finite differences for every parameter in ``params``."""
    for p in params:
        p.zero_grad()
    root = build_root()
    root.tape.backward(root)
    analytic = [p.grad.copy() for p in params]
    numeric = finite_difference_grads(lambda: float(build_root().value), params, step=step)
    err = max_rel_error(analytic, numeric)
    assert err < rel_tol, f"gradient mismatch: max rel error {err:.3e} >= {rel_tol}"
    return err


def dense_gaussian_loglik(residual, mean, cov):
    """Log-density of ``residual`` under N(mean, cov), via scipy."""
    return float(multivariate_normal(mean=mean, cov=cov, allow_singular=False).logpdf(residual))


def lds_dense_cov(delta, gamma, alpha, beta, sigma, s0, T):
    """Joint covariance of T observations from the damped level-trend
    state-space model, built by explicit composition of the recurrence."""
    F = np.array([[delta, gamma], [0.0, gamma]])
    q = np.array([alpha, beta])
    a = np.array([delta, gamma])
    # state covariance propagated step by step, plus cross terms
    powers = [np.eye(2)]
    for _ in range(T):
        powers.append(F @ powers[-1])
    cov = np.zeros((T, T))
    S0 = s0 ** 2 * np.eye(2)
    for t in range(1, T + 1):
        for u in range(1, T + 1):
            c = powers[t] @ S0 @ powers[u].T
            for s in range(1, min(t, u) + 1):
                c += powers[t - s] @ np.outer(q, q) @ powers[u - s].T
            cov[t - 1, u - 1] = a @ c @ a
    cov += sigma ** 2 * np.eye(T)
    return cov


def rbf_kernel(times_a, times_b, lengthscale, amplitude):
    d = np.subtract.outer(np.asarray(times_a, float), np.asarray(times_b, float))
    return amplitude ** 2 * np.exp(-0.5 * d ** 2 / lengthscale ** 2)


def dataset_from_rows(rows, start=None):
    from deepfactor.data import Series, TimeSeriesDataset
    from deepfactor.synthetic import DEFAULT_START

    start = start or DEFAULT_START
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    return TimeSeriesDataset(
        [Series.from_targets(f"s{i}", start, row) for i, row in enumerate(rows)]
    )


def tiny_model(dataset, local="rnn", emission="gaussian", n_factors=2,
               global_hidden=3, noise_hidden=3, recognition="mlp",
               recognition_hidden=3, seed=0):
    from deepfactor.model import DeepFactorModel, ModelConfig

    return DeepFactorModel(ModelConfig(
        series_ids=dataset.ids,
        local_model=local,
        emission=emission,
        n_factors=n_factors,
        global_hidden=global_hidden,
        noise_hidden=noise_hidden,
        recognition=recognition,
        recognition_hidden=recognition_hidden,
        init_seed=seed,
    ))
