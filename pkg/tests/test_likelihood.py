import numpy as np
import pytest

from deepfactor.autodiff import Tape
from deepfactor.data import make_rng
from deepfactor.errors import InferenceError
from deepfactor.likelihood import (
    ModelEvaluator,
    elbo,
    emission_loglik,
    marginal_loglik,
    series_objective,
)
from deepfactor.local_models import LevelTrendIssm
from deepfactor.networks import fixed_effect

from helpers import (
    assert_grads_match,
    dataset_from_rows,
    dense_gaussian_loglik,
    lds_dense_cov,
    rbf_kernel,
    tiny_model,
)

LOG_2PI = np.log(2.0 * np.pi)


# --- emission --------------------------------------------------------------------


def test_poisson_emission_zero_count_zero_latent():
    t = Tape()
    ll = emission_loglik("poisson", np.array([0.0]), t.const([0.0]))
    assert float(ll.value) == pytest.approx(-np.log(2.0), abs=1e-9)


def test_poisson_emission_one_count_zero_latent():
    t = Tape()
    ll = emission_loglik("poisson", np.array([1.0]), t.const([0.0]))
    assert float(ll.value) == pytest.approx(np.log(np.log(2.0)) - np.log(2.0), abs=1e-9)


def test_poisson_emission_large_latent_asymptote():
    t = Tape()
    ll = emission_loglik("poisson", np.array([2.0]), t.const([20.0]))
    assert float(ll.value) == pytest.approx(2.0 * np.log(20.0) - 20.0 - np.log(2.0), abs=1e-6)


def test_emission_rejects_gaussian_and_bad_counts():
    t = Tape()
    with pytest.raises(InferenceError, match="exact marginal"):
        emission_loglik("gaussian", np.array([1.0]), t.const([0.0]))
    with pytest.raises(InferenceError):
        emission_loglik("poisson", np.array([-1.0]), t.const([0.0]))
    with pytest.raises(InferenceError):
        emission_loglik("poisson", np.array([0.5]), t.const([0.0]))


def test_poisson_emission_batched_rows():
    rng = make_rng(0)
    z = np.array([0.0, 2.0, 1.0])
    u = rng.normal(size=(4, 3))
    t = Tape()
    batched = emission_loglik("poisson", z, t.const(u)).value
    singles = [float(emission_loglik("poisson", z, t.const(u[i])).value) for i in range(4)]
    np.testing.assert_allclose(batched, singles, atol=1e-12)


# --- exact marginal ---------------------------------------------------------------


def test_marginal_unit_noise_zero_residual():
    ds = dataset_from_rows(np.zeros((1, 2)))
    model = tiny_model(ds, local="rnn", n_factors=0)
    for p in model.local.parameters():
        p.value[...] = 0.0
    model.local.readout.bias.value[...] = float(np.log(np.expm1(1.0)))  # softplus -> 1
    ll = float(marginal_loglik(model, ds, "s0").value)
    assert ll == pytest.approx(-LOG_2PI, abs=1e-6)


def test_marginal_requires_gaussian_emission():
    ds = dataset_from_rows([[1.0, 2.0, 0.0]])
    model = tiny_model(ds, emission="poisson")
    with pytest.raises(InferenceError):
        marginal_loglik(model, ds, "s0")


def test_marginal_residual_shift_invariance():
    rng = make_rng(1)
    z = rng.normal(size=6)
    ds = dataset_from_rows([z])
    model = tiny_model(ds, local="lds", n_factors=2, seed=3)
    base = float(marginal_loglik(model, ds, "s0").value)

    # shift observations and the fixed effect by the same constant
    shift = 11.25
    evaluator = ModelEvaluator(model, Tape())
    series = ds.get("s0")
    f = evaluator.fixed_effect_path(series, 0)
    shifted_residual = evaluator.tape.const(z + shift) - (f + shift)
    shifted = float(evaluator.local_loglik(series, 0, shifted_residual).value)
    assert shifted == pytest.approx(base, abs=1e-9)


def test_marginal_lds_matches_composed_dense_oracle():
    rng = make_rng(2)
    z = rng.normal(size=6)
    ds = dataset_from_rows([z, z[::-1]])
    model = tiny_model(ds, local="lds", n_factors=2, seed=5)
    for item, index in (("s0", 0), ("s1", 1)):
        got = float(marginal_loglik(model, ds, item).value)
        evaluator = ModelEvaluator(model, Tape())
        series = ds.get(item)
        f = evaluator.fixed_effect_path(series, index).value
        v = model.local.values_for(index)
        cov = lds_dense_cov(v.level_damping, v.trend_damping, v.level_innovation,
                            v.trend_innovation, v.obs_noise, v.init_scale, 6)
        assert got == pytest.approx(dense_gaussian_loglik(series.targets, f, cov), abs=1e-8)


def test_marginal_gp_matches_composed_dense_oracle():
    rng = make_rng(3)
    z = rng.normal(size=5)
    ds = dataset_from_rows([z])
    model = tiny_model(ds, local="gp", n_factors=1, seed=7)
    got = float(marginal_loglik(model, ds, "s0").value)
    evaluator = ModelEvaluator(model, Tape())
    series = ds.get("s0")
    f = evaluator.fixed_effect_path(series, 0).value
    v = model.local.values_for(0)
    times = np.arange(5) / 4.0
    cov = rbf_kernel(times, times, v.lengthscale, v.amplitude) + v.obs_noise ** 2 * np.eye(5)
    assert got == pytest.approx(dense_gaussian_loglik(z, f, cov), abs=1e-8)


def test_marginal_is_negative_for_unit_variances():
    rng = make_rng(4)
    z = rng.normal(size=4)
    ds = dataset_from_rows([z])
    for local in ("rnn", "lds", "gp"):
        model = tiny_model(ds, local=local, n_factors=0, seed=11)
        if local == "rnn":
            model.local.readout.weight.value[...] = 0.0
            model.local.readout.bias.value[...] = float(np.log(np.expm1(1.5)))
        elif local == "lds":
            model.local.raw_obs_noise.value[...] = float(np.log(np.expm1(1.2)))
        else:
            model.local.raw_obs_noise.value[...] = float(np.log(np.expm1(1.1)))
        assert float(marginal_loglik(model, ds, "s0").value) < 0.0


# --- variational bound ---------------------------------------------------------------


def test_elbo_gaussian_point_mass_equals_marginal():
    rng = make_rng(5)
    z = rng.normal(size=5)
    ds = dataset_from_rows([z])
    for local in ("rnn", "lds", "gp"):
        model = tiny_model(ds, local=local, n_factors=2, seed=13)
        exact = float(marginal_loglik(model, ds, "s0").value)
        bound, estimate = elbo(model, ds, "s0", n_samples=4)
        assert abs(float(bound.value) - exact) <= 1e-10
        assert abs(estimate.value - exact) <= 1e-10
        assert estimate.recon == 0.0 and estimate.entropy == 0.0


def test_elbo_requires_positive_sample_count():
    ds = dataset_from_rows([[1.0, 0.0, 2.0]])
    model = tiny_model(ds, emission="poisson")
    with pytest.raises(InferenceError):
        elbo(model, ds, "s0", n_samples=0)


def test_elbo_sample_count_consistency():
    ds = dataset_from_rows([np.array([1.0, 0.0, 2.0, 1.0])])
    model = tiny_model(ds, local="rnn", emission="poisson", n_factors=1, seed=17)
    small, big = [], []
    for seed in range(200):
        rng = make_rng(900, stream=seed)
        _, e1 = elbo(model, ds, "s0", n_samples=1, rng=rng)
        _, e16 = elbo(model, ds, "s0", n_samples=16, rng=rng)
        small.append(e1.value)
        big.append(e16.value)
    small, big = np.array(small), np.array(big)
    assert np.all(np.isfinite(small)) and np.all(np.isfinite(big))
    gap = small.mean() - big.mean()
    stderr = np.sqrt(small.var() / 200 + big.var() / 200)
    assert abs(gap) < 5.0 * stderr


def test_elbo_single_sample_estimator_unbiased():
    ds = dataset_from_rows([np.array([2.0, 0.0, 1.0])])
    model = tiny_model(ds, local="lds", emission="poisson", n_factors=0, seed=19)
    n = 10_000
    rng = make_rng(901)
    _, big = elbo(model, ds, "s0", n_samples=n, rng=rng)
    singles = np.empty(n)
    for k in range(n):
        _, e = elbo(model, ds, "s0", n_samples=1, rng=make_rng(902, stream=k))
        singles[k] = e.value
    stderr = singles.std() / np.sqrt(n)
    assert abs(singles.mean() - big.value) < 4.0 * stderr


def test_elbo_gradients_match_finite_differences_frozen_draws():
    ds = dataset_from_rows([np.array([1.0, 3.0, 0.0, 2.0])])
    for local in ("rnn", "lds", "gp"):
        model = tiny_model(ds, local=local, emission="poisson", n_factors=1,
                           global_hidden=2, noise_hidden=2, recognition_hidden=2, seed=23)
        eps = make_rng(903).standard_normal((2, 4))

        def root():
            bound, _ = elbo(model, ds, "s0", n_samples=2, eps=eps)
            return bound

        assert_grads_match(root, model.parameters())


def test_series_objective_dispatches_on_emission():
    z = np.array([1.0, 0.0, 2.0])
    ds = dataset_from_rows([z])
    gaussian = tiny_model(ds, local="rnn", emission="gaussian", seed=29)
    assert float(series_objective(gaussian, ds, "s0").value) == pytest.approx(
        float(marginal_loglik(gaussian, ds, "s0").value))
    poisson = tiny_model(ds, local="rnn", emission="poisson", seed=29)
    eps = make_rng(904).standard_normal((1, 3))
    got = series_objective(poisson, ds, "s0", n_samples=1, eps=eps)
    bound, _ = elbo(poisson, ds, "s0", n_samples=1, eps=eps)
    assert float(got.value) == pytest.approx(float(bound.value))
