"""Per-series objectives: emission log-probabilities, the exact marginal
likelihood for Gaussian observations, and the structured variational bound for
count observations.

The variational bound keeps the local-state integral exact: for each sampled
latent path the prior term reuses the same differentiable exact-marginal code
as the Gaussian case (with the observations replaced by the sampled path), so
only the latent function is ever sampled, never the local states.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .autodiff import Tape, Var, log, softplus
from .data import Series, TimeSeriesDataset
from .errors import InferenceError
from .local_models import (
    GaussianProcessLocal,
    LevelTrendIssm,
    gp_loglik,
    kalman_loglik,
    normalized_times,
    rnn_noise_loglik,
)
from .model import DeepFactorModel
from .networks import NoiseNetwork, fixed_effect


def emission_loglik(kind: str, observations: np.ndarray, latent: Var) -> Var:
    """log p(z | u) for a non-Gaussian emission; the latent may be one path
    (T,) or a batch (n, T), giving a scalar or per-row vector.

    Gaussian emissions never take this route: their noise lives inside the
    local model and the exact marginal applies.
    """
    if kind == "gaussian":
        raise InferenceError("gaussian emission: use the exact marginal path")
    if kind != "poisson":
        raise InferenceError(f"unknown emission kind {kind!r}")
    z = np.asarray(observations, dtype=np.float64)
    if z.ndim != 1:
        raise InferenceError(f"observations must be a (T,) vector, got shape {z.shape}")
    if np.any(z < 0) or np.any(z != np.round(z)):
        raise InferenceError("poisson emission requires nonnegative integer observations")
    if latent.value.shape[-1] != len(z):
        raise InferenceError(
            f"latent length {latent.value.shape[-1]} does not match {len(z)} observations")
    tape = latent.tape
    rate = softplus(latent) + 1e-12
    axis = 1 if latent.value.ndim == 2 else None
    per_step = tape.const(z) * log(rate) - rate
    return per_step.sum(axis=axis) - float(np.sum(gammaln(z + 1.0)))


class ModelEvaluator:
    """Caches the per-tape unrolls (factor paths, noise scales) that are shared
    across the series of one minibatch."""

    def __init__(self, model: DeepFactorModel, tape: Tape):
        self.model = model
        self.tape = tape
        self._factors: dict = {}
        self._sigmas: dict = {}

    def factor_matrix(self, series: Series) -> Var | None:
        if self.model.global_net is None:
            return None
        key = (series.start, series.length)
        if key not in self._factors:
            self._factors[key] = self.model.global_net.unroll(self.tape, series.covariates)
        return self._factors[key]

    def fixed_effect_path(self, series: Series, index: int) -> Var | None:
        factors = self.factor_matrix(series)
        if factors is None:
            return None
        loading = self.model.embeddings.lookup(self.tape, index)
        return fixed_effect(loading, factors)

    def noise_scales(self, series: Series) -> Var:
        key = (series.start, series.length)
        if key not in self._sigmas:
            self._sigmas[key] = self.model.local.unroll(self.tape, series.covariates)
        return self._sigmas[key]

    def latent_residual(self, series: Series, index: int, latent) -> Var:
        """latent minus the fixed effect; latent may be a Var or an ndarray."""
        if not isinstance(latent, Var):
            latent = self.tape.const(np.asarray(latent, dtype=np.float64))
        f = self.fixed_effect_path(series, index)
        return latent if f is None else latent - f

    def local_loglik(self, series: Series, index: int, residual: Var) -> Var:
        model = self.model
        if isinstance(model.local, NoiseNetwork):
            return rnn_noise_loglik(residual, self.noise_scales(series))
        if isinstance(model.local, LevelTrendIssm):
            return kalman_loglik(residual, model.local.params_for(self.tape, index))
        assert isinstance(model.local, GaussianProcessLocal)
        times = normalized_times(series.length)
        return gp_loglik(residual, times, model.local.params_for(self.tape, index))


def marginal_loglik(model: DeepFactorModel, dataset: TimeSeriesDataset, item_id: str,
                    evaluator: ModelEvaluator | None = None) -> Var:
    """Exact log p(z) for a Gaussian-emission series: the residual after the
    fixed effect is scored by the local model's exact marginal."""
    if model.config.emission != "gaussian":
        raise InferenceError("marginal likelihood requires a gaussian emission; use elbo")
    evaluator = evaluator or ModelEvaluator(model, Tape())
    series = dataset.get(item_id)
    index = model.series_index(item_id)
    residual = evaluator.latent_residual(series, index, series.targets)
    return evaluator.local_loglik(series, index, residual)


@dataclass
class ElboEstimate:
    """Monte-Carlo evidence bound; component fields are sums over the samples,
    so value == (recon + prior + entropy) / n_samples."""

    value: float
    recon: float
    prior: float
    entropy: float
    n_samples: int

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise InferenceError("non-finite bound estimate")


def elbo(model: DeepFactorModel, dataset: TimeSeriesDataset, item_id: str,
         n_samples: int = 1, eps: np.ndarray | None = None,
         rng: np.random.Generator | None = None,
         evaluator: ModelEvaluator | None = None) -> tuple[Var, ElboEstimate]:
    """Stochastic lower bound on log p(z), averaged over ``n_samples``
    reparameterized posterior draws.

    For a Gaussian emission the latent path is the observed series itself
    (a point mass), the reconstruction and entropy terms vanish, and the bound
    collapses to the exact marginal likelihood.
    """
    if n_samples < 1:
        raise InferenceError(f"n_samples must be >= 1, got {n_samples}")
    evaluator = evaluator or ModelEvaluator(model, Tape())
    series = dataset.get(item_id)
    index = model.series_index(item_id)

    if model.config.emission == "gaussian":
        residual = evaluator.latent_residual(series, index, series.targets)
        prior = evaluator.local_loglik(series, index, residual)
        value = float(prior.value)
        return prior, ElboEstimate(value, 0.0, n_samples * value, 0.0, n_samples)

    if model.recognition is None:
        raise InferenceError("non-gaussian emission requires a recognition network")
    if eps is None:
        rng = rng or np.random.default_rng(0)
        eps = rng.standard_normal((n_samples, series.length))
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != (n_samples, series.length):
        raise InferenceError(f"eps must have shape ({n_samples}, {series.length}), got {eps.shape}")

    posterior = model.recognition.recognize(evaluator.tape, series.targets)
    latent = posterior.sample(eps)
    recon = emission_loglik(model.config.emission, series.targets, latent)
    residual = evaluator.latent_residual(series, index, latent)
    prior = evaluator.local_loglik(series, index, residual)
    entropy = -posterior.log_density(latent)
    total = recon + prior + entropy
    bound = total.sum() / n_samples
    estimate = ElboEstimate(
        value=float(bound.value),
        recon=float(recon.value.sum()),
        prior=float(prior.value.sum()),
        entropy=float(entropy.value.sum()),
        n_samples=n_samples,
    )
    return bound, estimate


def series_objective(model: DeepFactorModel, dataset: TimeSeriesDataset, item_id: str,
                     n_samples: int = 1, eps: np.ndarray | None = None,
                     rng: np.random.Generator | None = None,
                     evaluator: ModelEvaluator | None = None) -> Var:
    """The per-series training objective on the tape: log-marginal for
    Gaussian emissions, otherwise the variational bound."""
    if model.config.emission == "gaussian":
        return marginal_loglik(model, dataset, item_id, evaluator=evaluator)
    bound, _ = elbo(model, dataset, item_id, n_samples=n_samples, eps=eps, rng=rng,
                    evaluator=evaluator)
    return bound
