"""Per-series stochastic models for the residual part of each series: a
Gaussian noise process with network-generated scales, a damped level-trend
innovation state-space model with exact Kalman-filter marginals, and a
zero-mean RBF Gaussian process with exact marginals.

Every log-likelihood here is recorded on the tape and accepts either a single
residual path of shape (T,) or a batch of paths (n, T); batches share one
covariance recursion/factorization, which keeps multi-sample bounds cheap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .autodiff import (
    Parameter,
    Tape,
    Var,
    concat,
    dot,
    exp,
    log,
    logdet_psd,
    matmul,
    outer,
    sigmoid,
    sigmoid_values,
    softplus,
    softplus_values,
    solve_psd,
    square,
    stack,
    transpose,
)
from .errors import ForecastError, NumericsError, ShapeError

LOG_2PI = float(np.log(2.0 * np.pi))
POSITIVE_FLOOR = 1e-8
# exact matrix first so the streaming value matches dense oracles; escalate
# only when the factorization fails
JITTER_LADDER = (0.0, 1e-10, 1e-8, 1e-6)


def _inverse_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


def _inverse_sigmoid(y: float) -> float:
    return float(np.log(y / (1.0 - y)))


def _as_rows(residual, tape: Tape) -> tuple[Var, bool]:
    """Lift a (T,) or (n, T) residual to a (n, T) Var; flag single-path input."""
    if not isinstance(residual, Var):
        residual = tape.const(np.asarray(residual, dtype=np.float64))
    if residual.value.ndim == 1:
        return stack([residual]), True
    if residual.value.ndim == 2:
        return residual, False
    raise ShapeError(f"residual must be (T,) or (n, T), got shape {residual.value.shape}")


# ---------------------------------------------------------------------------
# correlated RNN noise


def rnn_noise_loglik(residual, sigma: Var) -> Var:
    """Independent-Gaussian log-likelihood with per-step scales sigma > 0."""
    if np.any(sigma.value <= 0.0):
        raise NumericsError("noise scales must be positive")
    tape = sigma.tape
    rows, single = _as_rows(residual, tape)
    if rows.value.shape[1] != sigma.value.shape[0]:
        raise ShapeError(
            f"residual length {rows.value.shape[1]} does not match {sigma.value.shape[0]} scales"
        )
    var = square(sigma)
    quad = (square(rows) / var).sum(axis=1)
    norm = (log(var) + LOG_2PI).sum()
    ll = -0.5 * norm - 0.5 * quad
    return ll[0] if single else ll


# ---------------------------------------------------------------------------
# damped level-trend state-space model


@dataclass
class IssmParams:
    """Tape-recorded scalar parameters of the damped level-trend model."""

    level_damping: Var      # in (0, 1]
    trend_damping: Var      # in (0, 1]
    level_innovation: Var   # > 0
    trend_innovation: Var   # > 0
    obs_noise: Var          # > 0
    init_scale: Var         # > 0, std of the isotropic initial state

    @classmethod
    def from_values(cls, tape: Tape, level_damping, trend_damping, level_innovation,
                    trend_innovation, obs_noise, init_scale) -> "IssmParams":
        c = tape.const
        return cls(c(level_damping), c(trend_damping), c(level_innovation),
                   c(trend_innovation), c(obs_noise), c(init_scale))


@dataclass
class IssmValues:
    """Plain-float parameter values, used on the sampling/forecast path."""

    level_damping: float
    trend_damping: float
    level_innovation: float
    trend_innovation: float
    obs_noise: float
    init_scale: float

    def matrices(self):
        transition = np.array([[self.level_damping, self.trend_damping],
                               [0.0, self.trend_damping]])
        innovation = np.array([self.level_innovation, self.trend_innovation])
        emission = np.array([self.level_damping, self.trend_damping])
        return transition, innovation, emission


@dataclass
class KalmanBelief:
    """Filtered state estimate; mean rows pair with residual rows."""

    mean: Var   # (n, 2)
    cov: Var    # (2, 2), shared across rows

    def mean_values(self) -> np.ndarray:
        return self.mean.value

    def cov_values(self) -> np.ndarray:
        return self.cov.value


def kalman_filter(residual, params: IssmParams) -> tuple[Var, KalmanBelief]:
    """Exact prediction-error-decomposition filter for the level-trend model.

    The observation at each step is emission . state + N(0, obs_noise^2); the
    state starts at N(0, init_scale^2 I) and is advanced before the first
    observation. Covariances are shared across residual rows; the Joseph-form
    update keeps them symmetric. Returns per-row log-likelihoods and the
    filtered belief after the last step.
    """
    p = params
    tape = p.level_damping.tape
    rows, single = _as_rows(residual, tape)
    n, length = rows.value.shape

    zero = tape.const(0.0)
    eye2 = tape.const(np.eye(2))
    transition = stack([concat([p.level_damping, p.trend_damping]),
                        concat([zero, p.trend_damping])])
    emission = concat([p.level_damping, p.trend_damping])
    innovation = concat([p.level_innovation, p.trend_innovation])
    innovation_cov = outer(innovation, innovation)
    obs_var = square(p.obs_noise)

    mean = tape.const(np.zeros((n, 2)))
    cov = square(p.init_scale) * eye2
    loglik = tape.const(np.zeros(n))
    for t in range(length):
        mean_pred = matmul(mean, transpose(transition))
        cov_pred = matmul(matmul(transition, cov), transpose(transition)) + innovation_cov
        innov = rows[:, t] - matmul(mean_pred, emission)
        innov_var = dot(emission, matmul(cov_pred, emission)) + obs_var
        if float(innov_var.value) <= 0.0:
            raise NumericsError(f"non-positive innovation variance at step {t + 1}")
        loglik = loglik - 0.5 * (LOG_2PI + log(innov_var)) - square(innov) / (2.0 * innov_var)
        gain = matmul(cov_pred, emission) / innov_var
        mean = mean_pred + outer(innov, gain)
        shrink = eye2 - outer(gain, emission)
        cov = matmul(matmul(shrink, cov_pred), transpose(shrink)) + obs_var * outer(gain, gain)
    belief = KalmanBelief(mean, cov)
    return (loglik[0] if single else loglik), belief


def kalman_loglik(residual, params: IssmParams) -> Var:
    """Exact marginal log-likelihood of the residual path(s)."""
    loglik, _ = kalman_filter(residual, params)
    return loglik


def kalman_forecast(mean: np.ndarray, cov: np.ndarray, values: IssmValues,
                    horizon: int, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Ancestral sampling of future residuals from the filtered belief.

    Returns an (n_samples, horizon) array, observation noise included.
    """
    if horizon < 1:
        raise ForecastError(f"horizon must be >= 1, got {horizon}")
    transition, innovation, emission = values.matrices()
    cov = 0.5 * (cov + cov.T) + POSITIVE_FLOOR * np.eye(2)
    chol = np.linalg.cholesky(cov)
    states = mean + rng.standard_normal((n_samples, 2)) @ chol.T
    paths = np.empty((n_samples, horizon))
    for t in range(horizon):
        shocks = rng.standard_normal(n_samples)
        states = states @ transition.T + np.outer(shocks, innovation)
        noise = rng.standard_normal(n_samples) * values.obs_noise
        paths[:, t] = states @ emission + noise
    return paths


class LevelTrendIssm:
    """Per-series trainable parameters of the damped level-trend model,
    stored raw and mapped through sigmoid/softplus for the stated ranges."""

    INIT = {"level_damping": 0.9, "trend_damping": 0.8, "level_innovation": 0.5,
            "trend_innovation": 0.1, "obs_noise": 0.5, "init_scale": 1.0}

    def __init__(self, n_series: int, name: str = "local.issm"):
        self.n_series = n_series
        self.raw_level_damping = Parameter(
            f"{name}.raw_level_damping",
            np.full(n_series, _inverse_sigmoid(self.INIT["level_damping"])))
        self.raw_trend_damping = Parameter(
            f"{name}.raw_trend_damping",
            np.full(n_series, _inverse_sigmoid(self.INIT["trend_damping"])))
        self.raw_level_innovation = Parameter(
            f"{name}.raw_level_innovation",
            np.full(n_series, _inverse_softplus(self.INIT["level_innovation"])))
        self.raw_trend_innovation = Parameter(
            f"{name}.raw_trend_innovation",
            np.full(n_series, _inverse_softplus(self.INIT["trend_innovation"])))
        self.raw_obs_noise = Parameter(
            f"{name}.raw_obs_noise",
            np.full(n_series, _inverse_softplus(self.INIT["obs_noise"])))
        self.raw_init_scale = Parameter(
            f"{name}.raw_init_scale",
            np.full(n_series, _inverse_softplus(self.INIT["init_scale"])))

    def _raws(self):
        return [self.raw_level_damping, self.raw_trend_damping, self.raw_level_innovation,
                self.raw_trend_innovation, self.raw_obs_noise, self.raw_init_scale]

    def params_for(self, tape: Tape, index: int) -> IssmParams:
        raws = [tape.param(p)[index] for p in self._raws()]
        return IssmParams(
            level_damping=sigmoid(raws[0]),
            trend_damping=sigmoid(raws[1]),
            level_innovation=softplus(raws[2]) + POSITIVE_FLOOR,
            trend_innovation=softplus(raws[3]) + POSITIVE_FLOOR,
            obs_noise=softplus(raws[4]) + POSITIVE_FLOOR,
            init_scale=softplus(raws[5]) + POSITIVE_FLOOR,
        )

    def values_for(self, index: int) -> IssmValues:
        return IssmValues(
            level_damping=float(sigmoid_values(self.raw_level_damping.value[index])),
            trend_damping=float(sigmoid_values(self.raw_trend_damping.value[index])),
            level_innovation=float(softplus_values(self.raw_level_innovation.value[index])) + POSITIVE_FLOOR,
            trend_innovation=float(softplus_values(self.raw_trend_innovation.value[index])) + POSITIVE_FLOOR,
            obs_noise=float(softplus_values(self.raw_obs_noise.value[index])) + POSITIVE_FLOOR,
            init_scale=float(softplus_values(self.raw_init_scale.value[index])) + POSITIVE_FLOOR,
        )

    def parameters(self) -> list[Parameter]:
        return self._raws()


# ---------------------------------------------------------------------------
# Gaussian process with RBF kernel on normalized time


@dataclass
class GpParams:
    """Tape-recorded RBF kernel and noise parameters (all > 0)."""

    lengthscale: Var
    amplitude: Var
    obs_noise: Var

    @classmethod
    def from_values(cls, tape: Tape, lengthscale, amplitude, obs_noise) -> "GpParams":
        return cls(tape.const(lengthscale), tape.const(amplitude), tape.const(obs_noise))


@dataclass
class GpValues:
    lengthscale: float
    amplitude: float
    obs_noise: float


def normalized_times(train_length: int, offset: int = 0, count: int | None = None) -> np.ndarray:
    """Scalar kernel inputs: integer steps scaled so the training span is
    [0, 1]; future steps continue past 1 with the same unit."""
    count = train_length if count is None else count
    span = max(train_length - 1, 1)
    return (np.arange(offset, offset + count, dtype=np.float64)) / span


def gp_loglik(residual, times: np.ndarray, params: GpParams) -> Var:
    """Exact marginal log-likelihood N(residual | 0, K + obs_noise^2 I).

    Factorization uses an escalating jitter ladder; failure at the largest
    jitter is an error.
    """
    p = params
    tape = p.lengthscale.tape
    rows, single = _as_rows(residual, tape)
    n, length = rows.value.shape
    times = np.asarray(times, dtype=np.float64)
    if length < 1:
        raise ShapeError("gp likelihood needs at least one observation")
    if times.shape != (length,):
        raise ShapeError(f"expected {length} kernel inputs, got shape {times.shape}")
    sq_dist = tape.const(np.subtract.outer(times, times) ** 2)
    eye = tape.const(np.eye(length))
    base = square(p.amplitude) * exp(-0.5 * sq_dist / square(p.lengthscale))
    last_error = None
    for jitter in JITTER_LADDER:
        gram = base + (square(p.obs_noise) + jitter) * eye
        try:
            half_logdet = 0.5 * logdet_psd(gram)
            solved = solve_psd(gram, transpose(rows))
            break
        except np.linalg.LinAlgError as err:
            last_error = err
    else:
        raise NumericsError(f"kernel factorization failed at jitter {JITTER_LADDER[-1]}: {last_error}")
    quad = (transpose(rows) * solved).sum(axis=0)
    ll = -half_logdet - 0.5 * length * LOG_2PI - 0.5 * quad
    return ll[0] if single else ll


def _rbf(times_a: np.ndarray, times_b: np.ndarray, values: GpValues) -> np.ndarray:
    diff = np.subtract.outer(times_a, times_b)
    return values.amplitude ** 2 * np.exp(-0.5 * diff ** 2 / values.lengthscale ** 2)


def gp_posterior_forecast(residual: np.ndarray, train_times: np.ndarray,
                          test_times: np.ndarray, values: GpValues) -> tuple[np.ndarray, np.ndarray]:
    """Standard noise-free GP conditional at the test inputs given the
    residuals observed with noise: mean K*^T (K + s^2 I)^-1 r and covariance
    K** - K*^T (K + s^2 I)^-1 K*."""
    residual = np.asarray(residual, dtype=np.float64)
    train_times = np.asarray(train_times, dtype=np.float64)
    test_times = np.asarray(test_times, dtype=np.float64)
    gram = _rbf(train_times, train_times, values) + values.obs_noise ** 2 * np.eye(len(train_times))
    last_error = None
    for jitter in JITTER_LADDER:
        try:
            factor = cho_factor(gram + jitter * np.eye(len(train_times)), lower=True)
            break
        except np.linalg.LinAlgError as err:
            last_error = err
    else:
        raise NumericsError(f"kernel factorization failed at jitter {JITTER_LADDER[-1]}: {last_error}")
    cross = _rbf(train_times, test_times, values)
    solved = cho_solve(factor, cross)
    mean = solved.T @ residual
    cov = _rbf(test_times, test_times, values) - cross.T @ solved
    return mean, 0.5 * (cov + cov.T)


def gp_sample_paths(mean: np.ndarray, cov: np.ndarray, obs_noise: float,
                    n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Draw residual paths from the posterior, adding observation noise."""
    horizon = len(mean)
    if horizon < 1:
        raise ForecastError("horizon must be >= 1")
    jittered = cov + POSITIVE_FLOOR * np.eye(horizon)
    try:
        chol = np.linalg.cholesky(jittered)
    except np.linalg.LinAlgError:
        eigvals, eigvecs = np.linalg.eigh(jittered)
        chol = eigvecs @ np.diag(np.sqrt(np.clip(eigvals, 0.0, None)))
    smooth = mean + rng.standard_normal((n_samples, horizon)) @ chol.T
    return smooth + rng.standard_normal((n_samples, horizon)) * obs_noise


class GaussianProcessLocal:
    """Per-series trainable RBF hyperparameters, softplus-positive."""

    INIT = {"lengthscale": 0.2, "amplitude": 1.0, "obs_noise": 0.5}

    def __init__(self, n_series: int, name: str = "local.gp"):
        self.n_series = n_series
        self.raw_lengthscale = Parameter(
            f"{name}.raw_lengthscale", np.full(n_series, _inverse_softplus(self.INIT["lengthscale"])))
        self.raw_amplitude = Parameter(
            f"{name}.raw_amplitude", np.full(n_series, _inverse_softplus(self.INIT["amplitude"])))
        self.raw_obs_noise = Parameter(
            f"{name}.raw_obs_noise", np.full(n_series, _inverse_softplus(self.INIT["obs_noise"])))

    def params_for(self, tape: Tape, index: int) -> GpParams:
        return GpParams(
            lengthscale=softplus(tape.param(self.raw_lengthscale)[index]) + POSITIVE_FLOOR,
            amplitude=softplus(tape.param(self.raw_amplitude)[index]) + POSITIVE_FLOOR,
            obs_noise=softplus(tape.param(self.raw_obs_noise)[index]) + POSITIVE_FLOOR,
        )

    def values_for(self, index: int) -> GpValues:
        return GpValues(
            lengthscale=float(softplus_values(self.raw_lengthscale.value[index])) + POSITIVE_FLOOR,
            amplitude=float(softplus_values(self.raw_amplitude.value[index])) + POSITIVE_FLOOR,
            obs_noise=float(softplus_values(self.raw_obs_noise.value[index])) + POSITIVE_FLOOR,
        )

    def parameters(self) -> list[Parameter]:
        return [self.raw_lengthscale, self.raw_amplitude, self.raw_obs_noise]
