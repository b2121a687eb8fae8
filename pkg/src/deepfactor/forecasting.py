"""Sampling the joint predictive distribution over a forecast horizon.

The fixed effect is extrapolated by unrolling the global network over the
training and future covariates from its zero initial state; the local part is
sampled per series (fresh scaled noise, ancestral state-space sampling from
the filtered belief, or the GP posterior); the emission is applied per sample.
Horizons longer than the training series are fine: nothing constrains the
unroll length.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime

import numpy as np

from .autodiff import Tape, softplus_values
from .data import TimeSeriesDataset, make_rng
from .errors import ForecastError
from .likelihood import ModelEvaluator
from .local_models import (
    GaussianProcessLocal,
    LevelTrendIssm,
    NoiseNetwork,
    gp_posterior_forecast,
    gp_sample_paths,
    kalman_filter,
    kalman_forecast,
    normalized_times,
)
from .model import DeepFactorModel

DEFAULT_QUANTILE_LEVELS = (0.1, 0.5, 0.9)
_FORECAST_STREAM = 1 << 42


@dataclass
class ForecastResult:
    item_id: str
    horizon: int
    timestamps: list[datetime]
    samples: np.ndarray          # (n_samples, horizon)
    quantiles: dict              # level -> (horizon,) path, monotone in level
    mean: np.ndarray


def forecast(model: DeepFactorModel, dataset: TimeSeriesDataset, item_id: str,
             horizon: int, n_samples: int = 200,
             quantile_levels=DEFAULT_QUANTILE_LEVELS, seed: int = 0,
             future_covariates: np.ndarray | None = None) -> ForecastResult:
    """Sample paths for one series over `horizon` future steps.

    Future covariates default to the calendar continuation of the series;
    pass them explicitly to override.
    """
    if horizon < 1:
        raise ForecastError(f"horizon must be >= 1, got {horizon}")
    if n_samples < 1:
        raise ForecastError(f"n_samples must be >= 1, got {n_samples}")
    series = dataset.get(item_id)
    index = model.series_index(item_id)
    length = series.length
    if future_covariates is None:
        future_covariates = series.future_covariates(horizon)
    future_covariates = np.asarray(future_covariates, dtype=np.float64)
    if future_covariates.shape != (horizon, model.config.covariate_dim):
        raise ForecastError(
            f"missing future covariates: need shape ({horizon}, {model.config.covariate_dim}), "
            f"got {future_covariates.shape}")
    full_covariates = np.vstack([series.covariates, future_covariates])

    tape = Tape()
    if model.global_net is not None:
        factor_paths = model.global_net.unroll(tape, full_covariates).value
        loading = model.embeddings.table.value[index]
        fixed = factor_paths @ loading
    else:
        fixed = np.zeros(length + horizon)
    residual_train = series.targets - fixed[:length]

    rng = make_rng(seed, stream=_FORECAST_STREAM + index)
    local = model.local
    if isinstance(local, NoiseNetwork):
        scales = local.unroll(tape, full_covariates).value
        local_paths = rng.standard_normal((n_samples, horizon)) * scales[length:]
    elif isinstance(local, LevelTrendIssm):
        params = local.params_for(tape, index)
        _, belief = kalman_filter(residual_train, params)
        local_paths = kalman_forecast(belief.mean_values()[0], belief.cov_values(),
                                      local.values_for(index), horizon, n_samples, rng)
    else:
        assert isinstance(local, GaussianProcessLocal)
        values = local.values_for(index)
        train_times = normalized_times(length)
        test_times = normalized_times(length, offset=length, count=horizon)
        post_mean, post_cov = gp_posterior_forecast(residual_train, train_times,
                                                    test_times, values)
        local_paths = gp_sample_paths(post_mean, post_cov, values.obs_noise,
                                      n_samples, rng)

    latent = fixed[length:] + local_paths
    if model.config.emission == "poisson":
        samples = rng.poisson(softplus_values(latent)).astype(np.float64)
    else:
        samples = latent
    levels = tuple(sorted(quantile_levels))
    quantiles = {q: np.quantile(samples, q, axis=0) for q in levels}
    return ForecastResult(
        item_id=item_id,
        horizon=horizon,
        timestamps=series.future_timestamps(horizon),
        samples=samples,
        quantiles=quantiles,
        mean=samples.mean(axis=0),
    )


def forecast_all(model: DeepFactorModel, dataset: TimeSeriesDataset, horizon: int,
                 n_samples: int = 200, quantile_levels=DEFAULT_QUANTILE_LEVELS,
                 seed: int = 0, threads: int = 1) -> list[ForecastResult]:
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(
                lambda sid: forecast(model, dataset, sid, horizon, n_samples,
                                     quantile_levels, seed),
                dataset.ids))
    return [forecast(model, dataset, sid, horizon, n_samples, quantile_levels, seed)
            for sid in dataset.ids]


# ---------------------------------------------------------------------------
# forecast CSV schema


FORECAST_HEADER = ["item_id", "step", "timestamp", "mean", "p10", "p50", "p90"]


def write_forecast_csv(results: list[ForecastResult], path) -> None:
    """One row per (series, step): mean and the 10/50/90 percent quantiles,
    6 significant digits."""
    import csv

    for r in results:
        for level in (0.1, 0.5, 0.9):
            if level not in r.quantiles:
                raise ForecastError(f"forecast for {r.item_id!r} lacks the {level} quantile")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(FORECAST_HEADER)
        for r in results:
            for t in range(r.horizon):
                writer.writerow([
                    r.item_id,
                    t + 1,
                    r.timestamps[t].isoformat(),
                    format(r.mean[t], ".6g"),
                    format(r.quantiles[0.1][t], ".6g"),
                    format(r.quantiles[0.5][t], ".6g"),
                    format(r.quantiles[0.9][t], ".6g"),
                ])


def read_forecast_csv(path) -> dict:
    """{(item_id, step): {"timestamp", "mean", "p10", "p50", "p90"}}"""
    import csv

    from .errors import EvalError

    rows = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != FORECAST_HEADER:
            raise EvalError(f"{path}: expected header {','.join(FORECAST_HEADER)!r}")
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(FORECAST_HEADER):
                raise EvalError(f"{path}: line {line_no}: expected {len(FORECAST_HEADER)} fields")
            item_id, step, ts, mean, p10, p50, p90 = row
            key = (item_id, int(step))
            if key in rows:
                raise EvalError(f"{path}: line {line_no}: duplicate key {key}")
            rows[key] = {
                "timestamp": ts,
                "mean": float(mean),
                "p10": float(p10),
                "p50": float(p50),
                "p90": float(p90),
            }
    if not rows:
        raise EvalError(f"{path}: no forecast rows")
    return rows
