"""Synthetic panel generators (a rotating two-state linear system projected to
one dimension, and Fourier-basis global factors with per-series loadings) plus
the subspace-distance diagnostic used to score factor recovery."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from datetime import datetime

import numpy as np

from .autodiff import softplus_values
from .data import Series, TimeSeriesDataset, make_rng
from .errors import ConfigError, NumericsError

DEFAULT_START = datetime(2024, 1, 1)  # a Monday, 00:00


@dataclass
class RotatingLdsSpec:
    """Two-dimensional latent state rotated by ``theta`` each step with
    isotropic innovation noise ``alpha``; the first coordinate plus
    observation noise ``sigma`` gives the latent signal."""

    theta: float = 0.1
    alpha: float = 0.1
    sigma: float = 0.1
    length: int = 120
    emission: str = "gaussian"  # gaussian: signal observed directly; poisson: counts
    initial_state: tuple = (1.0, 0.0)

    def validate(self) -> None:
        if not 0.0 < self.theta < np.pi:
            raise ConfigError(f"theta must lie in (0, pi), got {self.theta}")
        if self.alpha < 0 or self.sigma < 0:
            raise ConfigError("alpha and sigma must be nonnegative")
        if self.length < 1:
            raise ConfigError("length must be >= 1")
        if self.emission not in ("gaussian", "poisson"):
            raise ConfigError(f"unknown emission {self.emission!r}")


@dataclass
class FourierFactorsSpec:
    """N series driven by K shared Fourier-basis factors over the span, with
    per-series loadings drawn uniformly from ``coeff_range``."""

    n_factors: int = 2
    n_series: int = 50
    length: int = 200
    orders: list = field(default_factory=list)  # defaults to 1..K
    coeff_range: tuple = (-1.0, 1.0)
    noise: str = "gaussian"  # or "none"
    noise_std: float = 0.1
    emission: str = "gaussian"
    level: float = 0.0  # constant added to the latent signal (useful for counts)

    def validate(self) -> None:
        if self.n_factors < 1 or self.n_series < 1 or self.length < 1:
            raise ConfigError("n_factors, n_series and length must be >= 1")
        orders = self.orders or list(range(1, self.n_factors + 1))
        if len(orders) != self.n_factors or any(o < 1 for o in orders):
            raise ConfigError(f"need {self.n_factors} orders >= 1, got {self.orders}")
        if self.coeff_range[0] >= self.coeff_range[1]:
            raise ConfigError(f"empty coefficient range {self.coeff_range}")
        if self.noise not in ("gaussian", "none"):
            raise ConfigError(f"unknown noise kind {self.noise!r}")
        if self.noise == "gaussian" and self.noise_std < 0:
            raise ConfigError("noise_std must be nonnegative")
        if self.emission not in ("gaussian", "poisson"):
            raise ConfigError(f"unknown emission {self.emission!r}")


def _emit(rng: np.random.Generator, latent: np.ndarray, emission: str) -> np.ndarray:
    if emission == "poisson":
        return rng.poisson(softplus_values(latent)).astype(np.float64)
    return latent.copy()


def generate_rotating_lds(spec: RotatingLdsSpec, seed: int, start: datetime = DEFAULT_START):
    """Returns (dataset with one series, latent signal u, latent states h)."""
    spec.validate()
    rng = make_rng(seed)
    rot = np.array([[np.cos(spec.theta), -np.sin(spec.theta)],
                    [np.sin(spec.theta), np.cos(spec.theta)]])
    h = np.asarray(spec.initial_state, dtype=np.float64)
    states = np.empty((spec.length, 2))
    u = np.empty(spec.length)
    for t in range(spec.length):
        h = rot @ h + rng.normal(0.0, spec.alpha, size=2)
        states[t] = h
        u[t] = h[0] + rng.normal(0.0, spec.sigma)
    z = _emit(rng, u, spec.emission)
    dataset = TimeSeriesDataset([Series.from_targets("series_0", start, z)])
    return dataset, u, states


def fourier_design(length: int, orders: list) -> np.ndarray:
    """(length, K) matrix; column k is an order-orders[k] harmonic over the
    span (sine for odd columns, cosine for even, 1-based)."""
    t = np.arange(length, dtype=np.float64)
    cols = []
    for k, order in enumerate(orders, start=1):
        phase = 2.0 * np.pi * order * t / length
        cols.append(np.sin(phase) if k % 2 == 1 else np.cos(phase))
    return np.column_stack(cols)


def generate_fourier_factors(spec: FourierFactorsSpec, seed: int, start: datetime = DEFAULT_START):
    """Returns (dataset, true factor matrix (T, K), true latent signals (N, T))."""
    spec.validate()
    rng = make_rng(seed)
    orders = spec.orders or list(range(1, spec.n_factors + 1))
    factors = fourier_design(spec.length, orders)
    lo, hi = spec.coeff_range
    all_series, latents = [], np.empty((spec.n_series, spec.length))
    for i in range(spec.n_series):
        w = rng.uniform(lo, hi, size=spec.n_factors)
        u = factors @ w + spec.level
        if spec.noise == "gaussian":
            u = u + rng.normal(0.0, spec.noise_std, size=spec.length)
        latents[i] = u
        z = _emit(rng, u, spec.emission)
        all_series.append(Series.from_targets(f"series_{i}", start, z))
    return TimeSeriesDataset(all_series), factors, latents


def subspace_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Sine of the largest principal angle between the column spans of two
    full-column-rank matrices; 0 for equal spans, 1 for orthogonal ones."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise NumericsError(f"expected matrices of equal shape, got {a.shape} and {b.shape}")
    k = a.shape[1]
    if np.linalg.matrix_rank(a) < k or np.linalg.matrix_rank(b) < k:
        raise NumericsError("subspace_distance needs full column rank inputs")
    qa, _ = np.linalg.qr(a)
    qb, _ = np.linalg.qr(b)
    # singular values of (I - Pa) Qb are the sines of the principal angles;
    # computing them directly stays accurate for nearly equal spans
    residual = qb - qa @ (qa.T @ qb)
    s = np.linalg.svd(residual, compute_uv=False)
    return float(np.clip(s.max(), 0.0, 1.0))


def write_latent_csv(latents: np.ndarray, ids: list, path) -> None:
    """Ground-truth sidecar: one row per (series, step) with the latent signal."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["item_id", "step", "u_true"])
        for item_id, u in zip(ids, np.atleast_2d(latents)):
            for step, value in enumerate(u, start=1):
                writer.writerow([item_id, step, repr(float(value))])


def write_factors_csv(factors: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        k = factors.shape[1]
        writer.writerow(["step"] + [f"factor_{j + 1}" for j in range(k)])
        for step, row in enumerate(factors, start=1):
            writer.writerow([step] + [repr(float(v)) for v in row])


def read_factors_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row[1:]] for row in reader]
    if not rows or len(header) < 2:
        raise NumericsError(f"{path}: no factor columns")
    return np.asarray(rows)
