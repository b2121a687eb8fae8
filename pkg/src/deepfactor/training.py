"""End-to-end maximum-likelihood training: minibatches over series, per-series
objectives accumulated on a tape, clipped gradients, Adam updates, plateau
stopping, and self-describing checkpoints that round-trip bit-exactly."""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Adam, Parameter, Tape, square
from .data import TimeSeriesDataset, make_rng
from .errors import ConfigError, TrainingError
from .likelihood import ModelEvaluator, series_objective
from .model import DeepFactorModel, ModelConfig

CHECKPOINT_FORMAT = "deepfactor-checkpoint"
CHECKPOINT_VERSION = 1

# stream-id spaces for the counter-based generators, so shuffling, training
# draws and evaluation draws never collide
_SHUFFLE_STREAM = 1 << 40
_EVAL_STREAM = 1 << 41


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int | None = None  # None: whole panel up to 64 series, else 32
    learning_rate: float = 1e-3
    n_samples: int = 1
    seed: int = 0
    clip_norm: float = 10.0
    patience: int = 50
    threads: int = 1

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.n_samples < 1 or self.patience < 1 or self.threads < 1:
            raise ConfigError("n_samples, patience and threads must be >= 1")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")

    def resolved_batch_size(self, n_series: int) -> int:
        if self.batch_size is not None:
            return min(self.batch_size, n_series)
        return n_series if n_series <= 64 else 32


@dataclass
class TrainReport:
    """Per-epoch traces; lengths equal the number of epochs actually run."""

    objectives: list = field(default_factory=list)  # mean negative objective
    seconds: list = field(default_factory=list)
    parameter_norms: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"objectives": self.objectives, "seconds": self.seconds,
                "parameter_norms": self.parameter_norms}


def global_gradient_norm(params: list[Parameter]) -> float:
    total = 0.0
    for p in params:
        total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


def clip_gradient_norm(params: list[Parameter], max_norm: float) -> float:
    """Scale all grads so the global norm is at most max_norm; returns the
    pre-clip norm."""
    norm = global_gradient_norm(params)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad *= scale
    return norm


def parameter_norm(params: list[Parameter]) -> float:
    return float(np.sqrt(sum(float(np.sum(p.value * p.value)) for p in params)))


def _series_eps(model: DeepFactorModel, length: int, n_samples: int,
                seed: int, epoch: int, index: int) -> np.ndarray | None:
    if model.config.emission == "gaussian":
        return None
    rng = make_rng(seed, stream=epoch * 1_000_003 + index + 1)
    return rng.standard_normal((n_samples, length))


def _check_finite(value: float, epoch: int, item_id: str) -> None:
    if not np.isfinite(value):
        raise TrainingError(f"non-finite objective at epoch {epoch + 1}, series {item_id!r}")


def _guarded_objective(model, dataset, item_id, config, epoch, evaluator=None):
    index = model.series_index(item_id)
    eps = _series_eps(model, dataset.get(item_id).length, config.n_samples,
                      config.seed, epoch, index)
    try:
        obj = series_objective(model, dataset, item_id, n_samples=config.n_samples,
                               eps=eps, evaluator=evaluator)
    except (ValueError, FloatingPointError, np.linalg.LinAlgError) as err:
        raise TrainingError(
            f"non-finite objective at epoch {epoch + 1}, series {item_id!r}: {err}")
    _check_finite(float(obj.value), epoch, item_id)
    return obj


def _batch_backward_shared(model, dataset, ids, config, epoch) -> dict:
    """Whole batch on one tape: the factor/noise unrolls are shared."""
    tape = Tape()
    evaluator = ModelEvaluator(model, tape)
    values = {}
    total = None
    for item_id in ids:
        obj = _guarded_objective(model, dataset, item_id, config, epoch, evaluator)
        values[item_id] = float(obj.value)
        total = obj if total is None else total + obj
    tape.backward(-total)
    return values


def _batch_backward_forked(model, dataset, ids, config, epoch) -> dict:
    """Fork-join: per-series tapes in worker threads; gradients are reduced
    in series order under a single writer so results stay deterministic."""

    def work(item_id):
        tape = Tape()
        evaluator = ModelEvaluator(model, tape)
        obj = _guarded_objective(model, dataset, item_id, config, epoch, evaluator)
        grads = tape.backward(-obj, accumulate=False)
        return float(obj.value), grads

    with ThreadPoolExecutor(max_workers=config.threads) as pool:
        results = list(pool.map(work, ids))
    values = {}
    for item_id, (value, grads) in zip(ids, results):
        values[item_id] = value
        for p, g in grads.items():
            p.grad += g
    return values


def train(model: DeepFactorModel, dataset: TimeSeriesDataset,
          config: TrainConfig) -> TrainReport:
    """Maximize the summed per-series objective with minibatch Adam.

    Deterministic given the config seed; aborts on a non-finite loss naming
    the epoch and series.
    """
    config.validate()
    for item_id in dataset.ids:
        model.series_index(item_id)
    for s in dataset:
        if s.length < 2:
            raise TrainingError(f"series {s.item_id!r} has length {s.length}; need >= 2")

    params = model.parameters()
    optimizer = Adam(params, lr=config.learning_rate)
    batch_size = config.resolved_batch_size(len(dataset))
    report = TrainReport()
    best = np.inf
    stall = 0
    ids = dataset.ids

    for epoch in range(config.epochs):
        started = time.perf_counter()
        order = make_rng(config.seed, stream=_SHUFFLE_STREAM + epoch).permutation(len(ids))
        epoch_values = {}
        for lo in range(0, len(ids), batch_size):
            batch = [ids[k] for k in order[lo:lo + batch_size]]
            optimizer.zero_grad()
            if config.threads > 1:
                values = _batch_backward_forked(model, dataset, batch, config, epoch)
            else:
                values = _batch_backward_shared(model, dataset, batch, config, epoch)
            epoch_values.update(values)
            clip_gradient_norm(params, config.clip_norm)
            optimizer.step()
        mean_negative = -float(np.mean([epoch_values[i] for i in ids]))
        report.objectives.append(mean_negative)
        report.seconds.append(time.perf_counter() - started)
        report.parameter_norms.append(parameter_norm(params))
        if mean_negative < best - 1e-12:
            best = mean_negative
            stall = 0
        else:
            stall += 1
            if stall >= config.patience:
                break
    return report


def evaluate_objective(model: DeepFactorModel, dataset: TimeSeriesDataset,
                       n_samples: int = 100, seed: int = 0, threads: int = 1) -> float:
    """Mean per-series negative objective (the training loss) without touching
    any parameter; per-series draws come from fixed evaluation streams."""
    if len(dataset) == 0:
        raise TrainingError("cannot evaluate an empty dataset")

    def one(item_id: str) -> float:
        index = model.series_index(item_id)
        eps = None
        if model.config.emission != "gaussian":
            rng = make_rng(seed, stream=_EVAL_STREAM + index)
            eps = rng.standard_normal((n_samples, dataset.get(item_id).length))
        obj = series_objective(model, dataset, item_id, n_samples=n_samples, eps=eps)
        return float(obj.value)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            values = list(pool.map(one, dataset.ids))
    else:
        values = [one(item_id) for item_id in dataset.ids]
    return -float(np.mean(values))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: DeepFactorModel, path) -> None:
    """Single JSON file: config plus every parameter with name, shape, and
    row-major values hex-encoded so reloads are bit-exact."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "params": [
            {
                "name": p.name,
                "shape": list(p.value.shape),
                "values": [float(v).hex() for v in p.value.reshape(-1)],
            }
            for p in model.parameters()
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> DeepFactorModel:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    model = DeepFactorModel(ModelConfig.from_dict(doc["config"]))
    saved = {entry["name"]: entry for entry in doc["params"]}
    for p in model.parameters():
        if p.name not in saved:
            raise ConfigError(f"{path}: checkpoint is missing parameter {p.name!r}")
        entry = saved.pop(p.name)
        shape = tuple(entry["shape"])
        if shape != p.value.shape:
            raise ConfigError(
                f"{path}: parameter {p.name!r} has shape {shape}, expected {p.value.shape}")
        values = np.array([float.fromhex(h) for h in entry["values"]])
        p.value[...] = values.reshape(shape)
    if saved:
        raise ConfigError(f"{path}: unknown parameters in checkpoint: {sorted(saved)}")
    return model


# ---------------------------------------------------------------------------
# L2 fitting for the point-forecast structure comparison


def fit_l2(structure, covariates: np.ndarray, targets: np.ndarray, epochs: int,
           learning_rate: float = 1e-2, clip_norm: float = 10.0) -> list:
    """Train a point-forecast structure (predict_many/parameters interface) by
    squared error over an aligned panel; returns the per-epoch mean loss."""
    targets = np.asarray(targets, dtype=np.float64)
    n_series = targets.shape[0]
    params = structure.parameters()
    optimizer = Adam(params, lr=learning_rate)
    losses = []
    for _ in range(epochs):
        optimizer.zero_grad()
        tape = Tape()
        preds = structure.predict_many(tape, covariates, range(n_series))
        loss = None
        for i in range(n_series):
            term = square(preds[i] - tape.const(targets[i])).sum()
            loss = term if loss is None else loss + term
        if not np.isfinite(float(loss.value)):
            raise TrainingError("non-finite squared-error loss")
        tape.backward(loss)
        clip_gradient_norm(params, clip_norm)
        optimizer.step()
        losses.append(float(loss.value) / targets.size)
    return losses
