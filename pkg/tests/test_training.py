import numpy as np
import pytest

from deepfactor.autodiff import Parameter
from deepfactor.data import make_rng
from deepfactor.errors import ConfigError, TrainingError
from deepfactor.likelihood import marginal_loglik
from deepfactor.networks import DeepFactorPoint
from deepfactor.training import (
    TrainConfig,
    clip_gradient_norm,
    evaluate_objective,
    fit_l2,
    load_checkpoint,
    save_checkpoint,
    train,
)

from helpers import dataset_from_rows, tiny_model


def _constant_dataset():
    return dataset_from_rows([np.full(12, 5.0)])


def test_train_descends_on_constant_series():
    ds = _constant_dataset()
    model = tiny_model(ds, local="rnn", n_factors=1, seed=0)
    report = train(model, ds, TrainConfig(epochs=200, learning_rate=1e-2, seed=0, patience=200))
    assert report.objectives[-1] < report.objectives[0]


def test_train_zero_epochs_no_change():
    ds = _constant_dataset()
    model = tiny_model(ds, seed=1)
    before = [p.value.copy() for p in model.parameters()]
    report = train(model, ds, TrainConfig(epochs=0))
    assert report.objectives == [] and report.seconds == []
    for p, old in zip(model.parameters(), before):
        assert np.array_equal(p.value, old)


def test_train_deterministic_given_seed():
    rng = make_rng(2)
    rows = rng.normal(size=(3, 10))
    cfg = TrainConfig(epochs=5, learning_rate=1e-2, seed=7)

    def run():
        ds = dataset_from_rows(rows)
        model = tiny_model(ds, local="lds", emission="poisson", n_factors=1, seed=3)
        # poisson emission needs counts
        counts = dataset_from_rows(np.round(np.abs(rows) * 3))
        return train(model, counts, cfg).objectives

    a, b = run(), run()
    assert a == b  # bitwise identical traces


def test_train_rejects_short_series_and_unknown_ids():
    ds = dataset_from_rows([[1.0]])
    model = tiny_model(ds)
    with pytest.raises(TrainingError, match="length"):
        train(model, ds, TrainConfig(epochs=1))
    other = dataset_from_rows([[1.0, 2.0], [0.0, 1.0]])
    model2 = tiny_model(dataset_from_rows([[1.0, 2.0]]))
    with pytest.raises(ConfigError, match="unknown"):
        train(model2, other, TrainConfig(epochs=1))


def test_train_aborts_on_nonfinite_loss():
    ds = _constant_dataset()
    model = tiny_model(ds, local="gp", n_factors=1, seed=4)
    model.embeddings.table.value[...] = np.inf
    with pytest.raises(TrainingError, match="epoch 1.*s0"):
        train(model, ds, TrainConfig(epochs=1))


def test_evaluate_objective_additive_and_order_invariant():
    rng = make_rng(5)
    rows = rng.normal(size=(4, 8))
    ds = dataset_from_rows(rows)
    model = tiny_model(ds, local="rnn", n_factors=2, seed=6)
    mean_loss = evaluate_objective(model, ds)
    total = sum(float(marginal_loglik(model, ds, sid).value) for sid in ds.ids)
    assert mean_loss * len(ds) == pytest.approx(-total, abs=1e-10)

    reordered = dataset_from_rows(rows)
    reordered.series = reordered.series[::-1]
    assert evaluate_objective(model, reordered) == pytest.approx(mean_loss, abs=1e-12)


def test_evaluate_objective_empty_dataset_errors():
    ds = dataset_from_rows([[1.0, 2.0]])
    model = tiny_model(ds)
    ds.series = []
    ds._index = {}
    with pytest.raises(TrainingError):
        evaluate_objective(model, ds)


def test_evaluate_improves_after_training():
    rng = make_rng(7)
    base = np.sin(np.linspace(0, 4 * np.pi, 16))
    rows = np.stack([2.0 * base + rng.normal(0, 0.1, 16) for _ in range(3)])
    ds = dataset_from_rows(rows)
    model = tiny_model(ds, local="rnn", n_factors=1, seed=8)
    before = evaluate_objective(model, ds)
    train(model, ds, TrainConfig(epochs=150, learning_rate=1e-2, seed=8, patience=150))
    assert evaluate_objective(model, ds) < before


def test_clip_gradient_norm():
    params = [Parameter("a", np.full(4, 3.0)), Parameter("b", np.full(2, -1.0))]
    for p in params:
        p.grad[...] = p.value
    norm = clip_gradient_norm(params, max_norm=1.0)
    assert norm == pytest.approx(np.sqrt(4 * 9.0 + 2 * 1.0))
    clipped = np.sqrt(sum(float(np.sum(p.grad ** 2)) for p in params))
    assert clipped <= 1.0 + 1e-12


def test_parallel_matches_sequential_objective():
    rng = make_rng(9)
    rows = np.round(np.abs(rng.normal(size=(4, 7)) * 2))
    ds = dataset_from_rows(rows)

    def run(threads):
        model = tiny_model(ds, local="rnn", emission="poisson", n_factors=1, seed=10)
        cfg = TrainConfig(epochs=3, learning_rate=1e-2, seed=11, threads=threads)
        report = train(model, ds, cfg)
        return report.objectives, [p.value.copy() for p in model.parameters()]

    seq_obj, seq_params = run(1)
    par_obj, par_params = run(3)
    np.testing.assert_allclose(par_obj, seq_obj, atol=1e-9)
    for a, b in zip(seq_params, par_params):
        np.testing.assert_allclose(a, b, atol=1e-9)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    ds = dataset_from_rows(make_rng(12).normal(size=(2, 6)))
    model = tiny_model(ds, local="gp", n_factors=2, seed=13)
    train(model, ds, TrainConfig(epochs=2, seed=13))
    path = tmp_path / "model.json"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.config.to_dict() == model.config.to_dict()
    for a, b in zip(model.parameters(), loaded.parameters()):
        assert a.name == b.name
        assert np.array_equal(a.value, b.value)


def test_checkpoint_rejects_foreign_files(tmp_path):
    path = tmp_path / "nope.json"
    path.write_text('{"format": "something-else"}')
    with pytest.raises(ConfigError):
        load_checkpoint(path)


def test_fit_l2_decreases_loss():
    rng = make_rng(14)
    from deepfactor.data import time_features
    from deepfactor.synthetic import DEFAULT_START

    cov = time_features(DEFAULT_START, 24)
    targets = np.stack([np.sin(np.arange(24) / 3.0) * (i + 1) for i in range(3)])
    structure = DeepFactorPoint(3, 4, 2, 4, 1, rng)
    losses = fit_l2(structure, cov, targets, epochs=60, learning_rate=1e-2)
    assert losses[-1] < losses[0]
