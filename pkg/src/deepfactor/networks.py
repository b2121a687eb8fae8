"""Neural building blocks recorded on the autodiff tape: LSTM cells and
stacks, the shared global-factor network, the positive noise network,
per-series embeddings, recognition networks for approximate posteriors, and
the RNN point-forecast baseline used in structure comparisons."""

from __future__ import annotations

import numpy as np

from .autodiff import (
    Parameter,
    Tape,
    Var,
    clip,
    concat,
    exp,
    log,
    matmul,
    outer,
    sigmoid,
    softplus,
    square,
    stack,
    tanh,
    transpose,
)
from .errors import ShapeError

LOG_STD_MIN = -20.0
LOG_STD_MAX = 5.0
LOG_2PI = float(np.log(2.0 * np.pi))


class Linear:
    """Affine map; applies to a vector or rowwise to a matrix."""

    def __init__(self, name: str, in_dim: int, out_dim: int, rng):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = Parameter.uniform(f"{name}.weight", (out_dim, in_dim), in_dim, rng)
        self.bias = Parameter.uniform(f"{name}.bias", (out_dim,), in_dim, rng)

    def __call__(self, tape: Tape, x: Var) -> Var:
        w = tape.param(self.weight)
        b = tape.param(self.bias)
        if x.value.ndim == 1:
            return matmul(w, x) + b
        return matmul(x, transpose(w)) + b

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class LstmCell:
    """Single LSTM cell; the four gate blocks (input, forget, candidate,
    output) are stored stacked as one (4H, D+H) weight and one (4H,) bias."""

    def __init__(self, name: str, input_dim: int, hidden_dim: int, rng):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        fan_in = input_dim + hidden_dim
        self.weight = Parameter.uniform(f"{name}.weight", (4 * hidden_dim, fan_in), fan_in, rng)
        self.bias = Parameter.uniform(f"{name}.bias", (4 * hidden_dim,), fan_in, rng)

    def gate_blocks(self) -> dict:
        """Views of the stacked weight, one (H, D+H) block per gate."""
        h = self.hidden_dim
        names = ("input", "forget", "candidate", "output")
        return {n: self.weight.value[i * h:(i + 1) * h] for i, n in enumerate(names)}

    def step(self, tape: Tape, x: Var, h_prev: Var, c_prev: Var) -> tuple[Var, Var]:
        """Standard LSTM recurrence with sigmoid gates and tanh nonlinearity."""
        if x.value.shape != (self.input_dim,):
            raise ShapeError(f"lstm step expects input ({self.input_dim},), got {x.value.shape}")
        if h_prev.value.shape != (self.hidden_dim,) or c_prev.value.shape != (self.hidden_dim,):
            raise ShapeError(
                f"lstm state must have shape ({self.hidden_dim},), got "
                f"{h_prev.value.shape} and {c_prev.value.shape}"
            )
        hd = self.hidden_dim
        gates = matmul(tape.param(self.weight), concat([x, h_prev])) + tape.param(self.bias)
        i_gate = sigmoid(gates[0:hd])
        f_gate = sigmoid(gates[hd:2 * hd])
        candidate = tanh(gates[2 * hd:3 * hd])
        o_gate = sigmoid(gates[3 * hd:4 * hd])
        c_new = f_gate * c_prev + i_gate * candidate
        h_new = o_gate * tanh(c_new)
        return h_new, c_new

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class LstmStack:
    """One or more LSTM cells unrolled layer over layer from zero state."""

    def __init__(self, name: str, input_dim: int, hidden_dim: int, layers: int, rng):
        self.hidden_dim = hidden_dim
        self.cells = [
            LstmCell(f"{name}.cell{i}", input_dim if i == 0 else hidden_dim, hidden_dim, rng)
            for i in range(layers)
        ]

    def initial_state(self, tape: Tape) -> list[tuple[Var, Var]]:
        zero = np.zeros(self.hidden_dim)
        return [(tape.const(zero), tape.const(zero)) for _ in self.cells]

    def step(self, tape: Tape, x: Var, state: list) -> tuple[Var, list]:
        out = x
        new_state = []
        for cell, (h, c) in zip(self.cells, state):
            h, c = cell.step(tape, out, h, c)
            new_state.append((h, c))
            out = h
        return out, new_state

    def outputs(self, tape: Tape, inputs: list[Var]) -> list[Var]:
        state = self.initial_state(tape)
        outs = []
        for x in inputs:
            out, state = self.step(tape, x, state)
            outs.append(out)
        return outs

    def parameters(self) -> list[Parameter]:
        return [p for cell in self.cells for p in cell.parameters()]


class GlobalFactorNetwork:
    """LSTM stack plus linear readout producing the K shared factor paths from
    the time covariates; deterministic given parameters and inputs."""

    def __init__(self, covariate_dim: int, n_factors: int, hidden_dim: int, layers: int, rng,
                 name: str = "global"):
        self.n_factors = n_factors
        self.stack = LstmStack(f"{name}.lstm", covariate_dim, hidden_dim, layers, rng)
        self.readout = Linear(f"{name}.readout", hidden_dim, n_factors, rng)

    def unroll(self, tape: Tape, covariates: np.ndarray) -> Var:
        """Factor matrix with one (K,) row per time step; shape (T, K)."""
        steps = [tape.const(covariates[t]) for t in range(len(covariates))]
        return stack([self.readout(tape, h) for h in self.stack.outputs(tape, steps)])

    def parameters(self) -> list[Parameter]:
        return self.stack.parameters() + self.readout.parameters()


def global_factors(net: GlobalFactorNetwork, covariates: np.ndarray, tape: Tape | None = None) -> Var:
    tape = tape or Tape()
    return net.unroll(tape, covariates)


def fixed_effect(loading: Var, factors: Var) -> Var:
    """Per-series deterministic path: the loading vector applied to every
    factor row, f_t = sum_k loading_k * factors[t, k]."""
    if factors.value.ndim != 2 or loading.value.shape != (factors.value.shape[1],):
        raise ShapeError(
            f"fixed effect needs (T, K) factors and (K,) loading, got "
            f"{factors.value.shape} and {loading.value.shape}"
        )
    return matmul(factors, loading)


class NoiseNetwork:
    """LSTM stack with a softplus scalar readout: a strictly positive noise
    scale per time step, driven by the shared time covariates."""

    def __init__(self, covariate_dim: int, hidden_dim: int, layers: int, rng, name: str = "noise"):
        self.stack = LstmStack(f"{name}.lstm", covariate_dim, hidden_dim, layers, rng)
        self.readout = Linear(f"{name}.readout", hidden_dim, 1, rng)

    def unroll(self, tape: Tape, covariates: np.ndarray) -> Var:
        """Positive scale vector of shape (T,)."""
        steps = [tape.const(covariates[t]) for t in range(len(covariates))]
        raw = concat([self.readout(tape, h) for h in self.stack.outputs(tape, steps)])
        return softplus(raw) + 1e-8

    def parameters(self) -> list[Parameter]:
        return self.stack.parameters() + self.readout.parameters()


class Embedding:
    """One trainable loading vector per known series id."""

    def __init__(self, n_series: int, n_factors: int, rng, name: str = "embeddings"):
        self.n_series = n_series
        self.n_factors = n_factors
        self.table = Parameter.uniform(name, (n_series, n_factors), n_factors, rng)

    def lookup(self, tape: Tape, index: int) -> Var:
        if not 0 <= index < self.n_series:
            raise ShapeError(f"series index {index} out of range [0, {self.n_series})")
        return tape.param(self.table)[index]

    def parameters(self) -> list[Parameter]:
        return [self.table]


class GaussianPosterior:
    """Per-step diagonal Gaussian over the latent function, with a
    reparameterized sampler so gradients reach the recognition parameters."""

    def __init__(self, mu: Var, sigma: Var):
        self.mu = mu
        self.sigma = sigma

    def sample(self, eps: np.ndarray) -> Var:
        """mu + sigma * eps for fixed standard-normal draws; eps may be (T,)
        for one path or (L, T) for a batch of paths."""
        tape = self.mu.tape
        return self.mu + self.sigma * tape.const(eps)

    def log_density(self, u: Var) -> Var:
        """log q(u); scalar for a (T,) input, per-row vector for (L, T)."""
        length = self.mu.value.shape[0]
        z = (u - self.mu) / self.sigma
        per_step = log(self.sigma) + 0.5 * square(z)
        axis = 1 if u.value.ndim == 2 else None
        return -0.5 * length * LOG_2PI - per_step.sum(axis=axis)


class RecognitionNetwork:
    """Maps an observed series to a per-step diagonal Gaussian posterior.

    kind "bilstm": forward and backward LSTM passes, so each step's posterior
    sees the whole series. kind "mlp": a pointwise two-layer network, applied
    independently per step (no temporal context).
    """

    def __init__(self, kind: str, hidden_dim: int, rng, name: str = "recognition"):
        if kind not in ("bilstm", "mlp"):
            raise ShapeError(f"unknown recognition kind {kind!r}")
        self.kind = kind
        self.hidden_dim = hidden_dim
        if kind == "bilstm":
            self.forward = LstmStack(f"{name}.fwd", 1, hidden_dim, 1, rng)
            self.backward = LstmStack(f"{name}.bwd", 1, hidden_dim, 1, rng)
            self.readout = Linear(f"{name}.readout", 2 * hidden_dim, 2, rng)
        else:
            self.in_weight = Parameter.uniform(f"{name}.in.weight", (hidden_dim,), 1, rng)
            self.in_bias = Parameter.uniform(f"{name}.in.bias", (hidden_dim,), 1, rng)
            self.hidden = Linear(f"{name}.hidden", hidden_dim, hidden_dim, rng)
            self.readout = Linear(f"{name}.readout", hidden_dim, 2, rng)

    def recognize(self, tape: Tape, observations: np.ndarray) -> GaussianPosterior:
        z = np.asarray(observations, dtype=np.float64)
        if z.ndim != 1 or len(z) < 1:
            raise ShapeError(f"recognition expects a (T,) series, got shape {z.shape}")
        if self.kind == "bilstm":
            steps = [tape.const(z[t:t + 1]) for t in range(len(z))]
            fwd = self.forward.outputs(tape, steps)
            bwd = self.backward.outputs(tape, steps[::-1])[::-1]
            rows = [self.readout(tape, concat([f, b])) for f, b in zip(fwd, bwd)]
            mu = concat([r[0] for r in rows])
            raw_log_std = concat([r[1] for r in rows])
        else:
            hidden = tanh(outer(tape.const(z), tape.param(self.in_weight)) + tape.param(self.in_bias))
            hidden = tanh(self.hidden(tape, hidden))
            out = self.readout(tape, hidden)
            mu = out[:, 0]
            raw_log_std = out[:, 1]
        log_std = clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)
        return GaussianPosterior(mu, exp(log_std))

    def parameters(self) -> list[Parameter]:
        if self.kind == "bilstm":
            return self.forward.parameters() + self.backward.parameters() + self.readout.parameters()
        return [self.in_weight, self.in_bias] + self.hidden.parameters() + self.readout.parameters()


class RnnForecaster:
    """Point-forecast baseline: the per-series loading is concatenated onto
    the time covariates and fed through an LSTM with a scalar readout, so the
    network output is a function of covariates only (never of past targets)."""

    def __init__(self, n_series: int, covariate_dim: int, embed_dim: int, hidden_dim: int,
                 layers: int, rng, name: str = "rnn_forecaster"):
        self.embedding = Embedding(n_series, embed_dim, rng, name=f"{name}.embeddings")
        self.stack = LstmStack(f"{name}.lstm", covariate_dim + embed_dim, hidden_dim, layers, rng)
        self.readout = Linear(f"{name}.readout", hidden_dim, 1, rng)

    def predict(self, tape: Tape, series_index: int, covariates: np.ndarray) -> Var:
        """Deterministic per-step point forecast of shape (T,)."""
        loading = self.embedding.lookup(tape, series_index)
        steps = [concat([tape.const(covariates[t]), loading]) for t in range(len(covariates))]
        return concat([self.readout(tape, h) for h in self.stack.outputs(tape, steps)])

    def predict_many(self, tape: Tape, covariates: np.ndarray, indices) -> dict:
        return {i: self.predict(tape, i, covariates) for i in indices}

    def parameters(self) -> list[Parameter]:
        return self.embedding.parameters() + self.stack.parameters() + self.readout.parameters()


class DeepFactorPoint:
    """Point-forecast variant of the factor structure: shared factor paths
    combined per series by a trainable loading, no stochastic part. Used for
    L2-objective structure comparisons against :class:`RnnForecaster`."""

    def __init__(self, n_series: int, covariate_dim: int, n_factors: int, hidden_dim: int,
                 layers: int, rng, name: str = "factor_point"):
        self.net = GlobalFactorNetwork(covariate_dim, n_factors, hidden_dim, layers, rng,
                                       name=f"{name}.global")
        self.embedding = Embedding(n_series, n_factors, rng, name=f"{name}.embeddings")

    def predict_many(self, tape: Tape, covariates: np.ndarray, indices) -> dict:
        factors = self.net.unroll(tape, covariates)
        return {i: fixed_effect(self.embedding.lookup(tape, i), factors) for i in indices}

    def predict(self, tape: Tape, series_index: int, covariates: np.ndarray) -> Var:
        return self.predict_many(tape, covariates, [series_index])[series_index]

    def parameters(self) -> list[Parameter]:
        return self.net.parameters() + self.embedding.parameters()


def parameter_count(params: list[Parameter]) -> int:
    return int(sum(p.value.size for p in params))


def _lstm_stack_count(input_dim: int, hidden_dim: int, layers: int) -> int:
    total = 0
    for i in range(layers):
        d = input_dim if i == 0 else hidden_dim
        total += 4 * hidden_dim * (d + hidden_dim) + 4 * hidden_dim
    return total


def matched_forecaster_hidden(n_series: int, covariate_dim: int, n_factors: int,
                              global_hidden: int, layers: int = 1) -> int:
    """Hidden size for RnnForecaster that brings its parameter count closest
    to the factor structure's (shared LSTM + K readout + embeddings), keeping
    the two structures comparable."""
    target = (_lstm_stack_count(covariate_dim, global_hidden, layers)
              + global_hidden * n_factors + n_factors
              + n_series * n_factors)
    best, best_gap = 1, float("inf")
    for h in range(1, 4 * global_hidden + 8):
        count = (_lstm_stack_count(covariate_dim + n_factors, h, layers)
                 + h + 1
                 + n_series * n_factors)
        gap = abs(count - target)
        if gap < best_gap:
            best, best_gap = h, gap
    return best
