"""Deep factor forecasting: a shared deep global-factor component combined
with per-series local stochastic models, trained by exact maximum likelihood
(Gaussian observations) or a structured variational bound (count data)."""

from .autodiff import Adam, Parameter, Tape, Var

__all__ = ["Adam", "Parameter", "Tape", "Var"]
__version__ = "0.1.0"
