"""Exception hierarchy. Every error carries a short machine-readable category
used by the CLI's ``ERROR:<category>:`` diagnostic prefix."""


class DeepFactorError(Exception):
    category = "internal"


class ShapeError(DeepFactorError):
    category = "shape"


class NumericsError(DeepFactorError):
    category = "numerics"


class DataError(DeepFactorError):
    category = "data"


class ConfigError(DeepFactorError):
    category = "config"


class InferenceError(DeepFactorError):
    category = "inference"


class TrainingError(DeepFactorError):
    category = "train"


class ForecastError(DeepFactorError):
    category = "forecast"


class EvalError(DeepFactorError):
    category = "eval"
