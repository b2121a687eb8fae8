"""Model assembly: the configuration record and the composed model holding the
global factor network, per-series loadings, the chosen local stochastic model,
the emission kind, and (for non-Gaussian emissions) a recognition network."""

from __future__ import annotations

from dataclasses import dataclass, field

from .autodiff import Parameter
from .data import COVARIATE_DIM, make_rng
from .errors import ConfigError
from .local_models import GaussianProcessLocal, LevelTrendIssm
from .networks import Embedding, GlobalFactorNetwork, NoiseNetwork, RecognitionNetwork

LOCAL_KINDS = ("rnn", "lds", "gp")
EMISSION_KINDS = ("gaussian", "poisson")
RECOGNITION_KINDS = ("bilstm", "mlp")


@dataclass
class ModelConfig:
    series_ids: list = field(default_factory=list)
    local_model: str = "rnn"
    emission: str = "gaussian"
    n_factors: int = 10
    global_hidden: int = 50
    global_layers: int = 1
    noise_hidden: int = 5
    noise_layers: int = 1
    recognition: str = "bilstm"
    recognition_hidden: int = 32
    covariate_dim: int = COVARIATE_DIM
    init_seed: int = 0

    def validate(self) -> None:
        if not self.series_ids:
            raise ConfigError("model needs at least one series id")
        if len(set(self.series_ids)) != len(self.series_ids):
            raise ConfigError("duplicate series ids in model config")
        if self.local_model not in LOCAL_KINDS:
            raise ConfigError(f"local_model must be one of {LOCAL_KINDS}, got {self.local_model!r}")
        if self.emission not in EMISSION_KINDS:
            raise ConfigError(f"emission must be one of {EMISSION_KINDS}, got {self.emission!r}")
        if self.recognition not in RECOGNITION_KINDS:
            raise ConfigError(f"recognition must be one of {RECOGNITION_KINDS}, got {self.recognition!r}")
        if self.n_factors < 0:
            raise ConfigError("n_factors must be >= 0 (0 disables the global part)")
        for name in ("global_hidden", "global_layers", "noise_hidden", "noise_layers",
                     "recognition_hidden", "covariate_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        return {
            "series_ids": list(self.series_ids),
            "local_model": self.local_model,
            "emission": self.emission,
            "n_factors": self.n_factors,
            "global_hidden": self.global_hidden,
            "global_layers": self.global_layers,
            "noise_hidden": self.noise_hidden,
            "noise_layers": self.noise_layers,
            "recognition": self.recognition,
            "recognition_hidden": self.recognition_hidden,
            "covariate_dim": self.covariate_dim,
            "init_seed": self.init_seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


class DeepFactorModel:
    """Shared deterministic factors plus a per-series stochastic local model.

    With ``n_factors == 0`` the global part is absent and the model reduces to
    the purely local variant (useful for studying the recognition networks).
    """

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        self._index = {sid: i for i, sid in enumerate(config.series_ids)}
        n = len(config.series_ids)
        rng = make_rng(config.init_seed, stream=7)

        if config.n_factors > 0:
            self.global_net = GlobalFactorNetwork(
                config.covariate_dim, config.n_factors, config.global_hidden,
                config.global_layers, rng)
            self.embeddings = Embedding(n, config.n_factors, rng)
        else:
            self.global_net = None
            self.embeddings = None

        if config.local_model == "rnn":
            self.local = NoiseNetwork(config.covariate_dim, config.noise_hidden,
                                      config.noise_layers, rng)
        elif config.local_model == "lds":
            self.local = LevelTrendIssm(n)
        else:
            self.local = GaussianProcessLocal(n)

        if config.emission == "poisson":
            self.recognition = RecognitionNetwork(config.recognition,
                                                  config.recognition_hidden, rng)
        else:
            self.recognition = None

    @property
    def series_ids(self) -> list:
        return self.config.series_ids

    def series_index(self, item_id: str) -> int:
        if item_id not in self._index:
            raise ConfigError(f"series id {item_id!r} unknown to this model")
        return self._index[item_id]

    def parameters(self) -> list[Parameter]:
        params: list[Parameter] = []
        if self.global_net is not None:
            params += self.global_net.parameters()
            params += self.embeddings.parameters()
        params += self.local.parameters()
        if self.recognition is not None:
            params += self.recognition.parameters()
        return params
