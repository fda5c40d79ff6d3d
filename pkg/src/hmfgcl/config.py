"""Training configuration."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError
from .factorization import VARIANTS
from .model import ACTIVATIONS, FUSION_MODES, READOUT_MODES, NoiseSpec, config_hash

# short names accepted in config files, --set flags and sweep grids
ALIASES = {
    "d": "embedding_size",
    "embedding": "embedding_size",
    "layers": "n_layers",
    "L": "n_layers",
    "k": "mf_rank",
    "q": "svd_rank",
    "tau": "temperature",
    "eps": "noise_eps",
    "epsilon": "noise_eps",
    "l1": "noise_uniform",
    "l2": "noise_gaussian",
    "lambda1": "cl_weight",
    "lambda2": "reg_weight",
    "S": "n_negatives",
}


@dataclass(frozen=True)
class TrainConfig:
    embedding_size: int = 64
    n_layers: int = 2
    lr: float = 1e-3
    reg_weight: float = 1e-5
    cl_weight: float = 0.003
    noise_eps: float = 0.1
    noise_uniform: float = 0.2
    noise_gaussian: float = 0.8
    mf_rank: int = 5
    svd_rank: int = 5
    temperature: float = 0.2
    batch_size: int = 2048
    n_negatives: int = 1
    rec_loss: str = "hinge"
    variant: str = "full"
    fusion: str = "hadamard"
    activation: str = "identity"
    readout: str = "sum"
    cl_scope: str = "batch"
    max_epochs: int = 500
    patience: int = 10
    valid_metric: str = "recall@20"
    eval_ks: tuple = (10, 20)
    mf_iters: int = 300
    mf_lr: float = 0.01
    mf_tol: float = 1e-5
    svd_oversample: int = 8
    svd_power_iters: int = 4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "eval_ks", tuple(int(k) for k in self.eval_ks))
        self.validate()

    def validate(self) -> None:
        positive = ("embedding_size", "n_layers", "lr", "temperature", "batch_size", "n_negatives",
                    "max_epochs", "mf_rank", "svd_rank", "mf_iters", "mf_lr")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        for name in ("reg_weight", "cl_weight", "noise_eps", "patience", "mf_tol", "svd_oversample",
                     "svd_power_iters"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)!r}")
        NoiseSpec(self.noise_eps, self.noise_uniform, self.noise_gaussian)
        choices = {
            "rec_loss": ("hinge", "bpr"),
            "variant": VARIANTS,
            "fusion": FUSION_MODES,
            "activation": tuple(ACTIVATIONS),
            "readout": READOUT_MODES,
            "cl_scope": ("batch", "full"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        metric, _, k = self.valid_metric.partition("@")
        if metric not in ("recall", "ndcg") or not k.isdigit() or int(k) < 1:
            raise ConfigError(f"valid_metric must look like 'recall@20', got {self.valid_metric!r}")
        if not self.eval_ks or min(self.eval_ks) < 1:
            raise ConfigError("eval_ks must be a non-empty list of positive integers")

    @property
    def noise(self) -> NoiseSpec:
        return NoiseSpec(self.noise_eps, self.noise_uniform, self.noise_gaussian)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eval_ks"] = list(self.eval_ks)
        return d

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def with_overrides(self, **overrides) -> "TrainConfig":
        return replace(self, **normalize_keys(overrides))

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**normalize_keys(data))

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_dict(load_config_file(path))


def field_types() -> dict:
    return {f.name: type(f.default) for f in fields(TrainConfig)}


def normalize_keys(data: dict) -> dict:
    """Resolve aliases and coerce value types; unknown keys raise ``ConfigError``."""
    types = field_types()
    out = {}
    for key, value in data.items():
        name = ALIASES.get(key, key)
        if name not in types:
            raise ConfigError(f"unknown config key {key!r}")
        out[name] = coerce(name, value)
    return out


def coerce(name: str, value):
    kind = field_types()[name]
    try:
        if kind is tuple:
            if isinstance(value, str):
                value = [v for v in value.split(",") if v.strip()]
            return tuple(int(v) for v in value)
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(f"expected an integer, got {value}")
            return int(value)
        if kind is float:
            return float(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {name}: {value!r} ({exc})") from exc


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a flat JSON object")
    return data


def parse_assignments(items) -> dict:
    """``["tau=0.5", "k=20"]`` -> ``{"tau": "0.5", "k": "20"}``."""
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"expected key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def resolve(path=None, assignments=(), seed=None) -> tuple[TrainConfig, dict]:
    """Built-in defaults, then the config file, then flags; also returns the source of each key."""
    values, sources = {}, {}
    if path is not None:
        for k, v in normalize_keys(load_config_file(path)).items():
            values[k], sources[k] = v, "file"
    for k, v in normalize_keys(parse_assignments(assignments)).items():
        values[k], sources[k] = v, "flag"
    if seed is not None:
        values["seed"], sources["seed"] = int(seed), "flag"
    return TrainConfig(**values), sources
