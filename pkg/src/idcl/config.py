"""Run configuration: model sizes, loss weights, optimization settings.

Config files are flat key-value text, one ``key = value`` per line with
``#`` comments. Recognized keys and the hyperparameter grids searched by
default are listed in :data:`CONFIG_KEYS` and :data:`SEARCH_GRIDS`.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, fields, replace


class ConfigError(ValueError):
    pass


VARIANTS = ("idcl", "lightgcn", "no-icl", "no-cr")

# Default random-search grids. delta_d is an inclusive range, the rest are
# discrete candidate sets.
SEARCH_GRIDS = {
    "model.k": (6, 8, 10, 12, 14, 16),
    "model.delta_d": (20, 40),
    "icl.tau": (0.1, 0.2, 0.5),
    "cr.epsilon": (0.1, 0.5, 1.0),
    "train.lambda1": (0.01, 0.03, 0.05, 0.1, 0.5),
    "train.lambda2": (0.01, 0.1, 0.3, 1.0),
    "train.lambda3": (1e-6, 1e-5, 1e-4),
}


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run needs besides the data itself.

    ``d`` must equal ``k * delta_d``; ``delta_d`` is derived. ``lambda1``,
    ``lambda2``, ``lambda3`` weight the contrastive, rate-reduction, and
    parameter-norm terms of the total loss.
    """

    d: int = 128
    k: int = 8
    layers: int = 3
    tau: float = 0.5
    epsilon: float = 0.5
    rho: float = 0.1
    lambda1: float = 0.1
    lambda2: float = 0.01
    lambda3: float = 1e-5
    lr: float = 1e-3
    batch_size: int = 2048
    max_epochs: int = 300
    patience: int = 10
    seed: int = 0
    icl_batch: int = 256
    eval_every: int = 1
    early_stop_k: int = 20
    two_layer_heads: bool = False
    column_normalize_bases: bool = False
    # Exclude the positive pair from each subtask denominator instead of the
    # standard NT-Xent form that keeps it.
    strict_eq9: bool = False
    # Use the exact -log E_k[...] objective instead of the expectation-of-logs
    # upper bound.
    exact_log_expectation: bool = False
    stop_grad_pi: bool = False
    stop_grad_confidence: bool = False
    plain_recall_denominator: bool = False
    deterministic: bool = False

    def __post_init__(self):
        if self.d < 1 or self.k < 1:
            raise ConfigError(f"d and k must be positive, got d={self.d} k={self.k}")
        if self.d % self.k != 0:
            raise ConfigError(f"d={self.d} is not divisible by k={self.k}")
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if not 0.0 <= self.rho < 1.0:
            raise ConfigError(f"rho must be in [0, 1), got {self.rho}")
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.icl_batch < 2:
            raise ConfigError(f"icl_batch must be >= 2, got {self.icl_batch}")
        for name in ("max_epochs", "patience", "eval_every", "early_stop_k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @property
    def delta_d(self) -> int:
        return self.d // self.k

    def to_flat_dict(self) -> dict:
        return {key: getattr(self, attr) for key, attr in CONFIG_KEYS.items()}

    @classmethod
    def from_flat_dict(cls, flat: dict) -> "TrainConfig":
        kwargs = {}
        for key, value in flat.items():
            if key not in CONFIG_KEYS:
                raise ConfigError(f"unknown config key: {key!r}")
            kwargs[CONFIG_KEYS[key]] = value
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_flat_dict(parse_config_text(open(path, encoding="utf-8").read()))

    def with_overrides(self, **kwargs) -> "TrainConfig":
        return replace(self, **kwargs)

    def config_hash(self) -> str:
        payload = json.dumps(self.to_flat_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


# config-file key -> TrainConfig attribute
CONFIG_KEYS = {
    "model.d": "d",
    "model.k": "k",
    "model.layers": "layers",
    "model.two_layer_heads": "two_layer_heads",
    "model.column_normalize_bases": "column_normalize_bases",
    "icl.tau": "tau",
    "icl.batch": "icl_batch",
    "icl.strict_eq9": "strict_eq9",
    "icl.exact_log_expectation": "exact_log_expectation",
    "icl.stop_grad_confidence": "stop_grad_confidence",
    "cr.epsilon": "epsilon",
    "cr.stop_grad_pi": "stop_grad_pi",
    "aug.rho": "rho",
    "train.lambda1": "lambda1",
    "train.lambda2": "lambda2",
    "train.lambda3": "lambda3",
    "train.lr": "lr",
    "train.batch_size": "batch_size",
    "train.max_epochs": "max_epochs",
    "train.patience": "patience",
    "train.eval_every": "eval_every",
    "train.seed": "seed",
    "train.deterministic": "deterministic",
    "eval.early_stop_k": "early_stop_k",
    "eval.plain_recall_denominator": "plain_recall_denominator",
}

_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _parse_value(key: str, raw: str):
    attr = CONFIG_KEYS[key]
    kind = _FIELD_TYPES[attr]
    raw = raw.strip()
    if kind == "bool":
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if kind == "int":
        try:
            return int(raw)
        except ValueError as err:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from err
    try:
        return float(raw)
    except ValueError as err:
        raise ConfigError(f"{key}: expected a number, got {raw!r}") from err


def parse_config_text(text: str) -> dict:
    """Parse flat ``key = value`` text into a config dict."""
    flat = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        flat[key] = _parse_value(key, raw)
    return flat


def format_config_text(config: TrainConfig) -> str:
    lines = [f"{key} = {value}" for key, value in config.to_flat_dict().items()]
    return "\n".join(lines) + "\n"


def apply_variant(config: TrainConfig, variant: str) -> TrainConfig:
    """Map a model variant onto the loss weights it disables."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if variant == "no-icl":
        return config.with_overrides(lambda1=0.0)
    if variant == "no-cr":
        return config.with_overrides(lambda2=0.0)
    if variant == "lightgcn":
        return config.with_overrides(lambda1=0.0, lambda2=0.0)
    return config
