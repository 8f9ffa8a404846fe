"""Run configuration: per-dataset defaults, TOML loading, validation and hashing.

A config file is TOML with optional top-level keys and ``[train]``,
``[eval]`` and ``[ablation]`` tables, plus optional per-dataset override
tables under ``[datasets.<name>]``::

    dataset = "cloth"
    cache = "cache/cloth"
    out = "runs/cloth"

    [train]
    max_epochs = 50

    [datasets.cloth]
    K = 2
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import tomli

from .errors import ConfigError
from .evaluator import EvalConfig
from .model import AblationConfig, ModelConfig

# Maximum sequence length, batch size, L2 weight and top-K per dataset.
DATASET_DEFAULTS = {
    "tafeng": {"L": 50, "batch_size": 256, "lam": 0.0005, "K": 3},
    "cloth": {"L": 15, "batch_size": 1024, "lam": 0.0001, "K": 3},
    "sports": {"L": 15, "batch_size": 1024, "lam": 0.0001, "K": 2},
}


@dataclass(frozen=True)
class TrainConfig:
    d: int = 50
    L: int = 50
    H: int = 2
    K: int = 3
    lr: float = 0.0001
    dropout: float = 0.5
    batch_size: int = 256
    lam: float = 0.0005
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    table_std: float = 0.01
    tz_offset: int = 0

    def __post_init__(self):
        for name in ("d", "L", "H", "K", "batch_size", "max_epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.lr < 0 or self.lam < 0 or self.patience < 0:
            raise ConfigError("lr, lam and patience must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    @classmethod
    def for_dataset(cls, name: str, **overrides) -> "TrainConfig":
        if name not in DATASET_DEFAULTS:
            raise ConfigError(f"no defaults for dataset {name!r}; known: {', '.join(DATASET_DEFAULTS)}")
        return cls(**{**DATASET_DEFAULTS[name], **overrides})

    def model_config(self, ablation: AblationConfig = AblationConfig()) -> ModelConfig:
        return ModelConfig(d=self.d, L=self.L, H=self.H, K=self.K, dropout=self.dropout, ablation=ablation)


@dataclass(frozen=True)
class RunConfig:
    dataset: str = "tafeng"
    cache: str = ""
    out: str = "runs"
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "cache": self.cache,
            "out": self.out,
            "train": asdict(self.train),
            "eval": asdict(self.eval),
            "ablation": asdict(self.ablation),
        }

    def hash(self) -> str:
        return config_hash(self)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, train=replace(self.train, seed=seed), eval=replace(self.eval, seed=seed))


def _hashed_part(cfg: RunConfig) -> dict:
    # Paths and epoch budgets do not change what a checkpoint means.
    train = asdict(cfg.train)
    train.pop("max_epochs")
    train.pop("patience")
    return {"dataset": cfg.dataset, "train": train, "ablation": asdict(cfg.ablation)}


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(_hashed_part(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _build(cls, values: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


def from_dict(raw: dict) -> RunConfig:
    raw = dict(raw)
    top_keys = {"dataset", "cache", "out", "train", "eval", "ablation", "datasets"}
    unknown = set(raw) - top_keys
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(sorted(unknown))}")
    dataset = raw.get("dataset", "tafeng")
    per_dataset = {k: dict(v) for k, v in raw.get("datasets", {}).items()}
    for name in per_dataset:
        if name not in DATASET_DEFAULTS:
            raise ConfigError(f"unknown dataset section [datasets.{name}]")
    train_values = {**DATASET_DEFAULTS.get(dataset, {}), **per_dataset.get(dataset, {}), **raw.get("train", {})}
    return RunConfig(
        dataset=dataset,
        cache=str(raw.get("cache", "")),
        out=str(raw.get("out", "runs")),
        train=_build(TrainConfig, train_values, "train"),
        eval=_build(EvalConfig, dict(raw.get("eval", {})), "eval"),
        ablation=_build(AblationConfig, dict(raw.get("ablation", {})), "ablation"),
    )


def load(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomli.loads(path.read_text())
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(raw)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    return json.dumps(str(v))


def dumps(cfg: RunConfig) -> str:
    """Fully resolved config as TOML (round-trips through :func:`from_dict`)."""
    d = cfg.to_dict()
    lines = [f"# config hash {cfg.hash()}"]
    for k in ("dataset", "cache", "out"):
        lines.append(f"{k} = {_toml_value(d[k])}")
    for section in ("train", "eval", "ablation"):
        lines.append("")
        lines.append(f"[{section}]")
        for k, v in d[section].items():
            lines.append(f"{k} = {_toml_value(v)}")
    return "\n".join(lines) + "\n"
