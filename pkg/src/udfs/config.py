"""Flat run configuration: every hyperparameter in one place.

Config files are flat TOML (``key = value`` lines); command-line flags
override file values, which override the defaults below.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import tomli

from .encoder import EncoderConfig
from .model import canonical_json, digest
from .proto import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    n_max: int = 256
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    dropout: float = 0.1
    lr: float = 1e-3
    epochs: int = 100
    c_way: int = 10
    k_shot: int = 5
    k_nearest: int = 5
    epsilon: float = 1e-6
    recompute_period: int = 5
    min_weight: float = 0.1
    percentile: float = 95.0
    alpha: float = 0.2
    seed: int = 0

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.d_model, self.n_layers, self.n_heads, self.d_ff, self.dropout, self.n_max)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            lr=self.lr,
            c_way=self.c_way,
            k_shot=self.k_shot,
            k_nearest=self.k_nearest,
            epsilon=self.epsilon,
            recompute_period=self.recompute_period,
            min_weight=self.min_weight,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical(self) -> str:
        return canonical_json(self.to_dict())

    def digest(self) -> str:
        return digest(self.to_dict())

    def with_overrides(self, overrides: dict) -> "RunConfig":
        known = {f.name: f.type for f in fields(self)}
        clean = {}
        for key, value in overrides.items():
            if value is None:
                continue
            if key not in known:
                raise KeyError(f"unknown config key {key!r}")
            target = type(getattr(self, key))
            if target is int and isinstance(value, float) and not value.is_integer():
                raise ValueError(f"{key} must be an integer, got {value}")
            clean[key] = target(value)
        return replace(self, **clean)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        with open(path, "rb") as fh:
            data = tomli.load(fh)
        nested = [k for k, v in data.items() if isinstance(v, dict)]
        if nested:
            raise ValueError(f"config must be flat key = value pairs; found tables {nested}")
        return cls().with_overrides(data)


FIELD_HELP = {
    "n_max": "UDFS sequence capacity (flows kept per trace)",
    "d_model": "encoder width",
    "n_layers": "number of encoder layers",
    "n_heads": "attention heads per layer",
    "d_ff": "feed-forward hidden width",
    "dropout": "dropout inside encoder sublayers (training only)",
    "lr": "Adam learning rate",
    "epochs": "training epochs",
    "c_way": "classes per training episode (capped at the class count)",
    "k_shot": "traces per class per episode",
    "k_nearest": "nearest other prototypes in the inter-class distance",
    "epsilon": "stabiliser in the confusion-weight denominator",
    "recompute_period": "epochs between confusion-weight recomputations",
    "min_weight": "floor on raw confusion weights before normalisation",
    "percentile": "percentile of training distances used as base threshold",
    "alpha": "strength of the confusion-based threshold adjustment",
    "seed": "master random seed",
}
