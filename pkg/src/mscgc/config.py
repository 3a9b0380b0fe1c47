"""Run configuration: flat dotted keys, JSON file plus CLI overrides.

Defaults reproduce the standard training settings exactly (30 epochs, batch
64, AdamW with weight decay 5e-2, backbone/head learning rates 1e-4/5e-4,
cosine annealing to 1e-6, clip norm 1.0, dropout 0.1, kernel set {3, 5}).
Model geometry keys (C, S, P, M) are inherited from a dataset's metadata
unless explicitly set in the file or on the command line.
"""

from __future__ import annotations

import json
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig

DEFAULTS = {
    "model.C": 16,
    "model.S": 10,
    "model.D": 32,
    "model.P": 24,
    "model.M": 4,
    "model.hidden": 512,
    "model.out_dim": 64,
    "model.harmonics": 0,
    "model.provider": "stub_projection",
    "model.provider_trainable": True,
    "model.block": "mcr",
    "model.kan": "kan",
    "model.bn_momentum": 0.1,
    "model.bn_eps": 1e-5,
    "train.epochs": 30,
    "train.batch_size": 64,
    "train.weight_decay": 5e-2,
    "train.lr_backbone": 1e-4,
    "train.lr_head": 5e-4,
    "train.lr_min": 1e-6,
    "train.clip_norm": 1.0,
    "train.dropout": 0.1,
    "train.kernels": [3, 5],
    "train.beta1": 0.9,
    "train.beta2": 0.999,
    "train.adam_eps": 1e-8,
    "train.seed": 0,
    "train.decay_biases": False,
    "train.eval_batch_size": 256,
    "data.protocol": "within_session",
    "data.ratios": [10, 5, 5],
}

# Keys filled from dataset metadata when the user does not pin them.
DATA_DERIVED = ("model.C", "model.S", "model.P", "model.M")


def _coerce(key: str, value):
    default = DEFAULTS[key]
    if isinstance(value, str) and not isinstance(default, str):
        try:
            value = json.loads(value)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"cannot parse value for {key}: {value!r}") from exc
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, (list, tuple)):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key} expects a list, got {value!r}")
        return list(value)
    return str(value)


class RunConfig:
    """Effective configuration with provenance of explicitly set keys."""

    def __init__(self, values: dict, explicit: set):
        self.values = values
        self.explicit = explicit

    @classmethod
    def load(cls, config_path=None, overrides: dict | None = None) -> "RunConfig":
        values = dict(DEFAULTS)
        explicit: set = set()
        if config_path is not None:
            raw = json.loads(Path(config_path).read_text(encoding="utf-8"))
            if not isinstance(raw, dict):
                raise ConfigError("config file must hold a JSON object of dotted keys")
            for key, value in raw.items():
                if key not in DEFAULTS:
                    raise ConfigError(f"unknown config key {key!r}")
                values[key] = _coerce(key, value)
                explicit.add(key)
        for key, value in (overrides or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _coerce(key, value)
            explicit.add(key)
        return cls(values, explicit)

    def inherit_from_meta(self, meta: dict) -> None:
        mapping = {"model.C": "C", "model.S": "S", "model.P": "P", "model.M": "M"}
        for key in DATA_DERIVED:
            if key not in self.explicit:
                self.values[key] = int(meta[mapping[key]])

    def __getitem__(self, key: str):
        return self.values[key]

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _coerce(key, value)
        self.explicit.add(key)

    def model_config(self) -> ModelConfig:
        v = self.values
        return ModelConfig(
            C=v["model.C"], S=v["model.S"], D=v["model.D"], P=v["model.P"], M=v["model.M"],
            hidden=v["model.hidden"], out_dim=v["model.out_dim"],
            kernels=tuple(v["train.kernels"]), dropout=v["train.dropout"],
            harmonics=v["model.harmonics"], provider=v["model.provider"],
            provider_trainable=v["model.provider_trainable"],
            block=v["model.block"], kan=v["model.kan"],
            bn_momentum=v["model.bn_momentum"], bn_eps=v["model.bn_eps"],
            seed=v["train.seed"],
        )

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            epochs=v["train.epochs"], batch_size=v["train.batch_size"],
            weight_decay=v["train.weight_decay"], lr_backbone=v["train.lr_backbone"],
            lr_head=v["train.lr_head"], lr_min=v["train.lr_min"],
            clip_norm=v["train.clip_norm"], dropout=v["train.dropout"],
            kernels=tuple(v["train.kernels"]), betas=(v["train.beta1"], v["train.beta2"]),
            adam_eps=v["train.adam_eps"], seed=v["train.seed"],
            decay_biases=v["train.decay_biases"], eval_batch_size=v["train.eval_batch_size"],
        )

    def echo(self, path, extra: dict | None = None) -> dict:
        payload = dict(sorted(self.values.items()))
        if extra:
            payload.update(extra)
        Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n",
                              encoding="utf-8")
        return payload


def parse_override_args(argv):
    """Split argv into (--key=value dotted overrides, remaining args)."""
    overrides = {}
    rest = []
    for arg in argv:
        if arg.startswith("--") and "=" in arg and "." in arg.split("=", 1)[0]:
            key, value = arg[2:].split("=", 1)
            overrides[key] = value
        else:
            rest.append(arg)
    return overrides, rest
