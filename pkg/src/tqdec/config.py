"""Run configuration: one flat dataclass, serialized as sectioned
key=value text so ablation grids and overrides stay scriptable.

Every field belongs to exactly one section; unknown sections or keys are
rejected rather than ignored, and file -> object -> file round-trips
reproduce all values.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

# section -> field names, in serialization order
SECTIONS = {
    "data": ["n_train", "n_test", "noise_sigma"],
    "model": ["dim", "clips", "heads", "layers", "dropout", "query_variance",
              "query_pe", "memory_pe", "attn_record", "head_hidden1",
              "head_hidden2", "score_sigmoid"],
    "loss": ["lambda_reg", "lambda_att", "attention_loss", "kl_row_reduce",
             "kl_symmetric", "kl_stop_grad"],
    "train": ["learning_rate", "batch_size", "epochs", "seed"],
}


@dataclass
class TrainConfig:
    # data (synthetic generation defaults)
    n_train: int = 200
    n_test: int = 50
    noise_sigma: float = 0.05
    # model
    dim: int = 64
    clips: int = 8
    heads: int = 4
    layers: int = 2
    dropout: float = 0.7
    query_variance: float = 1.0
    query_pe: bool = True
    memory_pe: bool = False
    attn_record: str = "pre_norm"
    head_hidden1: int = 0          # 0 = dim // 2
    head_hidden2: int = 0          # 0 = dim // 4
    score_sigmoid: bool = False
    # loss
    lambda_reg: float = 1.0
    lambda_att: float = 1.0
    attention_loss: bool = True
    kl_row_reduce: str = "mean"
    kl_symmetric: bool = False
    kl_stop_grad: str = "none"
    # train
    learning_rate: float = 1e-4
    batch_size: int = 48
    epochs: int = 200
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        positive = ["n_train", "dim", "clips", "heads", "layers",
                    "learning_rate", "batch_size", "epochs", "query_variance"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ["n_test", "noise_sigma", "lambda_reg", "lambda_att",
                     "head_hidden1", "head_hidden2", "seed"]:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.dim % 2 != 0:
            raise ConfigError(f"dim must be even for the position code, got {self.dim}")
        if self.attn_record not in ("pre_norm", "post_norm"):
            raise ConfigError(f"attn_record must be pre_norm or post_norm, "
                              f"got {self.attn_record!r}")
        if self.kl_row_reduce not in ("mean", "sum"):
            raise ConfigError(f"kl_row_reduce must be mean or sum, "
                              f"got {self.kl_row_reduce!r}")
        if self.kl_stop_grad not in ("none", "self", "cross"):
            raise ConfigError(f"kl_stop_grad must be none, self or cross, "
                              f"got {self.kl_stop_grad!r}")
        if self.lambda_reg == 0 and self.lambda_att == 0:
            raise ConfigError("lambda_reg and lambda_att must not both be zero")


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _parse_value(name: str, raw: str):
    ftype = _FIELD_TYPES[name]
    raw = raw.strip()
    if ftype == "bool":
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
    except ValueError as e:
        raise ConfigError(f"{name}: {e}") from e
    return raw


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def config_to_text(cfg: TrainConfig) -> str:
    out = io.StringIO()
    for section, names in SECTIONS.items():
        out.write(f"[{section}]\n")
        for name in names:
            out.write(f"{name} = {_format_value(getattr(cfg, name))}\n")
        out.write("\n")
    return out.getvalue()


def config_from_text(text: str) -> TrainConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"bad config syntax: {e}") from e
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            values[key] = _parse_value(key, raw)
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return config_from_text(path.read_text())


def save_config(path, cfg: TrainConfig):
    Path(path).write_text(config_to_text(cfg))


def apply_overrides(cfg: TrainConfig, overrides: list) -> TrainConfig:
    """Apply repeatable ``section.key=value`` strings on top of ``cfg``."""
    values = {f.name: getattr(cfg, f.name) for f in fields(TrainConfig)}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        dotted, raw = item.split("=", 1)
        dotted = dotted.strip()
        if "." in dotted:
            section, key = dotted.split(".", 1)
            if section not in SECTIONS or key not in SECTIONS[section]:
                raise ConfigError(f"unknown config key {dotted!r}")
        else:
            key = dotted
            owners = [s for s, names in SECTIONS.items() if key in names]
            if not owners:
                raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse_value(key, raw)
    return TrainConfig(**values)
