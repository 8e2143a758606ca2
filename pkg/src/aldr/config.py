"""Flat ``key=value`` run configuration with section prefixes.

Example::

    seed=0
    data.dir=corpus
    data.normalization=utterance
    model.encoder.kind=mlp
    train.out_dir=runs/full
    train.lambda_r=1e-4

Every key is checked against a schema; unknown keys are rejected by name.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError, ParameterError, ParseError
from .networks import EncoderConfig, ModelConfig
from .trainer import TrainConfig

SEED_ENV = "ALDR_SEED"
REQUIRED = ("seed", "data.dir", "train.out_dir")


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _parser_for(default):
    if isinstance(default, bool):
        return _bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if isinstance(default, tuple):
        return _ints
    return str


def _schema() -> dict:
    schema = {
        "seed": int,
        "data.dir": str,
        "data.normalization": str,
        "model.adv_hidden": _ints,
        "train.out_dir": str,
        "eval.trials": str,
        "eval.out_dir": str,
        "eval.probe": _bool,
    }
    for f in fields(EncoderConfig):
        schema[f"model.encoder.{f.name}"] = _parser_for(f.default)
    for f in fields(TrainConfig):
        if f.name != "seed":
            schema[f"train.{f.name}"] = _parser_for(f.default)
    return schema


SCHEMA = _schema()


@dataclass
class RunConfig:
    seed: int
    data_dir: Path
    normalization: str
    model: ModelConfig
    train: TrainConfig
    out_dir: Path
    trials: Path
    eval_out: Path
    probe: bool
    raw: dict

    def snapshot(self) -> dict:
        """Keys stored in checkpoints so evaluation can rebuild preprocessing."""
        return {"data.normalization": self.normalization, "data.dir": str(self.data_dir), "seed": self.seed}


def parse_config_text(text: str) -> dict:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ParseError(f"expected 'key=value', got {raw.strip()!r}", lineno)
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        if key in values:
            raise ConfigError(f"config key {key!r} given twice (line {lineno})")
        values[key] = value.strip()
    return values


def build_config(values: dict, overrides: dict | None = None, env=os.environ) -> RunConfig:
    values = dict(values)
    for k, v in (overrides or {}).items():
        if k not in SCHEMA:
            raise ConfigError(f"unknown config key {k!r}")
        values[k] = str(v)
    if "seed" not in values and SEED_ENV in env:
        values["seed"] = env[SEED_ENV]
    for key in REQUIRED:
        if key not in values:
            raise ConfigError(f"missing required config key {key!r}")
    typed = {}
    for key, text in values.items():
        try:
            typed[key] = SCHEMA[key](text)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from None

    def section(prefix):
        return {k[len(prefix) :]: v for k, v in typed.items() if k.startswith(prefix)}

    try:
        enc = EncoderConfig(**section("model.encoder."))
        train = TrainConfig(seed=typed["seed"], **{k: v for k, v in section("train.").items() if k != "out_dir"})
    except ParameterError as exc:
        raise ConfigError(str(exc)) from None
    normalization = typed.get("data.normalization", "bin")
    if normalization not in ("bin", "utterance"):
        raise ConfigError(f"data.normalization must be 'bin' or 'utterance', got {normalization!r}")
    data_dir = Path(typed["data.dir"])
    out_dir = Path(typed["train.out_dir"])
    adv_hidden = typed.get("model.adv_hidden", ModelConfig().adv_hidden)
    return RunConfig(
        seed=typed["seed"],
        data_dir=data_dir,
        normalization=normalization,
        model=ModelConfig(encoder=enc, adv_hidden=adv_hidden),
        train=train,
        out_dir=out_dir,
        trials=Path(typed.get("eval.trials", data_dir / "trials.txt")),
        eval_out=Path(typed.get("eval.out_dir", out_dir / "eval")),
        probe=typed.get("eval.probe", False),
        raw=values,
    )


def load_config(path, overrides: dict | None = None, env=os.environ) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return build_config(parse_config_text(text), overrides, env)
