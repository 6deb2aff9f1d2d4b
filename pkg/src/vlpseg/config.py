"""Run configuration: flat ``section.key = value`` files merged with flag overrides.

A config file looks like::

    # toy run
    train.epochs = 20
    train.mode = with-text
    model.n_queries = 50

Unknown sections or keys are rejected.  Values are parsed with the type of the
default they replace.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .backbones import BackboneConfig
from .errors import ConfigError
from .trainer import TrainConfig
from .vlp_encoder import MODES, ModelConfig

SEED_ENV = "VLPSEG_SEED"
RESOLVED_NAME = "resolved_config.txt"


@dataclass
class DataConfig:
    n_classes: int = 20
    n_folds: int = 4
    image_size: int = 64
    signature_seed: int = 0
    manifest: str = ""  # train from a manifest instead of generating episodes


@dataclass
class EvalConfig:
    n_pairs: int = 1000
    seed: int = 0
    threshold: float = 0.5
    batch_size: int = 50


SECTIONS = {
    "backbone": BackboneConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "eval": EvalConfig,
}


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def flat(self) -> dict[str, object]:
        return {f"{sec}.{k}": v for sec in SECTIONS for k, v in asdict(getattr(self, sec)).items()}

    def to_text(self) -> str:
        lines = ["# resolved vlpseg run configuration"]
        lines += [f"{k} = {_format(v)}" for k, v in self.flat().items()]
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / RESOLVED_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path


def _format(v) -> str:
    return str(v).lower() if isinstance(v, bool) else str(v)


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def _defaults() -> dict[str, object]:
    return RunConfig().flat()


def build_config(path=None, overrides: dict[str, object] | None = None) -> RunConfig:
    """Merge defaults, an optional config file and flag overrides (later wins).

    ``train.seed`` falls back to the ``VLPSEG_SEED`` environment variable when
    neither the file nor the overrides set it.
    """
    raw: dict[str, object] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        raw.update(parse_config_text(path.read_text(), str(path)))
    if "train.seed" not in raw and os.environ.get(SEED_ENV):
        raw["train.seed"] = os.environ[SEED_ENV]
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})

    defaults = _defaults()
    unknown = sorted(set(raw) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = {k: (_coerce(k, v, defaults[k]) if isinstance(v, str) else v) for k, v in raw.items()}
    if "train.mode" in values and "model.mode" not in values:
        values["model.mode"] = values["train.mode"]
    elif "model.mode" in values and "train.mode" not in values:
        values["train.mode"] = values["model.mode"]

    sections = {}
    for sec, cls in SECTIONS.items():
        kwargs = {f.name: values[f"{sec}.{f.name}"] for f in fields(cls) if f"{sec}.{f.name}" in values}
        try:
            sections[sec] = cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {sec} settings: {exc}") from None
    cfg = RunConfig(**sections)
    if cfg.train.mode not in MODES or cfg.model.mode != cfg.train.mode:
        raise ConfigError(f"mode must be one of {MODES} and agree between train and model, "
                          f"got train.mode={cfg.train.mode!r} model.mode={cfg.model.mode!r}")
    return cfg
