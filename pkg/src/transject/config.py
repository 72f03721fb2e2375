"""Experiment configuration read from INI files with [model], [data], [optim], [output]."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import get_type_hints

MODEL_KINDS = ("transject", "vanilla", "rezero", "orthogonal")
DATA_TASKS = ("listops", "text", "lm")
POOLINGS = ("mean", "max")


def default_lr(task: str) -> float:
    return 1e-2 if task == "lm" else 5e-4


def default_pooling(task: str) -> str:
    return "max" if task == "listops" else "mean"


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    kind: str = "transject"
    layers: int = 4
    d: int = 64
    experts: int = 2
    heads: int = 4
    d_ff: int = 0  # 0 means 4 * d
    sigma_mode: str = "approx"
    pooling: str = ""  # empty means the task default: max for listops, mean otherwise
    tie_residuals: bool = False
    residual_init: float = -6.0
    dropout: float = -1.0  # negative means the variant default


@dataclass
class DataSection:
    task: str = "listops"
    train_size: int = 10000
    valid_size: int = 1000
    test_size: int = 1000
    max_depth: int = 2
    max_len: int = 64
    data_seed: int = 0
    train_path: str = ""
    valid_path: str = ""
    test_path: str = ""
    window: int = 35
    batch_size: int = 32
    analysis_samples: int = 256


@dataclass
class OptimSection:
    lr: float = 0.0  # 0 means the task default: 1e-2 for lm, 5e-4 otherwise
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    epochs: int = 20
    patience: int = 4
    recon_weight: float = 0.1
    seed: int = 0


@dataclass
class OutputSection:
    run_dir: str = "runs/default"


@dataclass
class ExperimentConfig:
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    optim: OptimSection = field(default_factory=OptimSection)
    output: OutputSection = field(default_factory=OutputSection)
    source: str | None = None

    def validate(self) -> None:
        m, d, o = self.model, self.data, self.optim
        if m.kind not in MODEL_KINDS:
            raise ConfigError(f"model.kind must be one of {MODEL_KINDS}, got {m.kind!r}")
        if d.task not in DATA_TASKS:
            raise ConfigError(f"data.task must be one of {DATA_TASKS}, got {d.task!r}")
        if d.task in ("text", "lm"):
            for key in ("train_path", "valid_path"):
                if not getattr(d, key):
                    raise ConfigError(f"data.{key} is required for task {d.task!r}")
        for key in ("train_path", "valid_path", "test_path"):
            p = getattr(d, key)
            if p and not Path(p).is_file():
                raise ConfigError(f"data.{key}: {p} does not exist")
        if d.batch_size < 1 or o.epochs < 1 or o.patience < 1:
            raise ConfigError("batch_size, epochs and patience must be >= 1")
        if o.lr <= 0:
            raise ConfigError("optim.lr must be positive")
        if m.pooling not in POOLINGS:
            raise ConfigError(f"model.pooling must be one of {POOLINGS}, got {m.pooling!r}")


SECTIONS = {"model": ModelSection, "data": DataSection, "optim": OptimSection,
            "output": OutputSection}


def _coerce(cp: configparser.ConfigParser, section: str, key: str, typ):
    if typ is bool:
        return cp.getboolean(section, key)
    if typ is int:
        return cp.getint(section, key)
    if typ is float:
        return cp.getfloat(section, key)
    return cp.get(section, key)


def parse_config(text: str, source: str | None = None, base_dir: Path | None = None
                 ) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.read_string(text, source=source or "<string>")
    unknown = set(cp.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section(s): {sorted(unknown)}")
    parts = {}
    for name, cls in SECTIONS.items():
        hints = get_type_hints(cls)
        kwargs = {}
        if cp.has_section(name):
            for key in cp.options(name):
                if key not in hints:
                    raise ConfigError(f"unknown key {name}.{key}")
                try:
                    kwargs[key] = _coerce(cp, name, key, hints[key])
                except ValueError as exc:
                    raise ConfigError(f"{name}.{key}: {exc}") from None
        parts[name] = cls(**kwargs)
    cfg = ExperimentConfig(**parts, source=source)
    if not cfg.optim.lr:
        cfg.optim.lr = default_lr(cfg.data.task)
    if not cfg.model.pooling:
        cfg.model.pooling = default_pooling(cfg.data.task)
    if base_dir is not None:
        for key in ("train_path", "valid_path", "test_path"):
            p = getattr(cfg.data, key)
            if p and not Path(p).is_absolute():
                setattr(cfg.data, key, str(base_dir / p))
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    cfg = parse_config(path.read_text(encoding="utf-8"), str(path), path.parent)
    cfg.validate()
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        for f in dataclasses.fields(getattr(cfg, name)):
            v = getattr(getattr(cfg, name), f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        lines.append("")
    return "\n".join(lines)
