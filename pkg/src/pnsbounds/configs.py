"""Experiment configuration: TOML files with typed sections and presets.

A config is one human-readable TOML file with sections [experiment],
[data], [train], [enn], [bootstrap] and optionally [sweep].  Every
hyperparameter of the training and inference procedures is a key here;
bundled presets carry both desk-scale values (fast, used by the test
harness) and the full-scale settings from the source benchmarks.  Schema
violations are reported with their full field path.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

KNOWN_METHODS = (
    "s_learner",
    "t_learner",
    "anchored",
    "mb_full_network",
    "mb_last_layer",
    "enn_clr",
)


class ConfigError(ValueError):
    """A config schema violation, carrying the offending field path."""

    def __init__(self, path: str, message: str):
        self.field_path = path
        super().__init__(f"{path}: {message}")


@dataclass(frozen=True)
class ExperimentSection:
    name: str = "experiment"
    seed: int = 0
    replicates: int = 1
    workers: int = 1
    methods: tuple = ("anchored",)
    dump_points: bool = True


@dataclass(frozen=True)
class DataSection:
    dgp: str = "lowdim"
    preset: str = "li-model-1"
    n_obs: int = 20000
    n_exp: int = 10000
    n_test: int = 300
    covariates: str = "synthetic"
    covariate_rows: int = 4000
    d_obs: int = 200
    k_latent: int = 5
    gamma: float = 1.0
    eps_clip: float = 0.05
    scm_seed: int = 11


@dataclass(frozen=True)
class TrainSection:
    hidden_width: int = 128
    depth: int = 3
    learning_rate: float = 3e-4
    batch_size: int = 8192
    epochs: int = 800
    validation_fraction: float = 0.0
    standardize: bool = True


@dataclass(frozen=True)
class EnnSection:
    index_dim: int = 20
    generator_hidden: tuple = (64, 64)
    prior_hidden: tuple = (32, 32)
    prior_scale: float = 1.0
    index_samples: int = 8
    posterior_samples: int = 8000
    quantile_level: float = 0.975
    learning_rate: float = 3e-4
    batch_size: int = 8192
    epochs: int = 800


@dataclass(frozen=True)
class BootstrapSection:
    replicates: int = 1000
    alpha: float = 0.05
    cg_iters: int = 50
    damping: float = 1e-4
    hidden_width: int = 128
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 100
    validation_fraction: float = 0.1


@dataclass(frozen=True)
class SweepSection:
    n_exp_grid: tuple = ()
    replicates: int = 30


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    enn: EnnSection = field(default_factory=EnnSection)
    bootstrap: BootstrapSection = field(default_factory=BootstrapSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def as_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for section in out.values():
            for key, value in section.items():
                if isinstance(value, tuple):
                    section[key] = list(value)
        return out

    def replace_data(self, **kwargs) -> "ExperimentConfig":
        return dataclasses.replace(self, data=dataclasses.replace(self.data, **kwargs))

    def replace_experiment(self, **kwargs) -> "ExperimentConfig":
        return dataclasses.replace(
            self, experiment=dataclasses.replace(self.experiment, **kwargs)
        )


_SCALARS = {int: "integer", float: "number", str: "string", bool: "boolean"}


def _coerce(path: str, value, target):
    if target is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected number, got {type(value).__name__}")
        return float(value)
    if target is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected integer, got {type(value).__name__}")
        return value
    if target is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected boolean, got {type(value).__name__}")
        return value
    if target is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected string, got {type(value).__name__}")
        return value
    if target is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected list, got {type(value).__name__}")
        return tuple(value)
    raise ConfigError(path, f"unsupported config type {target}")


def _build_section(cls, mapping, section_name: str):
    if not isinstance(mapping, dict):
        raise ConfigError(section_name, "expected a table")
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in mapping:
        if key not in known:
            raise ConfigError(f"{section_name}.{key}", "unknown key")
    kwargs = {}
    for name, f in known.items():
        if name in mapping:
            target = f.type if isinstance(f.type, type) else type(f.default)
            if isinstance(f.default, tuple) or target is tuple:
                target = tuple
            elif isinstance(f.default, bool):
                target = bool
            elif isinstance(f.default, int):
                target = int
            elif isinstance(f.default, float):
                target = float
            elif isinstance(f.default, str):
                target = str
            kwargs[name] = _coerce(f"{section_name}.{name}", mapping[name], target)
    return cls(**kwargs)


def config_from_dict(raw: dict) -> ExperimentConfig:
    sections = {
        "experiment": ExperimentSection,
        "data": DataSection,
        "train": TrainSection,
        "enn": EnnSection,
        "bootstrap": BootstrapSection,
        "sweep": SweepSection,
    }
    for key in raw:
        if key not in sections:
            raise ConfigError(key, "unknown section")
    kwargs = {}
    for name, cls in sections.items():
        kwargs[name] = _build_section(cls, raw.get(name, {}), name)
    cfg = ExperimentConfig(**kwargs)
    for method in cfg.experiment.methods:
        if method not in KNOWN_METHODS:
            raise ConfigError(
                "experiment.methods",
                f"unknown method {method!r}; known: {', '.join(KNOWN_METHODS)}",
            )
    if cfg.data.dgp not in ("lowdim", "highdim"):
        raise ConfigError("data.dgp", "must be 'lowdim' or 'highdim'")
    if cfg.experiment.replicates < 1:
        raise ConfigError("experiment.replicates", "must be >= 1")
    return cfg


def load_config(source) -> ExperimentConfig:
    """Load a config from a TOML path or a bundled preset name."""
    path = Path(source)
    if not path.exists():
        preset = preset_path(str(source))
        if preset is None:
            raise ConfigError(
                "config", f"no such file or preset: {source!r}; "
                f"presets: {', '.join(available_presets())}"
            )
        path = preset
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError("config", f"invalid TOML: {exc}") from exc
    return config_from_dict(raw)


def _preset_dir():
    return resources.files("pnsbounds") / "presets"


def available_presets() -> list:
    return sorted(p.name[: -len(".toml")] for p in _preset_dir().iterdir()
                  if p.name.endswith(".toml"))


def preset_path(name: str):
    candidate = _preset_dir() / f"{name}.toml"
    return candidate if candidate.is_file() else None
