"""Run configuration: TOML/JSON files, dotted overrides, validation with field paths."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DEFAULT_FRACTIONS, SyntheticSpec
from .errors import ConfigError
from .scale_select import SelectConfig
from .trainer import TrainConfig

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib


@dataclass(frozen=True)
class DataConfig:
    import_path: str = ""
    split_fractions: tuple = DEFAULT_FRACTIONS
    image_size: int = 0          # 0 keeps the native size
    channels: int = 0            # 0 keeps the first image's channel count
    weights: str = ""            # optional .npz of pretrained conv weights


@dataclass(frozen=True)
class SelectSection:
    threshold: float = 0.01
    max_iterations: int = 15
    min_removed_per_iteration: int = 1
    warm_start_head: bool = True
    scale_bias: bool = True

    def __post_init__(self):
        SelectConfig(threshold=self.threshold, max_iterations=self.max_iterations,
                     min_removed_per_iteration=self.min_removed_per_iteration)


# Desk-scale optimizer settings: a few hundred steps per iteration instead of
# tens of thousands, so the step size is larger and augmentation is off.
DESK_TRAIN = TrainConfig(learning_rate=1e-2, batch_size=16, epochs=40, augment_probability=0.0)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    data: DataConfig = field(default_factory=DataConfig)
    baseline: TrainConfig = DESK_TRAIN
    train: TrainConfig = dataclasses.replace(DESK_TRAIN, l1_lambda=1e-5)
    finalize: TrainConfig = DESK_TRAIN
    select: SelectSection = field(default_factory=SelectSection)

    def select_config(self):
        s = self.select
        return SelectConfig(
            threshold=s.threshold, max_iterations=s.max_iterations,
            min_removed_per_iteration=s.min_removed_per_iteration,
            train=self.train, finalize_train=self.finalize,
            warm_start_head=s.warm_start_head, scale_bias=s.scale_bias,
            seed=derive_seed(self.seed, "select"))

    def to_dict(self):
        return _to_plain(self)


_STAGES = {"synthetic": 0, "baseline": 1, "train": 2, "finalize": 3, "select": 4, "init": 5}


def derive_seed(seed, stage):
    return int(np.random.SeedSequence([int(seed), _STAGES[stage]]).generate_state(1)[0])


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _coerce(value, default, path):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected a boolean, got {value!r}", path)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"expected an integer, got {value!r}", path)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", path)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", path)
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected a list, got {value!r}", path)
        return tuple(value)
    return value


def _build(cls, values, prefix, defaults=None):
    # nested sections start from the parent's default instance, not the class defaults
    if not isinstance(values, dict):
        raise ConfigError(f"expected a table, got {values!r}", prefix or None)
    defaults = defaults if defaults is not None else cls()
    names = {f.name for f in dataclasses.fields(cls)}
    for key in values:
        if key not in names:
            raise ConfigError("unknown field", f"{prefix}.{key}" if prefix else key)
    kwargs = {}
    for f in dataclasses.fields(cls):
        path = f"{prefix}.{f.name}" if prefix else f.name
        default = getattr(defaults, f.name)
        if f.name not in values:
            continue
        if dataclasses.is_dataclass(default):
            kwargs[f.name] = _build(type(default), values[f.name], path, default)
        else:
            kwargs[f.name] = _coerce(values[f.name], default, path)
    try:
        return dataclasses.replace(defaults, **kwargs)
    except ConfigError as exc:
        field_path = f"{prefix}.{exc.field}" if prefix and exc.field else (exc.field or prefix)
        raise ConfigError(exc.detail, field_path) from None


def parse_value(text):
    """Parse an override value as a TOML literal, falling back to a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(values, overrides):
    values = json.loads(json.dumps(values))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        target = values
        for p in parts[:-1]:
            target = target.setdefault(p, {})
            if not isinstance(target, dict):
                raise ConfigError("not a table", key)
        target[parts[-1]] = parse_value(raw.strip())
    return values


def read_config_file(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    text = path.read_text()
    try:
        if path.suffix == ".json":
            return json.loads(text)
        return tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None


def load_run_config(values=None, overrides=(), seed=None):
    """Resolve a :class:`RunConfig` from raw values, overrides and ``--seed``.

    Every ``rng_seed`` is derived from the run seed, so one number fixes all
    randomness of a run.
    """
    values = apply_overrides(values or {}, overrides)
    if seed is not None:
        values["seed"] = seed
    cfg = _build(RunConfig, values, "")
    return dataclasses.replace(
        cfg,
        baseline=dataclasses.replace(cfg.baseline, rng_seed=derive_seed(cfg.seed, "baseline")),
        train=dataclasses.replace(cfg.train, rng_seed=derive_seed(cfg.seed, "train")),
        finalize=dataclasses.replace(cfg.finalize, rng_seed=derive_seed(cfg.seed, "finalize")),
    )
