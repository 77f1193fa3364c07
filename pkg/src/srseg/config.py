"""Run configuration: nested YAML file + environment + flag overrides.

Precedence is flags > environment (``SRSEG_SECTION__KEY=value``) > file >
defaults. Unknown keys anywhere are rejected with the offending path named.
A resolved snapshot is written into every output directory so a run can be
reproduced from its artifacts alone.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, get_args, get_origin

import yaml

from .degradation import DegradationConfig
from .pipeline import InferenceConfig
from .segnet import ModalityConfig, SegConfig
from .segtrain import SegTrainConfig
from .srnet import DiscriminatorConfig, GeneratorConfig, LossWeights
from .srtrain import SRTrainConfig

__all__ = ["RunConfig", "ConfigError", "load_config", "ENV_PREFIX"]

ENV_PREFIX = "SRSEG_"


class ConfigError(ValueError):
    """Invalid configuration content (unknown key, bad value, bad type)."""


@dataclass(frozen=True)
class DataConfig:
    n_scenes: int = 200
    hr_size: int = 320
    n_buildings: int = 12
    n_roads: int = 3
    n_water: int = 2
    building_size_range: tuple[tuple[int, int], tuple[int, int]] = ((10, 42), (10, 42))
    road_width_range: tuple[int, int] = (3, 8)
    color_jitter: float = 0.04
    pixel_noise: float = 0.015
    vegetation_texture_scale: float = 12.0
    soil_fraction: float = 0.25
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)


@dataclass(frozen=True)
class SRSection:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)


@dataclass(frozen=True)
class TrainSection:
    sr_psnr: SRTrainConfig = field(default_factory=lambda: SRTrainConfig(
        phase="psnr", steps=2000, lr_generator=1e-4))
    sr_gan: SRTrainConfig = field(default_factory=lambda: SRTrainConfig(
        phase="gan", steps=500, lr_generator=5e-5))
    seg: SegTrainConfig = field(default_factory=SegTrainConfig)


@dataclass(frozen=True)
class AnalysisConfig:
    area_decimals: int = 2
    rate_decimals: int = 2
    metric_decimals: int = 4


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    deterministic: bool = True
    output_dir: str = "runs/out"
    workers: int = 0  # 0 means one per machine core
    data: DataConfig = field(default_factory=DataConfig)
    degradation: DegradationConfig = field(default_factory=DegradationConfig)
    sr: SRSection = field(default_factory=SRSection)
    seg: SegConfig = field(default_factory=SegConfig)
    train: TrainSection = field(default_factory=TrainSection)
    infer: InferenceConfig = field(default_factory=InferenceConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def snapshot(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "config_snapshot.yaml"
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))
        return path


def _coerce(value: Any, ftype: Any, path: str) -> Any:
    origin = get_origin(ftype)
    if is_dataclass(ftype):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping")
        return _build(ftype, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a sequence")
        args = get_args(ftype)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{path}[{i}]")
                         for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(f"{path}: expected {len(args)} entries, "
                              f"got {len(value)}")
        return tuple(_coerce(v, t, f"{path}[{i}]")
                     for i, (v, t) in enumerate(zip(value, args)))
    return value


def _build(cls, data: dict, path: str = ""):
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        where = path or cls.__name__
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {where}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        sub_path = f"{path}.{name}" if path else name
        ftype = f.type if not isinstance(f.type, str) else _resolve_type(cls, f.name)
        kwargs[name] = _coerce(value, ftype, sub_path)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or cls.__name__}: {exc}") from exc


def _resolve_type(cls, name: str):
    import typing
    hints = typing.get_type_hints(cls)
    return hints[name]


def _deep_merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def _env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out: dict = {}
    for key, raw in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        parts = [p.lower() for p in key[len(ENV_PREFIX):].split("__")]
        node = out
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return out


def _flag_overrides(pairs: list[str]) -> dict:
    out: dict = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        key, raw = pair.split("=", 1)
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return out


def load_config(path=None, overrides: list[str] | None = None,
                environ=None) -> RunConfig:
    """Assemble a RunConfig from file, environment, and key=value overrides."""
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        loaded = yaml.safe_load(path.read_text())
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        data = loaded
    data = _deep_merge(data, _env_overrides(environ))
    if overrides:
        data = _deep_merge(data, _flag_overrides(overrides))
    return _build(RunConfig, data)
