"""Experiment configuration: one JSON document with data/model/train/forecast/verify/track sections.

Unknown keys are rejected. ``config_hash`` is the SHA-256 of the resolved
document (sorted keys) and is stamped into every output.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass

from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class L96Section:
    K: int = 40
    F: float = 8.0
    dt: float = 0.05
    spinup: int = 1000


@dataclass
class GridSection:
    nlat: int = 240
    nlon: int = 400
    lat_start: float = 0.125
    lat_step: float = 0.25
    lon_start: float = 100.125
    lon_step: float = 0.25


@dataclass
class VortexSection:
    cases: int = 2
    members: int = 6
    leads: int = 21
    max_speed_kmh: float = 40.0
    min_speed_kmh: float = 10.0
    heading_sd_deg: float = 8.0
    speed_sd_kmh: float = 3.0
    radius_km: float = 250.0
    depth_hpa: float = 40.0
    grid: GridSection = field(default_factory=GridSection)


@dataclass
class DataSection:
    years: int = 17
    split: list = field(default_factory=lambda: [15, 1, 1])
    frames_per_year: int = 200
    l96: L96Section = field(default_factory=L96Section)
    vortex: VortexSection = field(default_factory=VortexSection)


@dataclass
class ModelSection:
    hidden: int = 32
    blocks: int = 3


@dataclass
class ForecastSection:
    members: int = 8
    steps: int = 15
    cases: int = 24


@dataclass
class VerifySection:
    estimator: str = "empirical"
    levels: list = field(default_factory=lambda: [2, 5, 10, 90, 95, 98])


@dataclass
class TrackSection:
    radius_km: float = 445.0
    pool_factor: int = 5
    criteria: list = field(default_factory=lambda: ["msl_minimum", "vorticity", "z850_minimum"])
    vorticity_threshold: float = 5e-5
    z850_radius_km: float = 278.0
    vorticity_radius_km: float = 278.0
    elevation_max_m: float = 1000.0
    step_hours: float = 6.0
    levels: list = field(default_factory=lambda: [850, 700, 500])
    steering_radius_km: float = 300.0
    cap_factor: float = 3.0
    min_fraction: float = 2.0 / 3.0
    max_hours: float = 120.0


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    forecast: ForecastSection = field(default_factory=ForecastSection)
    verify: VerifySection = field(default_factory=VerifySection)
    track: TrackSection = field(default_factory=TrackSection)

    def to_dict(self):
        return asdict(self)

    @property
    def hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def tracker_kwargs(self) -> dict:
        t = asdict(self.track)
        t.pop("min_fraction")
        t.pop("max_hours")
        return t


def _build(cls, doc, path):
    if not isinstance(doc, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(doc).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key {(path + '.' if path else '') + unknown[0]!r}")
    kwargs = {}
    defaults = cls()
    for name, value in doc.items():
        sub = getattr(defaults, name)
        key = f"{path}.{name}" if path else name
        if is_dataclass(sub):
            kwargs[name] = _build(type(sub), value, key)
        else:
            if isinstance(sub, bool) != isinstance(value, bool) or (
                    isinstance(sub, (int, float)) and not isinstance(value, (int, float))) or (
                    isinstance(sub, str) and not isinstance(value, str)) or (
                    isinstance(sub, list) and not isinstance(value, list)):
                raise ConfigError(f"config key {key!r}: bad value {value!r}")
            if isinstance(sub, float):
                value = float(value)
            elif isinstance(sub, int) and not isinstance(sub, bool):
                if float(value) != int(value):
                    raise ConfigError(f"config key {key!r}: expected an integer, got {value!r}")
                value = int(value)
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def from_dict(doc: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, doc, "")


def apply_overrides(doc: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings; values parse as JSON, else as plain strings."""
    doc = copy.deepcopy(doc)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = value
    return doc


def load_config(path=None, overrides=None) -> ExperimentConfig:
    doc = {}
    if path is not None:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return from_dict(apply_overrides(doc, overrides))
