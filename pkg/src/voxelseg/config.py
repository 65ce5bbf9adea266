"""Run configuration: a strict JSON schema covering every tunable.

Unknown keys anywhere in the file are rejected.  One master seed drives
all randomness; per-purpose generators are derived from it with fixed
spawn keys so commands are reproducible from (config, seed) alone.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .features import FeatureConfig
from .network import NetworkConfig
from .synthdata import SynthConfig


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


# spawn keys for the per-purpose generators derived from the master seed
SPAWN_TEMPLATE = 0   # claimed by SynthConfig internally
SPAWN_SAMPLING = 2
SPAWN_INIT = 3
SPAWN_TRAIN = 4


def derived_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


@dataclass(frozen=True)
class SynthParams:
    dims: tuple[int, int, int] = (64, 64, 64)
    n_regions: int = 8
    n_train: int = 15
    n_test: int = 5
    intensity_range: tuple[float, float] = (0.25, 0.95)
    shared_mean_pairs: int = 2
    noise_std: float = 0.03
    deformation: float = 0.5
    jitter_rot: float = 0.05
    jitter_trans: float = 1.5
    foreground_radius_frac: float = 0.42

    def to_synth_config(self, seed: int) -> SynthConfig:
        return SynthConfig(
            dims=tuple(self.dims),
            n_regions=self.n_regions,
            seed=seed,
            intensity_range=tuple(self.intensity_range),
            shared_mean_pairs=self.shared_mean_pairs,
            noise_std=self.noise_std,
            deformation=self.deformation,
            jitter_rot=self.jitter_rot,
            jitter_trans=self.jitter_trans,
            foreground_radius_frac=self.foreground_radius_frac,
        )


@dataclass(frozen=True)
class FeatureParams:
    a: int = 9
    b: int = 13
    c: int = 13
    s: int = 3
    noise_sigma: float = 0.05

    def to_feature_config(self, n_regions: int) -> FeatureConfig:
        return FeatureConfig(
            a=self.a, b=self.b, c=self.c, s=self.s,
            n_regions=n_regions, noise_sigma=self.noise_sigma,
        )


@dataclass(frozen=True)
class NetworkParams:
    t: int = 5
    p: int = 2
    maps3d: tuple[int, ...] = (8,)
    maps_ortho: tuple[int, ...] = (12,)
    maps_down: tuple[int, ...] = (12,)
    hidden: tuple[int, ...] = (128,)
    centroid_hidden: int | None = None
    use_patch3d: bool = True
    n_ortho: int = 3
    use_downscaled: bool = True

    def to_network_config(self, features: FeatureConfig) -> NetworkConfig:
        return NetworkConfig(
            features=features, t=self.t, p=self.p,
            maps3d=tuple(self.maps3d), maps_ortho=tuple(self.maps_ortho),
            maps_down=tuple(self.maps_down), hidden=tuple(self.hidden),
            centroid_hidden=self.centroid_hidden,
            use_patch3d=self.use_patch3d, n_ortho=self.n_ortho,
            use_downscaled=self.use_downscaled,
        )


@dataclass(frozen=True)
class TrainingParams:
    learning_rate: float = 0.05
    momentum: float = 0.5
    batch_size: int = 200
    patience: int = 10
    max_epochs: int = 60
    per_atlas_train: int = 1500
    per_atlas_val: int = 400


@dataclass(frozen=True)
class InferenceParams:
    max_iters: int = 10
    eps: float = 0.0
    block_size: int = 8192


@dataclass(frozen=True)
class RunConfig:
    seed: int = 20260809
    threads: int | None = None
    synth: SynthParams = field(default_factory=SynthParams)
    features: FeatureParams = field(default_factory=FeatureParams)
    network: NetworkParams = field(default_factory=NetworkParams)
    training: TrainingParams = field(default_factory=TrainingParams)
    inference: InferenceParams = field(default_factory=InferenceParams)


_SECTIONS = {
    "synth": SynthParams,
    "features": FeatureParams,
    "network": NetworkParams,
    "training": TrainingParams,
    "inference": InferenceParams,
}


def _strict_build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown keys {unknown} in {where}")
    converted = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        if isinstance(value, list):
            value = tuple(value)
        converted[f.name] = value
    try:
        return cls(**converted)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration root must be an object")
    known = {"seed", "threads"} | set(_SECTIONS)
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    kwargs = {}
    if "seed" in data:
        if not isinstance(data["seed"], int):
            raise ConfigError("seed must be an integer")
        kwargs["seed"] = data["seed"]
    if "threads" in data and data["threads"] is not None:
        if not isinstance(data["threads"], int) or data["threads"] < 1:
            raise ConfigError("threads must be a positive integer or null")
        kwargs["threads"] = data["threads"]
    for name, cls in _SECTIONS.items():
        if name in data:
            kwargs[name] = _strict_build(cls, data[name], f"section {name!r}")
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)


def config_to_dict(config: RunConfig) -> dict:
    return asdict(config)
