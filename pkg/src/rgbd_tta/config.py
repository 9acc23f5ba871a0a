"""Run configuration: a flat TOML file whose keys mirror the CLI flags.

Every key is optional; command-line flags override file values, which override
the defaults below. Example::

    seed = 3
    height = 48
    width = 48
    profile = "shifted"
    iters = 500
    lr = 0.005
    modalities = ["rgb", "depth"]
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

import tomli

from .adapt import AdaptConfig
from .clustering import ClusterParams
from .net import NetworkSpec
from .objectives import LossConfig
from .pretrain import PretrainConfig
from .scenegen import PROFILES, SceneConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # scenes
    height: int = 48
    width: int = 48
    n_objects_min: int = 2
    n_objects_max: int = 4
    min_area_px: int = 30
    table_tilt_mm: float = 12.0
    profile: str = "none"
    count: int = 8
    # network and pretraining
    embed_dim: int = 8
    pretrain_steps: int = 2000
    pretrain_lr: float = 3e-3
    pretrain_sample_px: int = 1024
    # adaptation
    iters: int = 500
    warmup: int = 100
    lr: float = 0.005
    bn_momentum: float = 0.5
    k: int = 2
    temp: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    sample_px: int = 1024
    modalities: tuple[str, ...] = ("rgb", "depth")
    shuffle: bool = False
    # clustering and evaluation
    kappa: float = 30.0
    cluster_seeds: int = 64
    merge_cos: float = 0.95
    dilation_radius: int = 1

    def scene(self) -> SceneConfig:
        return SceneConfig(height=self.height, width=self.width,
                           n_objects=(self.n_objects_min, self.n_objects_max),
                           min_area_px=self.min_area_px, table_tilt_mm=self.table_tilt_mm)

    def network(self, height: int | None = None, width: int | None = None) -> NetworkSpec:
        return NetworkSpec(height or self.height, width or self.width, self.embed_dim)

    def cluster(self) -> ClusterParams:
        return ClusterParams(kappa=self.kappa, seeds=self.cluster_seeds, merge_cos=self.merge_cos)

    def loss(self) -> LossConfig:
        return LossConfig(lambda1=self.lambda1, lambda2=self.lambda2, k=self.k, T=self.temp,
                          sample_px=self.sample_px, rng_seed=self.seed)

    def adapt(self, iters: int | None = None) -> AdaptConfig:
        # a run shorter than the warmup just never leaves it
        total = self.iters if iters is None else iters
        return AdaptConfig(base_lr=self.lr, warmup_iters=min(self.warmup, total), total_iters=total,
                           bn_momentum=self.bn_momentum, loss=self.loss(), shuffle=self.shuffle,
                           modality_mask=tuple(self.modalities), cluster=self.cluster())

    def pretrain(self) -> PretrainConfig:
        return PretrainConfig(steps=self.pretrain_steps, lr=self.pretrain_lr,
                              sample_px=self.pretrain_sample_px, seed=self.seed)

    def validate(self) -> None:
        """Check every numeric range up front; raises ConfigError."""
        checks = [
            (self.lambda1 >= 0 and self.lambda2 >= 0, "lambda1 and lambda2 must be >= 0"),
            (self.temp > 0, "temp must be > 0"),
            (self.k >= 1, "k must be >= 1"),
            (self.lr > 0, "lr must be > 0"),
            (self.pretrain_lr > 0, "pretrain_lr must be > 0"),
            (self.iters >= 0 and self.warmup >= 0, "iters and warmup must be >= 0"),
            (self.pretrain_steps >= 0, "pretrain_steps must be >= 0"),
            (self.count >= 0, "count must be >= 0"),
            (self.dilation_radius >= 0, "dilation_radius must be >= 0"),
            (self.profile in PROFILES,
             f"unknown profile {self.profile!r}; known profiles: {', '.join(sorted(PROFILES))}"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        try:
            self.scene().validate()
            self.network()
            self.adapt().validate()
        except ValueError as e:
            raise ConfigError(str(e)) from None


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, value):
    default = _FIELDS[name].default
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number")
        return float(value)
    if isinstance(default, tuple):
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, str) for v in value):
            raise ConfigError(f"{name} must be a list of strings")
        return tuple(value)
    if not isinstance(value, str):
        raise ConfigError(f"{name} must be a string")
    return value


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults <- TOML file <- overrides (``None`` values are ignored). Validated."""
    values: dict = {}
    if path is not None:
        try:
            raw = tomli.loads(Path(path).read_text())
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
        values.update(raw)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = sorted(set(values) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = dataclasses.replace(RunConfig(), **{k: _coerce(k, v) for k, v in values.items()})
    cfg.validate()
    return cfg
