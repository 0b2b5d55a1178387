"""Hierarchical run configuration loaded from a TOML file.

Sections: [geometry], [sensing], [dynamics], [env], [pure_pursuit], [ppo],
[bridge].  Every key is optional; unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib


@dataclass(frozen=True)
class GeometryConfig:
    radius: float = 1.0
    length: float = 30.0
    n_samples: int = 256
    circle_segments: int = 32


@dataclass(frozen=True)
class SensingConfig:
    n_beams: int = 36
    d_max_radii: float = 5.0  # LiDAR normalization range, in tube radii
    ring_offset: float = 0.15
    lookahead_radii: float = 4.0  # camera target distance along the centerline
    depth_range_radii: float = 5.0
    memory_horizon: int = 40
    f_w: float = 1.0
    f_h: float = 0.7
    c: float = 1.0


@dataclass(frozen=True)
class DynamicsConfig:
    k: float = 0.75
    v_max: float = 1.5
    dt: float = 0.1
    max_turn_rate: float = 2.0
    max_accel: float = 2.0
    physics_dt: float = 0.005
    compensation: float = 0.9
    k_p: float = 8.0
    k_att: float = 2.0
    k_rate: float = 0.4
    k_roll: float = 1.0
    mass: float = 1.5


@dataclass(frozen=True)
class EnvConfig:
    t_warmup: int = 20
    t_max: int = 1000
    goal_tolerance_radii: float = 0.5
    safety_radii: float = 0.5
    curriculum_window: int = 100
    thresholds: tuple[float, float, float] = (0.85, 0.80, 0.80)


@dataclass(frozen=True)
class PurePursuitSection:
    lookahead_radii: float = 4.0
    speed_policy: str = "fixed"
    v_cmd: float = 1.5
    kappa_ref: float = 0.35
    continuous: bool = False
    sweep_radii: tuple[float, ...] = (2.0, 3.0, 4.0, 6.0)


@dataclass(frozen=True)
class PPOSection:
    lr: float = 3e-4
    gamma: float = 0.99
    lambda_gae: float = 0.95
    train_batch: int = 2000
    minibatch: int = 200
    rollout_len: int = 200
    n_workers: int = 4
    entropy_coef: float = 0.003
    clip: float = 0.3
    epochs_per_iter: int = 10
    vf_coef: float = 0.5
    max_grad_norm: float = 0.5
    iterations: int = 300
    time_budget_s: float = 1800.0
    checkpoint_every: int = 10
    seed: int = 0
    parallel: bool = False
    stop_at_level: int = -1  # stop once the curriculum reaches this level (-1: never)


@dataclass(frozen=True)
class BridgeSection:
    transport: str = "inproc"
    shm_name: str = "tubenav_bridge"
    dt: float = 0.1
    delta_t: float = 0.005
    time_limit_steps: int = 1000


@dataclass(frozen=True)
class Config:
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    sensing: SensingConfig = field(default_factory=SensingConfig)
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    pure_pursuit: PurePursuitSection = field(default_factory=PurePursuitSection)
    ppo: PPOSection = field(default_factory=PPOSection)
    bridge: BridgeSection = field(default_factory=BridgeSection)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


PAPER_SCALE = dict(train_batch=13000, minibatch=1300, rollout_len=200, n_workers=13)
DESK_SCALE = dict(train_batch=2000, minibatch=200, rollout_len=200, n_workers=4)


def _build(cls, values: dict[str, Any]):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(values) - set(names)
    if unknown:
        raise ValueError(f"unknown keys for [{cls.__name__}]: {sorted(unknown)}")
    kwargs = {}
    for key, val in values.items():
        if isinstance(val, list):
            val = tuple(val)
        kwargs[key] = val
    return cls(**kwargs)


def config_from_dict(data: dict[str, Any]) -> Config:
    sections = {f.name: f for f in dataclasses.fields(Config)}
    unknown = set(data) - set(sections)
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    kwargs = {}
    for name, f in sections.items():
        if name in data:
            kwargs[name] = _build(f.default_factory().__class__, data[name])
    return Config(**kwargs)


def load_config(path: str | Path | None = None, **ppo_overrides) -> Config:
    data: dict[str, Any] = {}
    if path is not None:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    cfg = config_from_dict(data)
    if ppo_overrides:
        cfg = dataclasses.replace(cfg, ppo=dataclasses.replace(cfg.ppo, **ppo_overrides))
    return cfg
