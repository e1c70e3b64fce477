"""Experiment configuration: nested dataclasses, YAML files, dotted overrides.

Every field has a default, unknown keys are rejected, and a parsed config
round-trips through ``to_dict``/``from_dict`` unchanged.  All randomness in
a run flows from the single top-level seed, split deterministically per
component (scene generation, network init, batch order).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import yaml

from .distill import LossWeights
from .geometry import GridSpec, make_depth_bins, make_rig
from .nets import NetworkSpec
from .synthworld import SceneParams
from .trainer import ExperimentSetup


@dataclass
class GridConfig:
    extent: float = 40.0
    resolution: int = 32


@dataclass
class RigConfig:
    cameras: int = 6
    image_width: int = 64
    image_height: int = 64
    hfov_deg: float = 70.0
    height: float = 1.6


@dataclass
class DepthConfig:
    near: float = 1.0
    far: float = 35.0
    bins: int = 16


@dataclass
class SceneConfig:
    n_agents_min: int = 1
    n_agents_max: int = 5
    speed_min: float = 1.0
    speed_max: float = 7.0
    ego_speed_min: float = 3.0
    ego_speed_max: float = 7.0
    yaw_rate_max: float = 0.3
    lane_half_width_min: float = 2.5
    lane_half_width_max: float = 3.5
    curvature_max: float = 0.015


@dataclass
class DataConfig:
    train_scenes: int = 256
    eval_scenes: int = 64


@dataclass
class NetConfig:
    stage_widths: list[int] = field(default_factory=list)
    bev_channels: int = 0
    out_bev_channels: int = 0
    head_hidden: int = 0


def _default_student() -> NetConfig:
    return NetConfig(stage_widths=[16, 32, 64, 64], bev_channels=32, out_bev_channels=32, head_hidden=64)


def _default_teacher() -> NetConfig:
    return NetConfig(
        stage_widths=[32, 64, 128, 128, 256, 256], bev_channels=64, out_bev_channels=32, head_hidden=128
    )


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 4
    base_lr: float = 2e-4
    weight_decay: float = 1e-2
    floor_lr: float = 0.0
    teacher_epochs: int = 20


@dataclass
class DecodeConfig:
    threshold: float = 0.25
    max_detections: int = 10


@dataclass
class WeightsConfig:
    feat: float = 1.0
    det: float = 0.2
    mot: float = 0.5
    plan: float = 0.5
    adapt: float = 0.5


@dataclass
class RunConfig:
    seed: int = 7
    grid: GridConfig = field(default_factory=GridConfig)
    rig: RigConfig = field(default_factory=RigConfig)
    depth: DepthConfig = field(default_factory=DepthConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    data: DataConfig = field(default_factory=DataConfig)
    student: NetConfig = field(default_factory=_default_student)
    teacher: NetConfig = field(default_factory=_default_teacher)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    weights: WeightsConfig = field(default_factory=WeightsConfig)


class ConfigError(Exception):
    pass


def _from_dict(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        here = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(f.type) or (isinstance(f.type, str) and f.type in _SECTION_TYPES):
            section_cls = _SECTION_TYPES[f.type] if isinstance(f.type, str) else f.type
            kwargs[name] = _from_dict(section_cls, value, here)
        else:
            kwargs[name] = value
    return cls(**kwargs)


_SECTION_TYPES = {
    cls.__name__: cls
    for cls in (
        GridConfig, RigConfig, DepthConfig, SceneConfig, DataConfig,
        NetConfig, TrainConfig, DecodeConfig, WeightsConfig,
    )
}


def config_from_dict(data: dict) -> RunConfig:
    return _from_dict(RunConfig, data, "")


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as f:
        data = yaml.safe_load(f)
    return config_from_dict(data or {})


def save_config(path, cfg: RunConfig) -> None:
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(config_to_dict(cfg), f, sort_keys=False)


def apply_overrides(data: dict, overrides) -> dict:
    """Apply repeatable KEY=VALUE strings with dotted paths onto a config dict."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, _, raw = item.partition("=")
        node = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                node[part] = {}
            node = node[part]
        node[parts[-1]] = yaml.safe_load(raw)
    return data


# ---------------------------------------------------------------------------
# Materialization into runtime objects.
# ---------------------------------------------------------------------------


def scene_params(cfg: RunConfig) -> SceneParams:
    s = cfg.scene
    return SceneParams(
        extent=cfg.grid.extent,
        n_agents=(s.n_agents_min, s.n_agents_max),
        speed=(s.speed_min, s.speed_max),
        ego_speed=(s.ego_speed_min, s.ego_speed_max),
        yaw_rate_max=s.yaw_rate_max,
        lane_half_width=(s.lane_half_width_min, s.lane_half_width_max),
        curvature_max=s.curvature_max,
    )


def _net_spec(role: str, net: NetConfig) -> NetworkSpec:
    return NetworkSpec(
        role=role,
        stage_widths=tuple(net.stage_widths),
        bev_channels=net.bev_channels,
        out_bev_channels=net.out_bev_channels,
        head_hidden=net.head_hidden,
    )


def experiment_setup(cfg: RunConfig) -> ExperimentSetup:
    return ExperimentSetup(
        rig=make_rig(
            n_cameras=cfg.rig.cameras,
            image_width=cfg.rig.image_width,
            image_height=cfg.rig.image_height,
            hfov_deg=cfg.rig.hfov_deg,
            height=cfg.rig.height,
        ),
        grid=GridSpec(extent=cfg.grid.extent, resolution=cfg.grid.resolution),
        bins=make_depth_bins(cfg.depth.near, cfg.depth.far, cfg.depth.bins),
        image_hw=(cfg.rig.image_height, cfg.rig.image_width),
        student_spec=_net_spec("student", cfg.student),
        teacher_spec=_net_spec("teacher", cfg.teacher),
        decode_threshold=cfg.decode.threshold,
        decode_max=cfg.decode.max_detections,
    )


def loss_weights(cfg: RunConfig) -> LossWeights:
    w = cfg.weights
    return LossWeights(feat=w.feat, det=w.det, mot=w.mot, plan=w.plan, adapt=w.adapt)
