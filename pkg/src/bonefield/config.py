"""Run configuration: nested dataclasses parsed from JSON with strict keys."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .losses import ConfigError, LossWeights


@dataclass
class ModelConfig:
    scene_width: int = 256
    scene_depth: int = 10
    scene_skip: int = 5
    canonical_width: int = 256
    canonical_depth: int = 8
    canonical_skip: int = 5
    scene_levels: int = 16
    canonical_levels: int = 10
    embedding_dim: int = 64
    density_bias: float = -1.0
    weight_volume_resolution: int = 32
    weight_volume_eps: float = 1e-9
    weight_volume_init: str = "bone_gauss"   # or "zeros"
    weight_volume_sigma: float = 0.12
    bounds_dilate: float = 0.25
    bounds_pad: float = 0.35
    fine_width: int = 128
    fine_depth: int = 4
    fine_levels: int = 4
    optimize_joint_offsets: bool = True

    def validate(self):
        if self.weight_volume_init not in ("bone_gauss", "zeros"):
            raise ConfigError(f"unknown weight volume init {self.weight_volume_init!r}")


@dataclass
class RenderConfig:
    n_scene: int = 64
    n_ho: int = 64
    near: float = 0.1
    far: float = 1e6
    bbox_margin: float = 0.35
    ho_rotation: list = field(default_factory=lambda: np.eye(3).tolist())
    ho_translation: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    ho_scale: float = 1.0

    def validate(self):
        if self.near <= 0 or self.far <= self.near:
            raise ConfigError(f"need 0 < near < far, got {self.near}, {self.far}")
        if self.n_scene < 2 or self.n_ho < 2:
            raise ConfigError("need at least 2 samples per stream")


@dataclass
class AblationFlags:
    state_embeddings: bool = True
    object_bones: bool = True
    mask_gating: bool = True
    flow_loss: bool = True
    cycle_loss: bool = True


@dataclass
class TrainConfig:
    stage_lr: tuple = (0.002, 0.0006, 0.00006)
    stage_iters: tuple = (2000, 2000, 1000)
    rays_per_step: int = 1024
    seed: int = 0
    log_every: int = 50
    fg_oversample: float = 0.5
    stage3_reg: bool = False
    loss_weights: LossWeights = field(default_factory=LossWeights)
    flags: AblationFlags = field(default_factory=AblationFlags)

    def validate(self):
        self.stage_lr = tuple(self.stage_lr)
        self.stage_iters = tuple(int(i) for i in self.stage_iters)
        if len(self.stage_lr) != 3 or len(self.stage_iters) != 3:
            raise ConfigError("stage_lr and stage_iters must have 3 entries")
        if any(lr <= 0 for lr in self.stage_lr):
            raise ConfigError(f"learning rates must be > 0: {self.stage_lr}")
        if any(it < 1 for it in self.stage_iters):
            raise ConfigError(f"iteration budgets must be >= 1: {self.stage_iters}")
        if not 0.0 <= self.fg_oversample <= 1.0:
            raise ConfigError("fg_oversample must be in [0, 1]")


@dataclass
class RunConfig:
    dataset: str = ""
    out_dir: str = "runs/out"
    model: ModelConfig = field(default_factory=ModelConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self):
        self.model.validate()
        self.render.validate()
        self.train.validate()
        return self


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        ftype = fields[name].type
        sub = {"model": ModelConfig, "render": RenderConfig,
               "train": TrainConfig, "loss_weights": LossWeights,
               "flags": AblationFlags}.get(name)
        if sub is not None:
            kwargs[name] = _build(sub, value, f"{path}.{name}")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def load_config(path):
    try:
        with open(path) as f:
            data = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}")
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}")
    return config_from_dict(data)


def config_from_dict(data):
    return _build(RunConfig, data, "config").validate()


def config_to_dict(cfg):
    d = dataclasses.asdict(cfg)

    def clean(obj):
        if isinstance(obj, dict):
            return {k: clean(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [clean(v) for v in obj]
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        return obj

    return clean(d)


def apply_overrides(cfg, pairs):
    """Apply dotted key=value overrides (CLI flags win over the file)."""
    data = config_to_dict(cfg)
    for key, raw in pairs:
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if p not in node:
                raise ConfigError(f"override {key}: unknown section {p!r}")
            node = node[p]
        leaf = parts[-1]
        if leaf not in node:
            raise ConfigError(f"override {key}: unknown key {leaf!r}")
        try:
            node[leaf] = json.loads(raw)
        except json.JSONDecodeError:
            node[leaf] = raw
    return config_from_dict(data)
