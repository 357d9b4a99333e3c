"""Configuration dataclasses and the flat JSON config file format.

A config file is one flat JSON object. Every key must be a field of exactly one of
``ModelConfig``, ``TrainConfig``, ``InferenceOptions`` or ``SyntheticSceneConfig``;
unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    num_joints: int = 8
    image_size: tuple[int, int] = (64, 48)  # (H, W)
    in_channels: int = 3
    patch_size: int = 16
    embed_dim: int = 64
    num_heads: int = 4
    frame_layers: int = 2
    temporal_layers: int = 2
    cond_channels: int = 64
    delta: int = 2
    level_channels: tuple[int, int, int] = (64, 32, 16)
    heatmap_hidden: int = 16
    fused_channels: int = 16
    step_embed_dim: int = 64
    sigma: float = 2.0

    def __post_init__(self):
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise ConfigError(f"image size {self.image_size} not divisible by patch {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError("embed_dim must be divisible by num_heads")
        if self.level_channels[0] % self.num_heads:
            raise ConfigError("level-1 channels must be divisible by num_heads")
        if self.delta < 0 or self.num_joints < 1:
            raise ConfigError("delta must be >= 0 and num_joints >= 1")

    @property
    def num_frames(self) -> int:
        return 2 * self.delta + 1

    @property
    def token_grid(self) -> tuple[int, int]:
        return self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size

    @property
    def heatmap_size(self) -> tuple[int, int]:
        gh, gw = self.token_grid
        return 4 * gh, 4 * gw

    @property
    def stride(self) -> float:
        """Image pixels per heatmap pixel."""
        return self.image_size[0] / self.heatmap_size[0]


@dataclass(frozen=True)
class TrainConfig:
    T: int = 1000
    base_lr: float = 5e-4
    lr_decay_epochs: tuple[int, ...] = (10, 20)
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    signal_scale: float = 1.0
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    max_steps: int = 0  # 0 = no cap

    def __post_init__(self):
        if self.T < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("T, epochs and batch_size must all be >= 1")
        if self.base_lr <= 0 or self.signal_scale <= 0:
            raise ConfigError("base_lr and signal_scale must be positive")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch: x0.1 at every decay epoch already reached."""
        drops = sum(1 for e in self.lr_decay_epochs if epoch >= e)
        return self.base_lr * (0.1**drops)


@dataclass(frozen=True)
class InferenceOptions:
    steps: int = 4
    N: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.N < 1:
            raise ConfigError("steps and N must be >= 1")


@dataclass(frozen=True)
class SyntheticSceneConfig:
    num_joints: int = 8
    image_size: tuple[int, int] = (64, 48)
    delta: int = 2
    motion_amplitude: tuple[float, float] = (0.5, 3.0)  # px per joint, sampled uniformly
    motion_frequency: tuple[float, float] = (0.05, 0.2)  # cycles per frame
    global_motion: float = 1.5  # px per frame drift of the whole figure (max)
    pose_jitter: float = 1.5  # px, per-joint offset of the clip's pose from the template
    limb_thickness: float = 1.0
    limb_intensity: float = 0.35
    blob_radius: float = 2.0
    noise_std: float = 0.05  # static background texture
    frame_noise_std: float = 0.0  # independent per-frame sensor noise
    occlusion_prob: float = 0.05  # joint hidden for the whole clip (unlabelled)
    dropout_prob: float = 0.0  # joint hidden in a single frame, label kept
    high_motion_threshold: float = 2.0  # px/frame of mean joint speed
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.num_joints:
            raise ConfigError("num_joints must be >= 1")
        for name in ("occlusion_prob", "dropout_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {p}")


SECTIONS = (ModelConfig, TrainConfig, InferenceOptions, SyntheticSceneConfig)
# keys present in more than one section are routed to all of them
SHARED_KEYS = {"num_joints", "image_size", "delta", "seed"}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferenceOptions = field(default_factory=InferenceOptions)
    scene: SyntheticSceneConfig = field(default_factory=SyntheticSceneConfig)

    def to_flat(self) -> dict[str, Any]:
        flat: dict[str, Any] = {}
        for section in (self.model, self.train, self.infer, self.scene):
            flat.update(to_jsonable(dataclasses.asdict(section)))
        return flat


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {k: to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (tuple, list)):
        return [to_jsonable(v) for v in obj]
    return obj


def _coerce(cls, kwargs: dict[str, Any]):
    out = {}
    for f in fields(cls):
        if f.name not in kwargs:
            continue
        v = kwargs[f.name]
        if isinstance(v, list):
            v = tuple(v)
        out[f.name] = v
    try:
        return cls(**out)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def from_flat(data: dict[str, Any], env: bool = True) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for cls in SECTIONS for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    data = dict(data)
    if env and os.environ.get("DIFFPOSE_SEED"):
        try:
            data["seed"] = int(os.environ["DIFFPOSE_SEED"])
        except ValueError as exc:
            raise ConfigError("DIFFPOSE_SEED must be an integer") from exc
    return RunConfig(*(_coerce(cls, data) for cls in SECTIONS))


def load_config(path: str | os.PathLike | None, env: bool = True) -> RunConfig:
    if path is None:
        return from_flat({}, env=env)
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    return from_flat(data, env=env)
