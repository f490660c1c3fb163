"""Training configuration and its flat ``key = value`` file format.

Blank lines and lines starting with ``#`` are ignored.  Tuples are written as
comma-separated values, ``none`` clears an optional field, booleans accept
``true/false/yes/no/1/0``.  Unknown keys are errors.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass
from pathlib import Path

from .backbone import BackboneConfig
from .poseaction import PoseCnnConfig

CROP_MODES = ("random_crop", "person_crop")
CLIP_MODES = ("element", "tensor_l1")
HEAD_MODES = ("rgb_only", "rgb_pose", "rgb_pose_action")

DEFAULT_MILESTONE_FRACS = (42 / 85, 68 / 85)


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # loss weights of the RGB, pose-estimation and pose-action tasks
    lambda_rgb: float = 1.0
    lambda_pose: float = 1.0
    lambda_paction: float = 1.0
    lambda_h: float = 0.5
    lambda_o: float = 0.5

    lr: float = 0.01
    milestones: tuple[int, ...] | None = None
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: float = 2.0
    # "element" clamps each gradient entry to [-grad_clip, grad_clip];
    # "tensor_l1" rescales any tensor whose L1 norm exceeds grad_clip
    grad_clip_mode: str = "element"
    epochs: int = 85
    batch_size: int = 16
    seed: int = 0

    crop: str = "person_crop"
    heads: str = "rgb_pose_action"
    train_pose_cnn_only: bool = False

    num_classes: int = 4
    num_keypoints: int = 17
    clip_len: int = 8
    clip_stride: int = 1
    crop_size: int = 224

    backbone_blocks: tuple[int, ...] = (3, 4, 6, 3)
    backbone_width: int = 64
    width_divisor: int = 1
    conv1_t: int = 5
    block_t: tuple[int, ...] = (3, 3, 3, 3)
    head_channels: int = 256
    num_deconv: int = 2
    disk_radius: float = 2.0
    pose_blocks: tuple[int, ...] = (2, 2, 2, 2)
    pose_width: int = 64
    pose_width_divisor: int = 1
    dropout: float = 0.5

    jitter_center: float = 0.1
    jitter_scale: float = 0.1
    mirror: bool = True
    random_crop_min_scale: float = 0.8

    test_clips: int = 10
    test_crops: int = 3

    def __post_init__(self):
        for name in ("lambda_rgb", "lambda_pose", "lambda_paction", "lambda_h", "lambda_o"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.crop not in CROP_MODES:
            raise ConfigError(f"crop must be one of {CROP_MODES}, got {self.crop!r}")
        if self.heads not in HEAD_MODES:
            raise ConfigError(f"heads must be one of {HEAD_MODES}, got {self.heads!r}")
        if self.grad_clip_mode not in CLIP_MODES:
            raise ConfigError(f"grad_clip_mode must be one of {CLIP_MODES}, got {self.grad_clip_mode!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.test_crops not in (1, 3):
            raise ConfigError("test_crops must be 1 or 3")
        if self.milestones is not None:
            self.milestones = tuple(int(m) for m in self.milestones)

    @property
    def has_pose_head(self) -> bool:
        return self.heads in ("rgb_pose", "rgb_pose_action")

    @property
    def has_pose_cnn(self) -> bool:
        return self.heads == "rgb_pose_action"

    def milestone_epochs(self) -> tuple[int, ...]:
        if self.milestones is not None:
            return self.milestones
        return tuple(max(1, round(f * self.epochs)) for f in DEFAULT_MILESTONE_FRACS)

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(blocks=self.backbone_blocks, base_channels=self.backbone_width,
                              conv1_t=self.conv1_t, block_t=self.block_t, clip_len=self.clip_len,
                              input_size=self.crop_size, width_divisor=self.width_divisor)

    def pose_cnn_config(self) -> PoseCnnConfig:
        return PoseCnnConfig(blocks=self.pose_blocks, base_channels=self.pose_width,
                             width_divisor=self.pose_width_divisor, num_classes=self.num_classes,
                             dropout=self.dropout)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def toy_config(**overrides) -> TrainConfig:
    """Small network and input that train in minutes on one CPU core."""
    base = dict(
        epochs=200, batch_size=8, crop_size=96, clip_len=8, clip_stride=2,
        backbone_blocks=(1, 1, 1, 1), width_divisor=8, head_channels=32,
        pose_blocks=(1, 1, 1, 1), pose_width_divisor=4,
    )
    base.update(overrides)
    return TrainConfig(**base)


# --------------------------------------------------------------------------
# key = value files

_HINTS = typing.get_type_hints(TrainConfig)


def _parse_value(name: str, raw: str):
    hint = _HINTS[name]
    raw = raw.strip()
    optional = type(None) in typing.get_args(hint)
    if optional:
        if raw.lower() == "none":
            return None
        hint = next(a for a in typing.get_args(hint) if a is not type(None))
    origin = typing.get_origin(hint)
    if origin is tuple:
        return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
    if hint is bool:
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if hint is int:
        return int(raw)
    if hint is float:
        return float(raw)
    return raw


def parse_config(text: str, source: str = "<config>", base: TrainConfig | None = None) -> TrainConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith(("#", ";")):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {stripped!r}")
        key, raw = (s.strip() for s in stripped.split("=", 1))
        if key not in _HINTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _parse_value(key, raw)
        except ValueError as e:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {e}") from e
    try:
        return dataclasses.replace(base, **values) if base else TrainConfig(**values)
    except ConfigError as e:
        raise ConfigError(f"{source}: {e}") from e


def load_config(path) -> TrainConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text, str(path))


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if v is None:
            s = "none"
        elif isinstance(v, tuple):
            s = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            s = "true" if v else "false"
        else:
            s = repr(v) if isinstance(v, float) else str(v)
        lines.append(f"{f.name} = {s}")
    return "\n".join(lines) + "\n"
