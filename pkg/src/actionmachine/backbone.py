"""Inflated 3D ResNet feature extractor and the RGB classification head.

The network keeps the temporal extent of its input everywhere: conv1 and
pool1 stride only spatially and no stage pools over time, so frame ``t`` of
the output still corresponds to frame ``t`` of the clip.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

STAGE_NAMES = ("res2", "res3", "res4", "res5")


@dataclass
class BackboneConfig:
    blocks: tuple[int, ...] = (3, 4, 6, 3)
    base_channels: int = 64
    expansion: int = 4
    conv1_t: int = 5
    block_t: tuple[int, ...] = (3, 3, 3, 3)
    clip_len: int = 8
    input_size: int = 224
    width_divisor: int = 1
    # running = momentum * running + (1 - momentum) * batch
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.blocks = tuple(self.blocks)
        self.block_t = tuple(self.block_t)
        if len(self.blocks) != 4 or len(self.block_t) != 4:
            raise ValueError("need four stages of blocks and temporal kernels")
        if min(self.blocks) < 1 or self.base_channels < 1 or self.width_divisor < 1:
            raise ValueError("block counts and channel widths must be >= 1")
        if self.base_channels % self.width_divisor:
            raise ValueError("base_channels must be divisible by width_divisor")
        if self.input_size % 32:
            raise ValueError("input_size must be divisible by 32")
        if self.conv1_t % 2 == 0 or any(t % 2 == 0 for t in self.block_t):
            raise ValueError("temporal kernels must be odd to preserve clip length")

    @property
    def width(self) -> int:
        return self.base_channels // self.width_divisor

    @property
    def out_channels(self) -> int:
        return self.width * 8 * self.expansion

    @property
    def feature_size(self) -> int:
        return self.input_size // 32


def _bn3d(c: int, cfg: BackboneConfig) -> nn.BatchNorm3d:
    return nn.BatchNorm3d(c, eps=cfg.bn_eps, momentum=1.0 - cfg.bn_momentum)


class Bottleneck(nn.Module):
    """t x 1 x 1 -> 1 x 3 x 3 (spatial stride) -> 1 x 1 x 1, residual add."""

    def __init__(self, cin: int, width: int, cout: int, stride: int, kt: int, cfg: BackboneConfig):
        super().__init__()
        self.conv1 = nn.Conv3d(cin, width, (kt, 1, 1), padding=(kt // 2, 0, 0), bias=False)
        self.bn1 = _bn3d(width, cfg)
        self.conv2 = nn.Conv3d(width, width, (1, 3, 3), stride=(1, stride, stride),
                               padding=(0, 1, 1), bias=False)
        self.bn2 = _bn3d(width, cfg)
        self.conv3 = nn.Conv3d(width, cout, 1, bias=False)
        self.bn3 = _bn3d(cout, cfg)
        self.downsample = None
        if stride != 1 or cin != cout:
            self.downsample = nn.Sequential(
                nn.Conv3d(cin, cout, 1, stride=(1, stride, stride), bias=False),
                _bn3d(cout, cfg),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        identity = x if self.downsample is None else self.downsample(x)
        return F.relu(out + identity)


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.conv1 = nn.Conv3d(3, w, (cfg.conv1_t, 7, 7), stride=(1, 2, 2),
                               padding=(cfg.conv1_t // 2, 3, 3), bias=False)
        self.bn1 = _bn3d(w, cfg)
        self.pool1 = nn.MaxPool3d((1, 3, 3), stride=(1, 2, 2), padding=(0, 1, 1))
        cin = w
        for i, (name, n, kt) in enumerate(zip(STAGE_NAMES, cfg.blocks, cfg.block_t)):
            width = w * 2 ** i
            cout = width * cfg.expansion
            blocks = []
            for j in range(n):
                stride = 2 if (i > 0 and j == 0) else 1
                blocks.append(Bottleneck(cin, width, cout, stride, kt, cfg))
                cin = cout
            setattr(self, name, nn.Sequential(*blocks))
        self.out_channels = cin

    def forward(self, x, return_stages: bool = False):
        """``x``: (B, 3, T, H, W) -> (B, C, T, H/32, W/32)."""
        stages = {}
        x = F.relu(self.bn1(self.conv1(x)))
        stages["conv1"] = x
        x = self.pool1(x)
        stages["pool1"] = x
        for name in STAGE_NAMES:
            x = getattr(self, name)(x)
            stages[name] = x
        return (x, stages) if return_stages else x


def build_backbone(config: BackboneConfig | None = None) -> Backbone:
    return Backbone(config or BackboneConfig())


class RgbClassifier(nn.Module):
    """Global average pool, dropout, fully connected layer."""

    def __init__(self, in_channels: int, num_classes: int, dropout: float = 0.5):
        super().__init__()
        self.dropout = nn.Dropout(dropout)
        self.fc = nn.Linear(in_channels, num_classes)

    def forward(self, features):
        pooled = features.mean(dim=(2, 3, 4))
        return self.fc(self.dropout(pooled)), pooled


def rgb_classify(features: torch.Tensor, classifier: RgbClassifier, training: bool):
    """Return ``(logits, pooled)`` for features (B, C, T, H, W)."""
    was = classifier.training
    classifier.train(training)
    try:
        return classifier(features)
    finally:
        classifier.train(was)


def rgb_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Cross-entropy averaged over the batch."""
    return F.cross_entropy(logits, labels, reduction="mean")


# --------------------------------------------------------------------------
# 2D -> 3D inflation

def inflate_weights(weights_2d: Mapping[str, np.ndarray],
                    temporal_extents: Mapping[str, int]) -> dict[str, np.ndarray]:
    """Replicate each 2D kernel ``kt`` times along a new time axis, divided by ``kt``.

    ``temporal_extents`` maps convolution weight names to their temporal
    extent; every other tensor is copied unchanged.
    """
    out = {}
    for name, w in weights_2d.items():
        w = np.asarray(w)
        if name in temporal_extents:
            kt = int(temporal_extents[name])
            if w.ndim != 4:
                raise ValueError(f"{name}: expected a 4D 2D-conv kernel, got shape {w.shape}")
            if kt < 1:
                raise ValueError(f"{name}: temporal extent must be >= 1")
            out[name] = np.repeat(w[:, :, None], kt, axis=2) / kt
        else:
            out[name] = w.copy()
    missing = set(temporal_extents) - set(weights_2d)
    if missing:
        raise ValueError(f"no 2D weights for layer(s): {sorted(missing)}")
    return out


def conv_temporal_extents(module: nn.Module) -> dict[str, int]:
    return {f"{name}.weight" if name else "weight": m.kernel_size[0]
            for name, m in module.named_modules() if isinstance(m, nn.Conv3d)}


def load_inflated(module: nn.Module, weights_2d: Mapping[str, np.ndarray], strict: bool = True) -> None:
    """Inflate ``weights_2d`` into ``module``, checking every shape."""
    extents = {k: v for k, v in conv_temporal_extents(module).items() if k in weights_2d}
    inflated = inflate_weights(weights_2d, extents)
    state = module.state_dict()
    for name, arr in inflated.items():
        if name not in state:
            if strict:
                raise ValueError(f"{name}: no such layer in the 3D model")
            continue
        if tuple(state[name].shape) != arr.shape:
            raise ValueError(f"{name}: shape {arr.shape} does not match 3D layer {tuple(state[name].shape)}")
        state[name] = torch.as_tensor(arr, dtype=state[name].dtype)
    module.load_state_dict(state)

