"""Pose-sequence classifier: a stride-free, pooling-free 2D ResNet over T x K."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .posehead import DecodedPose

MIN_EXTENT = 3


@dataclass
class PoseCnnConfig:
    blocks: tuple[int, ...] = (2, 2, 2, 2)
    base_channels: int = 64
    width_divisor: int = 1
    num_classes: int = 4
    dropout: float = 0.5

    def __post_init__(self):
        self.blocks = tuple(self.blocks)
        if not self.blocks or min(self.blocks) < 1:
            raise ValueError("pose CNN block counts must be >= 1")
        if self.base_channels % self.width_divisor:
            raise ValueError("base_channels must be divisible by width_divisor")

    @property
    def feature_dim(self) -> int:
        return self.base_channels // self.width_divisor * 2 ** (len(self.blocks) - 1)


def build_pose_tensor(poses: DecodedPose, crop_w: float, crop_h: float) -> torch.Tensor:
    """(B, T, K) poses -> (B, 3, T, K) of normalized x, y and confidence.

    The tensor is detached: the classifier never sends gradient into decoding.
    """
    kp = poses.keypoints.detach()
    x = 2.0 * kp[..., 0] / crop_w - 1.0
    y = 2.0 * kp[..., 1] / crop_h - 1.0
    conf = poses.confidence.detach()
    return torch.stack([x, y, conf], dim=-3)


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, bn_momentum: float = 0.9):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout, momentum=1.0 - bn_momentum)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout, momentum=1.0 - bn_momentum)
        self.shortcut = None
        if cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, bias=False),
                                          nn.BatchNorm2d(cout, momentum=1.0 - bn_momentum))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + (x if self.shortcut is None else self.shortcut(x)))


class PoseCNN(nn.Module):
    def __init__(self, cfg: PoseCnnConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.base_channels // cfg.width_divisor
        self.stem = nn.Sequential(nn.Conv2d(3, w, 3, padding=1, bias=False),
                                  nn.BatchNorm2d(w, momentum=0.1), nn.ReLU(inplace=True))
        stages = []
        cin = w
        for i, n in enumerate(cfg.blocks):
            cout = w * 2 ** i
            stages.append(nn.Sequential(*[BasicBlock(cin if j == 0 else cout, cout) for j in range(n)]))
            cin = cout
        self.stages = nn.ModuleList(stages)
        self.dropout = nn.Dropout(cfg.dropout)
        self.fc = nn.Linear(cin, cfg.num_classes)

    def forward(self, x: torch.Tensor, return_stages: bool = False):
        if x.shape[-2] < MIN_EXTENT or x.shape[-1] < MIN_EXTENT:
            raise ValueError(f"pose tensor {tuple(x.shape[-2:])} smaller than the {MIN_EXTENT}x{MIN_EXTENT} kernel")
        outs = []
        x = self.stem(x)
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        feat = x.mean(dim=(2, 3))
        logits = self.fc(self.dropout(feat))
        return (logits, feat, outs) if return_stages else logits


def build_pose_cnn(cfg: PoseCnnConfig | None = None) -> PoseCNN:
    return PoseCNN(cfg or PoseCnnConfig())


def pose_cnn_forward(tensor: torch.Tensor, model: PoseCNN, training: bool) -> torch.Tensor:
    was = model.training
    model.train(training)
    try:
        return model(tensor)
    finally:
        model.train(was)


def pose_action_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, labels, reduction="mean")
