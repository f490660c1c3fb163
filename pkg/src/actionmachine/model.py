"""The full network: backbone, RGB head, optional pose head and pose classifier."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .backbone import Backbone, RgbClassifier
from .config import TrainConfig
from .poseaction import PoseCNN, build_pose_tensor
from .posehead import DecodedPose, HeatmapStack, PoseHead, decode_keypoints


@dataclass
class Outputs:
    features: torch.Tensor
    rgb_logits: torch.Tensor
    pooled: torch.Tensor
    pose: HeatmapStack | None = None
    decoded: DecodedPose | None = None
    pose_tensor: torch.Tensor | None = None
    pose_logits: torch.Tensor | None = None


class ActionMachine(nn.Module):
    def __init__(self, cfg: TrainConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg.backbone_config())
        self.rgb_head = RgbClassifier(self.backbone.out_channels, cfg.num_classes, cfg.dropout)
        self.pose_head = None
        self.pose_cnn = None
        if cfg.has_pose_head:
            self.pose_head = PoseHead(self.backbone.out_channels, cfg.num_keypoints,
                                      cfg.head_channels, cfg.num_deconv)
        if cfg.has_pose_cnn:
            self.pose_cnn = PoseCNN(cfg.pose_cnn_config())

    @property
    def heatmap_size(self) -> int:
        return self.cfg.crop_size // 32 * 2 ** self.cfg.num_deconv

    @property
    def cell_stride(self) -> float:
        return self.cfg.crop_size / self.heatmap_size

    def forward(self, clips: torch.Tensor) -> Outputs:
        """``clips``: (B, 3, T, S, S) normalized crops."""
        features = self.backbone(clips)
        logits, pooled = self.rgb_head(features)
        out = Outputs(features, logits, pooled)
        if self.pose_head is not None:
            out.pose = self.pose_head(features, self.cell_stride)
            if self.pose_cnn is not None:
                out.decoded = decode_keypoints(out.pose)
                s = self.cfg.crop_size
                # (B, T, K) -> (B, 3, T, K), detached
                out.pose_tensor = build_pose_tensor(out.decoded, s, s)
                out.pose_logits = self.pose_cnn(out.pose_tensor)
        return out

    def frozen_modules(self) -> list[nn.Module]:
        """Modules held fixed when only the pose classifier is trained."""
        if self.cfg.train_pose_cnn_only:
            return [m for m in (self.backbone, self.rgb_head, self.pose_head) if m is not None]
        return []

    def train(self, mode: bool = True):
        super().train(mode)
        for m in self.frozen_modules():
            m.train(False)
        return self


def build_model(cfg: TrainConfig) -> ActionMachine:
    model = ActionMachine(cfg)
    for m in model.frozen_modules():
        for p in m.parameters():
            p.requires_grad_(False)
    return model
