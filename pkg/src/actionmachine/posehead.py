"""Per-frame pose head: heatmaps plus sub-cell offsets.

Cell ``(row, col)`` of a heatmap sits at crop pixel ``(col, row) * cell_stride``.
Offsets are expressed in cell units and stored as ``[dx_1..dx_K, dy_1..dy_K]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

NUM_KEYPOINTS = 17
DISK_RADIUS = 2.0
LAMBDA_HEATMAP = 0.5
LAMBDA_OFFSET = 0.5


@dataclass
class HeatmapStack:
    heatmaps: torch.Tensor   # (B, T, K, H, W)
    offsets: torch.Tensor    # (B, T, 2K, H, W)
    cell_stride: float

    @property
    def num_keypoints(self) -> int:
        return self.heatmaps.shape[2]

    @property
    def dx(self) -> torch.Tensor:
        return self.offsets[:, :, : self.num_keypoints]

    @property
    def dy(self) -> torch.Tensor:
        return self.offsets[:, :, self.num_keypoints:]


@dataclass
class PoseTargets:
    heatmaps: torch.Tensor   # (B, T, K, H, W) in {0, 1}
    offsets: torch.Tensor    # (B, T, 2K, H, W) cell units
    disk: torch.Tensor       # (B, T, K, H, W) bool
    valid: torch.Tensor      # (B, T, K) bool


@dataclass
class DecodedPose:
    keypoints: torch.Tensor    # (..., K, 2) crop pixels
    confidence: torch.Tensor   # (..., K)


class PoseHead(nn.Module):
    """Deconv(4x4, s2) -> BN -> ReLU, repeated, then a 1x1 conv to 3K channels.

    The same 2D head runs on every temporal slice of the backbone features.
    """

    def __init__(self, in_channels: int, num_keypoints: int = NUM_KEYPOINTS,
                 channels: int = 256, num_deconv: int = 2, bn_momentum: float = 0.9):
        super().__init__()
        self.num_keypoints = num_keypoints
        self.num_deconv = num_deconv
        layers = []
        cin = in_channels
        for _ in range(num_deconv):
            layers += [
                nn.ConvTranspose2d(cin, channels, 4, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(channels, momentum=1.0 - bn_momentum),
                nn.ReLU(inplace=True),
            ]
            cin = channels
        self.deconv = nn.Sequential(*layers)
        self.final = nn.Conv2d(cin, 3 * num_keypoints, 1)

    @property
    def upsample(self) -> int:
        return 2 ** self.num_deconv

    def forward(self, features: torch.Tensor, cell_stride: float) -> HeatmapStack:
        b, c, t, h, w = features.shape
        x = features.permute(0, 2, 1, 3, 4).reshape(b * t, c, h, w)
        out = self.final(self.deconv(x))
        out = out.reshape(b, t, 3 * self.num_keypoints, out.shape[-2], out.shape[-1])
        k = self.num_keypoints
        return HeatmapStack(out[:, :, :k], out[:, :, k:], cell_stride)


def pose_head_forward(features: torch.Tensor, head: PoseHead, cell_stride: float) -> HeatmapStack:
    return head(features, cell_stride)


def encode_targets(keypoints: torch.Tensor, grid: tuple[int, int], cell_stride: float,
                   radius: float = DISK_RADIUS) -> PoseTargets:
    """Disk heatmap and offset targets.

    ``keypoints``: (..., K, 3) crop pixels with a visibility flag, where the
    leading dims are typically (B, T).  Cells within ``radius`` (cell units)
    of a visible keypoint get heatmap 1 and offset ``keypoint - cell``.
    """
    keypoints = torch.as_tensor(keypoints)
    if not keypoints.is_floating_point():
        keypoints = keypoints.double()
    gh, gw = grid
    loc = keypoints[..., :2] / cell_stride                     # (..., K, 2)
    valid = keypoints[..., 2] > 0
    rows = torch.arange(gh, dtype=loc.dtype).view(gh, 1)
    cols = torch.arange(gw, dtype=loc.dtype).view(1, gw)
    dx = loc[..., 0, None, None] - cols                        # (..., K, gh, gw)
    dy = loc[..., 1, None, None] - rows
    disk = (dx * dx + dy * dy <= radius * radius) & valid[..., None, None]
    heat = disk.to(loc.dtype)
    offsets = torch.cat([dx * heat, dy * heat], dim=-3)
    return PoseTargets(heat, offsets, disk, valid)


def smooth_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return F.smooth_l1_loss(a, b, reduction="none", beta=1.0)


def _frames(t: torch.Tensor) -> int:
    return t.shape[0] * t.shape[1]


def heatmap_loss(pred: HeatmapStack, targets: PoseTargets) -> torch.Tensor:
    """(1/K) sum over keypoints and cells of smooth-L1, averaged over frames."""
    k = pred.num_keypoints
    r = smooth_l1(pred.heatmaps, targets.heatmaps.to(pred.heatmaps.dtype))
    r = r * targets.valid[..., None, None].to(r.dtype)
    return r.sum() / (k * _frames(pred.heatmaps))


def offset_loss(pred: HeatmapStack, targets: PoseTargets) -> torch.Tensor:
    """Smooth-L1 on both offset channels, restricted to the disk around each keypoint."""
    k = pred.num_keypoints
    t = targets.offsets.to(pred.offsets.dtype)
    mask = targets.disk.to(pred.offsets.dtype)
    r = smooth_l1(pred.dx, t[:, :, :k]) + smooth_l1(pred.dy, t[:, :, k:])
    return (r * mask).sum() / (k * _frames(pred.heatmaps))


def pose_loss(pred: HeatmapStack, targets: PoseTargets, lambda_h: float = LAMBDA_HEATMAP,
              lambda_o: float = LAMBDA_OFFSET) -> torch.Tensor:
    return lambda_h * heatmap_loss(pred, targets) + lambda_o * offset_loss(pred, targets)


def decode_keypoints(pred: HeatmapStack) -> DecodedPose:
    """Argmax cell plus its offset, scaled to crop pixels.

    Ties go to the lowest row-major index.  Confidence is the ReLU of the
    heatmap maximum.  The result carries no gradient.
    """
    with torch.no_grad():
        heat = pred.heatmaps
        h, w = heat.shape[-2:]
        flat = heat.flatten(-2)
        peak = flat.amax(dim=-1)
        # first index attaining the peak
        idx = (flat == peak[..., None]).to(torch.uint8).argmax(dim=-1)
        row = torch.div(idx, w, rounding_mode="floor")
        col = idx % w
        dx = pred.dx.flatten(-2).gather(-1, idx[..., None])[..., 0]
        dy = pred.dy.flatten(-2).gather(-1, idx[..., None])[..., 0]
        x = (col.to(heat.dtype) + dx) * pred.cell_stride
        y = (row.to(heat.dtype) + dy) * pred.cell_stride
        return DecodedPose(torch.stack([x, y], dim=-1), F.relu(peak))
