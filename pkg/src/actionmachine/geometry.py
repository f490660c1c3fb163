"""Box arithmetic, person cropping, clip sampling and keypoint-aware augmentation.

Keypoints are carried as float arrays of shape ``(..., K, 3)`` holding
``(x, y, visible)`` in pixel coordinates of whatever image they refer to.
Pixel ``(i, j)`` covers the continuous square ``[j, j+1) x [i, i+1)``, so its
center sits at ``(j + 0.5, i + 0.5)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import cv2
import numpy as np

# COCO ordering: nose, eyes, ears, shoulders, elbows, wrists, hips, knees, ankles
COCO_KEYPOINTS = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)
COCO_FLIP_PERM = (0, 2, 1, 4, 3, 6, 5, 8, 7, 10, 9, 12, 11, 14, 13, 16, 15)

# per-box confidence threshold for detections read from annotations
DETECTION_THRESHOLD = 0.99


@dataclass(frozen=True)
class Box:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x0, self.y0, self.x1, self.y1)):
            raise ValueError(f"non-finite box coordinates: {self}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)

    def is_valid(self) -> bool:
        return self.x0 < self.x1 and self.y0 < self.y1

    def clamp(self, frame_w: float, frame_h: float) -> "Box":
        return Box(
            min(max(self.x0, 0.0), frame_w),
            min(max(self.y0, 0.0), frame_h),
            min(max(self.x1, 0.0), frame_w),
            min(max(self.y1, 0.0), frame_h),
        )

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "Box":
        return cls(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)


@dataclass(frozen=True)
class ClipSpec:
    length: int = 8
    stride: int = 1
    start: int = 0

    def __post_init__(self):
        if self.length < 1 or self.stride < 1 or self.start < 0:
            raise ValueError(f"invalid clip spec: {self}")

    @property
    def span(self) -> int:
        return (self.length - 1) * self.stride + 1


def merge_boxes(boxes: Sequence[Box], frame_w: float, frame_h: float) -> Box:
    """Smallest box enclosing every input box, clamped to the frame.

    With no boxes at all the full frame is returned.
    """
    if not boxes:
        return Box(0.0, 0.0, float(frame_w), float(frame_h))
    merged = Box(
        min(b.x0 for b in boxes),
        min(b.y0 for b in boxes),
        max(b.x1 for b in boxes),
        max(b.y1 for b in boxes),
    )
    return merged.clamp(frame_w, frame_h)


def person_box(detections: np.ndarray, frame_w: float, frame_h: float,
               threshold: float = DETECTION_THRESHOLD) -> Box:
    """Shared per-video box from per-frame ``[x0, y0, x1, y1, conf]`` rows."""
    detections = np.asarray(detections, dtype=np.float64).reshape(-1, 5)
    keep = detections[detections[:, 4] >= threshold]
    return merge_boxes([Box(*map(float, row[:4])) for row in keep], frame_w, frame_h)


def expand_to_aspect_unclamped(box: Box) -> Box:
    cx, cy = box.center
    side = max(box.width, box.height)
    return Box.from_center(cx, cy, side, side)


def expand_to_aspect(box: Box, frame_w: float, frame_h: float) -> Box:
    """Grow the shorter side about the center until square, then clamp."""
    return expand_to_aspect_unclamped(box).clamp(frame_w, frame_h)


def jitter_box(box: Box, rng: np.random.Generator, max_center_frac: float,
               max_scale_frac: float, frame_w: float, frame_h: float) -> Box:
    """Random center shift and independent width/height rescale.

    Draws exactly four values ``u = rng.uniform(-1, 1, 4)``: the center moves
    by ``u[0] * max_center_frac * w`` and ``u[1] * max_center_frac * h``, and
    the sides are scaled by ``1 + u[2] * max_scale_frac`` and
    ``1 + u[3] * max_scale_frac``.
    """
    if not (0 <= max_center_frac < 1 and 0 <= max_scale_frac < 1):
        raise ValueError("jitter fractions must lie in [0, 1)")
    u = rng.uniform(-1.0, 1.0, 4)
    if max_center_frac == 0 and max_scale_frac == 0:
        return box
    cx, cy = box.center
    w, h = box.width, box.height
    cx += u[0] * max_center_frac * w
    cy += u[1] * max_center_frac * h
    w *= 1.0 + u[2] * max_scale_frac
    h *= 1.0 + u[3] * max_scale_frac
    return Box.from_center(cx, cy, w, h).clamp(frame_w, frame_h)


def random_square_box(frame_w: float, frame_h: float, rng: np.random.Generator,
                      min_scale: float = 0.8) -> Box:
    """Random square crop for the scene-level baseline."""
    side = min(frame_w, frame_h) * rng.uniform(min_scale, 1.0)
    x0 = rng.uniform(0.0, frame_w - side)
    y0 = rng.uniform(0.0, frame_h - side)
    return Box(x0, y0, x0 + side, y0 + side)


def center_square_box(frame_w: float, frame_h: float) -> Box:
    side = min(frame_w, frame_h)
    return Box.from_center(frame_w / 2, frame_h / 2, side, side)


def crop_affine(box: Box, out_w: int, out_h: int) -> tuple[float, float, float, float]:
    """``(sx, sy, tx, ty)`` with ``crop = (frame - (tx, ty)) * (sx, sy)``."""
    return out_w / box.width, out_h / box.height, box.x0, box.y0


def frame_to_crop(points: np.ndarray, box: Box, out_w: int, out_h: int) -> np.ndarray:
    sx, sy, tx, ty = crop_affine(box, out_w, out_h)
    out = np.array(points, dtype=np.float64, copy=True)
    out[..., 0] = (out[..., 0] - tx) * sx
    out[..., 1] = (out[..., 1] - ty) * sy
    return out


def crop_to_frame(points: np.ndarray, box: Box, out_w: int, out_h: int) -> np.ndarray:
    sx, sy, tx, ty = crop_affine(box, out_w, out_h)
    out = np.array(points, dtype=np.float64, copy=True)
    out[..., 0] = out[..., 0] / sx + tx
    out[..., 1] = out[..., 1] / sy + ty
    return out


def crop_resize(frame: np.ndarray, box: Box, out_w: int, out_h: int,
                keypoints: np.ndarray | None = None):
    """Bilinear resample of ``box`` to ``out_w x out_h``.

    Returns ``(image, keypoints)``; keypoints are mapped by the same affine
    transform and those landing outside the crop get ``visible = 0``.
    """
    if not box.is_valid():
        raise ValueError(f"degenerate crop box {box}")
    sx, sy, tx, ty = crop_affine(box, out_w, out_h)
    # dst pixel index j has center j+0.5 -> src continuous x0 + (j+0.5)/sx -> src index -0.5
    m = np.array([[1.0 / sx, 0.0, tx + 0.5 / sx - 0.5],
                  [0.0, 1.0 / sy, ty + 0.5 / sy - 0.5]])
    image = cv2.warpAffine(frame, m, (out_w, out_h),
                           flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
                           borderMode=cv2.BORDER_REPLICATE)
    if keypoints is None:
        return image, None
    kps = frame_to_crop(keypoints, box, out_w, out_h)
    inside = ((kps[..., 0] >= 0) & (kps[..., 0] <= out_w)
              & (kps[..., 1] >= 0) & (kps[..., 1] <= out_h))
    kps[..., 2] = np.where(inside & (kps[..., 2] > 0), 1.0, 0.0)
    return image, kps


def flip_keypoints(keypoints: np.ndarray, width: float,
                   perm: Sequence[int] = COCO_FLIP_PERM) -> np.ndarray:
    out = np.array(keypoints, dtype=np.float64, copy=True)
    out[..., 0] = width - out[..., 0]
    return out[..., list(perm), :]


def sample_clip(num_frames: int, spec: ClipSpec) -> list[int]:
    """Frame indices of one clip; indices past the end repeat the last frame."""
    if num_frames < 1:
        raise ValueError("video has no frames")
    last = num_frames - 1
    return [min(spec.start + i * spec.stride, last) for i in range(spec.length)]


def evenly_spaced_starts(num_frames: int, length: int, stride: int, num_clips: int = 10) -> list[int]:
    """Evenly spaced clip starts: ``floor(i * (num_frames - span) / (num_clips - 1))``."""
    span = (length - 1) * stride + 1
    room = max(num_frames - span, 0)
    if num_clips == 1:
        return [room // 2]
    return [(i * room) // (num_clips - 1) for i in range(num_clips)]


def random_clip_start(num_frames: int, length: int, stride: int, rng: np.random.Generator) -> int:
    span = (length - 1) * stride + 1
    return int(rng.integers(0, max(num_frames - span, 0) + 1))
