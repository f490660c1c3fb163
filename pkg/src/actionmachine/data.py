"""Turning video records into network-ready clips."""
from __future__ import annotations

import numpy as np
import torch

from . import geometry as geo
from .config import TrainConfig
from .synthdata import VideoRecord

MEAN, STD = 0.5, 0.25


def frame_size(record: VideoRecord) -> tuple[int, int]:
    if record.frame_size is not None:
        return record.frame_size
    f = record.load_frames()
    return f.shape[2], f.shape[1]


def video_box(record: VideoRecord) -> geo.Box:
    w, h = frame_size(record)
    return geo.person_box(record.boxes, w, h)


def to_tensor(clips: np.ndarray) -> torch.Tensor:
    """uint8 (B, T, H, W, 3) -> float (B, 3, T, H, W)."""
    x = torch.from_numpy(np.ascontiguousarray(clips)).float().div_(255.0)
    return x.sub_(MEAN).div_(STD).permute(0, 4, 1, 2, 3).contiguous()


def build_clip(record: VideoRecord, indices, box: geo.Box, size: int, mirror: bool = False):
    """Crop the frames at ``indices`` with ``box``; returns uint8 (T, S, S, 3) and keypoints (T, K, 3)."""
    frames = record.load_frames()
    imgs, kps = [], []
    for i in indices:
        img, kp = geo.crop_resize(frames[i], box, size, size, record.keypoints[i])
        if mirror:
            img = img[:, ::-1]
            kp = geo.flip_keypoints(kp, size)
        imgs.append(img)
        kps.append(kp)
    return np.stack(imgs), np.stack(kps)


def training_clip(record: VideoRecord, cfg: TrainConfig, rng: np.random.Generator):
    """One augmented training clip: random start, box jitter, square crop, random mirror."""
    w, h = frame_size(record)
    start = geo.random_clip_start(record.num_frames, cfg.clip_len, cfg.clip_stride, rng)
    idx = geo.sample_clip(record.num_frames, geo.ClipSpec(cfg.clip_len, cfg.clip_stride, start))
    if cfg.crop == "person_crop":
        box = geo.jitter_box(video_box(record), rng, cfg.jitter_center, cfg.jitter_scale, w, h)
        box = geo.expand_to_aspect(box, w, h)
    else:
        box = geo.random_square_box(w, h, rng, cfg.random_crop_min_scale)
    mirror = bool(cfg.mirror and rng.random() < 0.5)
    return build_clip(record, idx, box, cfg.crop_size, mirror)


def eval_box(record: VideoRecord, cfg: TrainConfig) -> geo.Box:
    w, h = frame_size(record)
    if cfg.crop == "person_crop":
        return geo.expand_to_aspect(video_box(record), w, h)
    return geo.center_square_box(w, h)
