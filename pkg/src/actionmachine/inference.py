"""Test-time protocol, metrics and visualizations."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
import torch

from . import geometry as geo
from .config import TrainConfig
from .data import build_clip, eval_box, frame_size, to_tensor
from .model import ActionMachine
from .posehead import decode_keypoints
from .synthdata import LIMBS, VideoRecord

OKS_THRESHOLDS = np.round(np.arange(0.5, 0.951, 0.05), 2)
SYNTH_KAPPA = 0.08
COCO_KAPPAS = np.array([.26, .25, .25, .35, .35, .79, .79, .72, .72, .62, .62,
                        1.07, 1.07, .87, .87, .89, .89]) / 10.0


def three_crop_boxes(box: geo.Box, frame_w: float | None = None,
                     frame_h: float | None = None) -> list[geo.Box]:
    """Boxes centred at ``c - d``, ``c``, ``c + d`` with ``d = (side/4, side/4)``.

    Every box keeps the input size; with a frame given, shifted boxes are
    translated back inside it.
    """
    cx, cy = box.center
    w, h = box.width, box.height
    d = max(w, h) / 4
    out = []
    for k in (-1, 0, 1):
        b = geo.Box.from_center(cx + k * d, cy + k * d, w, h)
        if frame_w is not None and frame_h is not None:
            dx = max(0.0, -b.x0) - max(0.0, b.x1 - frame_w)
            dy = max(0.0, -b.y0) - max(0.0, b.y1 - frame_h)
            b = geo.Box(b.x0 + dx, b.y0 + dy, b.x1 + dx, b.y1 + dy)
            if b.width > frame_w or b.height > frame_h:
                b = b.clamp(frame_w, frame_h)
        out.append(b)
    return out


@dataclass
class PoseInstance:
    keypoints: np.ndarray   # (K, 2) predicted, frame pixels
    gt: np.ndarray          # (K, 3) ground truth, frame pixels
    area: float
    score: float


@dataclass
class VideoEvaluation:
    fused: np.ndarray
    rgb: np.ndarray
    pose: np.ndarray | None = None
    instances: list[PoseInstance] = field(default_factory=list)

    @property
    def prediction(self) -> int:
        return int(np.argmax(self.fused))


def fuse(p_rgb: np.ndarray, p_pose: np.ndarray | None) -> np.ndarray:
    """Sum of stream probabilities; not renormalized."""
    return p_rgb if p_pose is None else p_rgb + p_pose


@torch.no_grad()
def evaluate_video(record: VideoRecord, model: ActionMachine, cfg: TrainConfig | None = None,
                   collect_poses: bool = True) -> VideoEvaluation:
    """Average softmax scores over evenly spaced clips and three crops per clip."""
    cfg = cfg or model.cfg
    if record.num_frames < 1:
        raise ValueError(f"{record.video_dir}: video has no frames")
    model.eval()
    w, h = frame_size(record)
    base = eval_box(record, cfg)
    boxes = three_crop_boxes(base, w, h) if cfg.test_crops == 3 else [base]
    starts = geo.evenly_spaced_starts(record.num_frames, cfg.clip_len, cfg.clip_stride, cfg.test_clips)
    clips, kps, meta = [], [], []
    for s in starts:
        idx = geo.sample_clip(record.num_frames, geo.ClipSpec(cfg.clip_len, cfg.clip_stride, s))
        for j, b in enumerate(boxes):
            c, k = build_clip(record, idx, b, cfg.crop_size)
            clips.append(c)
            kps.append(k)
            meta.append((idx, b, j == len(boxes) // 2))
    out = model(to_tensor(np.stack(clips)))
    p_rgb = torch.softmax(out.rgb_logits.double(), -1).mean(0).numpy()
    p_pose = None
    if out.pose_logits is not None:
        p_pose = torch.softmax(out.pose_logits.double(), -1).mean(0).numpy()
    result = VideoEvaluation(fuse(p_rgb, p_pose), p_rgb, p_pose)
    if collect_poses and out.pose is not None:
        dec = out.decoded if out.decoded is not None else decode_keypoints(out.pose)
        kp = dec.keypoints.double().numpy()
        conf = dec.confidence.double().numpy()
        for n, (idx, b, central) in enumerate(meta):
            if not central:
                continue
            frame_kp = geo.crop_to_frame(kp[n], b, cfg.crop_size, cfg.crop_size)
            for t, fi in enumerate(idx):
                gt_box = record.boxes[fi]
                area = float((gt_box[2] - gt_box[0]) * (gt_box[3] - gt_box[1]))
                result.instances.append(PoseInstance(frame_kp[t], record.keypoints[fi],
                                                     area, float(conf[n, t].mean())))
    return result


def top1_accuracy(predictions: Sequence, labels: Sequence[int]) -> float:
    """Fraction of rows whose argmax equals the label."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("top-1 accuracy of an empty set")
    preds = np.asarray(predictions)
    if len(preds) != len(labels):
        raise ValueError("predictions and labels differ in length")
    return float(np.mean(preds.argmax(axis=-1) == labels))


# --------------------------------------------------------------------------
# object keypoint similarity

def oks(pred: np.ndarray, gt: np.ndarray, area: float, kappas=SYNTH_KAPPA) -> float:
    """``sum_k exp(-d_k^2 / (2 s^2 kappa_k^2)) v_k / sum_k v_k`` with ``s^2 = area``."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    v = (gt[:, 2] > 0).astype(np.float64)
    if v.sum() == 0:
        return float("nan")
    kappas = np.broadcast_to(np.asarray(kappas, dtype=np.float64), v.shape)
    d2 = ((pred[:, :2] - gt[:, :2]) ** 2).sum(axis=1)
    e = np.exp(-d2 / (2.0 * area * kappas ** 2 + np.spacing(1)))
    return float((e * v).sum() / v.sum())


def average_precision(matched: np.ndarray, scores: np.ndarray, num_gt: int) -> float:
    """COCO-style 101-point interpolated AP for a score-ranked match list."""
    if num_gt == 0:
        return float("nan")
    order = np.argsort(-scores, kind="mergesort")
    tp = np.cumsum(matched[order]).astype(np.float64)
    fp = np.cumsum(~matched[order]).astype(np.float64)
    precision = tp / np.maximum(tp + fp, np.spacing(1))
    # precision envelope: non-increasing from the right
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    # recall >= j/100 compared in integers, so 35/50 reaches the 0.70 point exactly
    idx = np.searchsorted(100 * tp.astype(np.int64), np.arange(101) * num_gt, side="left")
    q = np.zeros(101)
    ok = idx < len(precision)
    q[ok] = precision[idx[ok]]
    return float(q.mean())


def oks_ap(pred_poses, gt_poses, areas, scores=None, kappas=SYNTH_KAPPA,
           thresholds=OKS_THRESHOLDS) -> float:
    """Mean AP over OKS thresholds, one prediction per ground-truth person."""
    pred_poses = np.asarray(pred_poses, dtype=np.float64)
    gt_poses = np.asarray(gt_poses, dtype=np.float64)
    areas = np.asarray(areas, dtype=np.float64)
    if not (len(pred_poses) == len(gt_poses) == len(areas)):
        raise ValueError("pred_poses, gt_poses and areas must have equal length")
    scores = np.ones(len(pred_poses)) if scores is None else np.asarray(scores, dtype=np.float64)
    if len(scores) != len(pred_poses):
        raise ValueError("one score per prediction required")
    sims = np.array([oks(p, g, a, kappas) for p, g, a in zip(pred_poses, gt_poses, areas)])
    keep = ~np.isnan(sims)
    sims, scores = sims[keep], scores[keep]
    aps = [average_precision(sims >= t, scores, len(sims)) for t in thresholds]
    return float(np.mean(aps))


# --------------------------------------------------------------------------
# class activation maps

def compute_cam(features: torch.Tensor, weight: torch.Tensor, class_id: int,
                normalize: bool = True) -> torch.Tensor:
    """Per-frame class activation map from features (C, T, H, W) and ``W_c``."""
    if not 0 <= class_id < weight.shape[0]:
        raise IndexError(f"class {class_id} outside [0, {weight.shape[0]})")
    cam = torch.einsum("c,cthw->thw", weight[class_id].to(features.dtype), features)
    if normalize:
        lo = cam.amin(dim=(1, 2), keepdim=True)
        hi = cam.amax(dim=(1, 2), keepdim=True)
        cam = (cam - lo) / (hi - lo).clamp_min(1e-12)
    return cam


# --------------------------------------------------------------------------
# dataset report and overlays

def evaluate_records(records: list[VideoRecord], model: ActionMachine,
                     cfg: TrainConfig | None = None) -> dict:
    """Evaluation report: top-1 per stream and fused, OKS mAP, per-class accuracy."""
    cfg = cfg or model.cfg
    if not records:
        raise ValueError("no videos to evaluate")
    evals = [evaluate_video(r, model, cfg) for r in records]
    labels = np.array([r.label for r in records])
    fused = np.stack([e.fused for e in evals])
    report = {"top1_rgb": top1_accuracy(np.stack([e.rgb for e in evals]), labels)}
    if model.pose_cnn is not None:
        report["top1_pose"] = top1_accuracy(np.stack([e.pose for e in evals]), labels)
    report["top1_fused"] = top1_accuracy(fused, labels)
    if model.pose_head is not None:
        inst = [i for e in evals for i in e.instances]
        report["oks_map"] = oks_ap([i.keypoints for i in inst], [i.gt for i in inst],
                                   [i.area for i in inst], [i.score for i in inst])
    pred = fused.argmax(axis=1)
    report["per_class_accuracy"] = {
        str(c): (float(np.mean(pred[labels == c] == c)) if (labels == c).any() else None)
        for c in range(cfg.num_classes)
    }
    return report


def write_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _chunks(num_frames: int, length: int) -> list[list[int]]:
    return [[min(s + i, num_frames - 1) for i in range(length)] for s in range(0, num_frames, length)]


def _video_chunks(record: VideoRecord, model: ActionMachine):
    """Yield (frame indices, crop uint8 clip, model outputs) covering every frame once."""
    cfg = model.cfg
    box = eval_box(record, cfg)
    model.eval()
    for idx in _chunks(record.num_frames, cfg.clip_len):
        clip, _ = build_clip(record, idx, box, cfg.crop_size)
        with torch.no_grad():
            out = model(to_tensor(clip[None]))
        n_real = len(dict.fromkeys(idx))
        yield idx[:n_real], clip[:n_real], out


def draw_skeleton(img: np.ndarray, keypoints: np.ndarray, color=(255, 60, 60)) -> np.ndarray:
    out = img.copy()
    pts = [(int(round(x)), int(round(y))) for x, y in keypoints[:, :2]]
    for a, b in LIMBS:
        cv2.line(out, pts[a], pts[b], color, 1, cv2.LINE_AA)
    for p in pts:
        cv2.circle(out, p, 2, (255, 255, 0), -1, cv2.LINE_AA)
    return out


def cam_overlay(img: np.ndarray, cam: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    h, w = img.shape[:2]
    heat = cv2.resize((cam * 255).astype(np.uint8), (w, h), interpolation=cv2.INTER_LINEAR)
    heat = cv2.cvtColor(cv2.applyColorMap(heat, cv2.COLORMAP_JET), cv2.COLOR_BGR2RGB)
    return cv2.addWeighted(img, 1 - alpha, heat, alpha, 0)


def _write_rgb(path: Path, img: np.ndarray) -> None:
    if not cv2.imwrite(str(path), cv2.cvtColor(np.ascontiguousarray(img), cv2.COLOR_RGB2BGR)):
        raise OSError(f"cannot write {path}")


def export_pose_overlays(record: VideoRecord, model: ActionMachine, out_dir) -> list[Path]:
    """One PNG per frame: decoded skeleton over the person crop."""
    if model.pose_head is None:
        raise ValueError("model has no pose head")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for idx, clip, out in _video_chunks(record, model):
        kp = decode_keypoints(out.pose).keypoints[0].numpy()
        for t, fi in enumerate(idx):
            path = out_dir / f"pose_{fi:06d}.png"
            _write_rgb(path, draw_skeleton(clip[t], kp[t]))
            written.append(path)
    return written


def export_cam_overlays(record: VideoRecord, model: ActionMachine, class_id: int, out_dir) -> list[Path]:
    """One PNG per frame: normalized CAM of ``class_id`` blended over the person crop."""
    n = model.cfg.num_classes
    if not 0 <= class_id < n:
        raise IndexError(f"class {class_id} out of range; valid classes are 0..{n - 1}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    weight = model.rgb_head.fc.weight.detach()
    written = []
    for idx, clip, out in _video_chunks(record, model):
        cam = compute_cam(out.features[0], weight, class_id).numpy()
        for t, fi in enumerate(idx):
            path = out_dir / f"cam_{fi:06d}.png"
            _write_rgb(path, cam_overlay(clip[t], cam[t]))
            written.append(path)
    return written
