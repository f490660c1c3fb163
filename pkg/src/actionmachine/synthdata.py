"""Synthetic stick-figure action videos with exact keypoints and scene bias.

Each video shows one 17-joint figure (COCO joint order) performing an action
that is distinguishable only from joint trajectories.  With ``bias_mode="scene"``
a static background object whose shape and color depend on the label is drawn
away from the figure; ``"scene_swapped"`` draws the object of the next class
instead, so a model that learned the shortcut is punished.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .geometry import Box

log = logging.getLogger(__name__)

ACTIONS = ("raise_arms", "wave", "squat", "walk", "jumping_jack", "bow")
BIAS_MODES = ("none", "scene", "scene_swapped")
NUM_KEYPOINTS = 17

# (shape, BGR color) per scene class
SCENE_OBJECTS = (
    ("rect", (40, 40, 220)),
    ("circle", (40, 200, 40)),
    ("triangle", (220, 60, 30)),
    ("diamond", (30, 220, 230)),
    ("cross", (200, 40, 200)),
    ("ring", (210, 210, 40)),
)

LIMBS = (
    (5, 7), (7, 9), (6, 8), (8, 10),
    (11, 13), (13, 15), (12, 14), (14, 16),
    (5, 6), (11, 12), (5, 11), (6, 12),
)

_SPLIT_IDS = {"train": 0, "test": 1}


class DatasetError(Exception):
    pass


@dataclass
class SynthConfig:
    num_train: int = 40
    num_test: int = 0
    num_classes: int = 4
    frames: int = 32
    frame_w: int = 320
    frame_h: int = 240
    num_keypoints: int = NUM_KEYPOINTS
    bias_mode: str = "none"
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.num_classes <= len(ACTIONS):
            raise ValueError(f"num_classes must be in [2, {len(ACTIONS)}]")
        if self.num_keypoints != NUM_KEYPOINTS:
            raise ValueError("the stick figure has exactly 17 joints")
        if self.bias_mode not in BIAS_MODES:
            raise ValueError(f"bias_mode must be one of {BIAS_MODES}")
        if self.frames < 1:
            raise ValueError("frames must be >= 1")


@dataclass
class VideoRecord:
    video_dir: Path
    frame_paths: list[Path]
    boxes: np.ndarray          # (F, 5) x0, y0, x1, y1, conf
    keypoints: np.ndarray      # (F, K, 3) x, y, visible in frame pixels
    label: int
    split: str = "train"
    frame_size: tuple[int, int] | None = None  # (w, h)
    scene_object: int | None = None
    _frames: np.ndarray | None = field(default=None, repr=False)

    @property
    def num_frames(self) -> int:
        return len(self.frame_paths)

    def load_frames(self, cache: bool = True) -> np.ndarray:
        """All frames as a uint8 RGB array ``(F, H, W, 3)``."""
        if self._frames is not None:
            return self._frames
        frames = []
        for p in self.frame_paths:
            img = cv2.imread(str(p), cv2.IMREAD_COLOR)
            if img is None:
                raise DatasetError(f"cannot read frame {p}")
            frames.append(cv2.cvtColor(img, cv2.COLOR_BGR2RGB))
        arr = np.stack(frames)
        if cache:
            self._frames = arr
        return arr


@dataclass
class DatasetManifest:
    root: Path
    records: list[VideoRecord]

    def split(self, name: str) -> list[VideoRecord]:
        return [r for r in self.records if r.split == name]

    def __len__(self) -> int:
        return len(self.records)


# --------------------------------------------------------------------------
# figure kinematics (body coordinates: origin mid-hip, y up, unit = figure height)

def _polar(angle: float, length: float) -> np.ndarray:
    # angle measured from straight down, positive towards +x
    return np.array([math.sin(angle) * length, -math.cos(angle) * length])


@dataclass
class _Motion:
    action: str
    period: float
    phase: float
    amp: float


def _pose(m: _Motion, t: float) -> np.ndarray:
    """Joint positions (17, 2) in body coordinates at frame ``t``."""
    phi = 2 * math.pi * t / m.period + m.phase
    c = 0.5 * (1 - math.cos(phi))           # 0..1 smooth cycle
    s = math.sin(phi)
    a = m.amp

    # defaults: standing, arms hanging slightly out
    arm = {"l": (0.15, 0.1), "r": (0.15, 0.1)}   # (shoulder abduction, elbow bend)
    leg = {"l": (0.08, 0.0), "r": (0.08, 0.0)}   # (hip abduction, knee bend)
    lift = {"l": 0.0, "r": 0.0}                  # foreshortening of the thigh
    drop = 0.0
    torso_scale = 1.0

    if m.action == "raise_arms":
        ang = 0.2 + a * 2.5 * c
        arm = {"l": (ang, 0.1), "r": (ang, 0.1)}
    elif m.action == "wave":
        arm["r"] = (2.3, 0.3 + a * 1.1 * c)
    elif m.action == "squat":
        bend = a * 0.9 * c
        leg = {"l": (0.08 + bend, 2 * bend), "r": (0.08 + bend, 2 * bend)}
        drop = 0.18 * a * c
        arm = {"l": (0.15 + 1.2 * a * c, 0.1), "r": (0.15 + 1.2 * a * c, 0.1)}
    elif m.action == "walk":
        lift = {"l": 0.45 * a * max(s, 0.0), "r": 0.45 * a * max(-s, 0.0)}
        arm = {"l": (0.15 + 0.35 * a * max(-s, 0.0), 0.4 * a * max(-s, 0.0)),
               "r": (0.15 + 0.35 * a * max(s, 0.0), 0.4 * a * max(s, 0.0))}
    elif m.action == "jumping_jack":
        arm = {"l": (0.2 + a * 2.3 * c, 0.1), "r": (0.2 + a * 2.3 * c, 0.1)}
        leg = {"l": (0.08 + a * 0.35 * c, 0.0), "r": (0.08 + a * 0.35 * c, 0.0)}
    elif m.action == "bow":
        torso_scale = 1.0 - 0.45 * a * c
        arm = {"l": (0.15 + 0.4 * a * c, 0.3 * c), "r": (0.15 + 0.4 * a * c, 0.3 * c)}
    else:  # pragma: no cover
        raise ValueError(m.action)

    j = np.zeros((NUM_KEYPOINTS, 2))
    hip_half, sh_half = 0.09, 0.12
    torso, neck = 0.30 * torso_scale, 0.13 * torso_scale
    upper_arm, forearm, thigh, shin = 0.17, 0.16, 0.24, 0.24
    base = np.array([0.0, -drop])
    j[11] = base + [hip_half, 0.0]
    j[12] = base + [-hip_half, 0.0]
    j[5] = base + [sh_half, torso]
    j[6] = base + [-sh_half, torso]
    nose = base + [0.0, torso + neck]
    j[0] = nose
    j[1] = nose + [0.03, 0.025]
    j[2] = nose + [-0.03, 0.025]
    j[3] = nose + [0.065, 0.0]
    j[4] = nose + [-0.065, 0.0]
    for side, sign, sh, el, wr in (("l", 1, 5, 7, 9), ("r", -1, 6, 8, 10)):
        abd, bend = arm[side]
        j[el] = j[sh] + _polar(sign * abd, upper_arm)
        j[wr] = j[el] + _polar(sign * (abd + bend), forearm)
    for side, sign, hp, kn, an in (("l", 1, 11, 13, 15), ("r", -1, 12, 14, 16)):
        abd, bend = leg[side]
        th = _polar(sign * abd, thigh * (1 - lift[side]))
        j[kn] = j[hp] + th
        j[an] = j[kn] + _polar(sign * (abd - bend), shin * (1 - 0.5 * lift[side]))
    return j


def _scene_shape(img: np.ndarray, scene: int, cx: float, cy: float, size: float) -> None:
    shape, color = SCENE_OBJECTS[scene]
    r = size / 2
    sh = 4
    f = 1 << sh

    def p(x, y):
        return (int(round(x * f)), int(round(y * f)))

    if shape == "rect":
        cv2.rectangle(img, p(cx - r, cy - r), p(cx + r, cy + r), color, -1, cv2.LINE_AA, sh)
    elif shape == "circle":
        cv2.circle(img, p(cx, cy), int(round(r * f)), color, -1, cv2.LINE_AA, sh)
    elif shape == "ring":
        cv2.circle(img, p(cx, cy), int(round(0.8 * r * f)), color, max(2, int(size / 6)), cv2.LINE_AA, sh)
    else:
        if shape == "triangle":
            pts = [(cx, cy - r), (cx + r, cy + r), (cx - r, cy + r)]
        elif shape == "diamond":
            pts = [(cx, cy - r), (cx + r, cy), (cx, cy + r), (cx - r, cy)]
        else:  # cross
            w = r / 3
            pts = [(cx - w, cy - r), (cx + w, cy - r), (cx + w, cy - w), (cx + r, cy - w),
                   (cx + r, cy + w), (cx + w, cy + w), (cx + w, cy + r), (cx - w, cy + r),
                   (cx - w, cy + w), (cx - r, cy + w), (cx - r, cy - w), (cx - w, cy - w)]
        arr = np.array([p(x, y) for x, y in pts], dtype=np.int32)
        cv2.fillPoly(img, [arr], color, cv2.LINE_AA, sh)


def _draw_figure(img: np.ndarray, kps: np.ndarray, color, thickness: int, head_r: float) -> None:
    sh = 4
    f = 1 << sh
    pts = [(int(round(x * f)), int(round(y * f))) for x, y in kps[:, :2]]
    for a, b in LIMBS:
        cv2.line(img, pts[a], pts[b], color, thickness, cv2.LINE_AA, sh)
    neck = ((pts[5][0] + pts[6][0]) // 2, (pts[5][1] + pts[6][1]) // 2)
    cv2.line(img, neck, pts[0], color, thickness, cv2.LINE_AA, sh)
    cv2.circle(img, pts[0], int(round(head_r * f)), color, -1, cv2.LINE_AA, sh)


def _simulate(cfg: SynthConfig, label: int, rng: np.random.Generator):
    """Figure trajectory, per-frame boxes and render parameters for one video."""
    W, H = cfg.frame_w, cfg.frame_h
    motion = _Motion(ACTIONS[label], period=rng.uniform(16, 24),
                     phase=rng.uniform(0, 2 * math.pi), amp=rng.uniform(0.85, 1.1))
    body = np.stack([_pose(motion, t) for t in range(cfg.frames)])     # (F, 17, 2)
    lo, hi = body.reshape(-1, 2).min(0), body.reshape(-1, 2).max(0)
    env_w, env_h = hi - lo

    # figure scale: square person crop plus a background object must fit side by side
    height = rng.uniform(0.5, 0.6) * H
    margin_frac = 0.1
    square = lambda hgt: max(env_w, env_h) * hgt * (1 + 2 * margin_frac) + 0.15 * hgt
    obj_size = rng.uniform(0.22, 0.3) * H
    while square(height) + obj_size + 0.08 * W > W and height > 8:
        height *= 0.9
    sq = min(square(height), H)

    side = int(rng.integers(0, 2))  # 0: figure left, object right
    free = W - sq - obj_size - 0.06 * W
    sq_x0 = rng.uniform(0, max(free, 0.0))
    if side == 1:
        sq_x0 = W - sq - sq_x0
    sq_y0 = rng.uniform(0, H - sq)
    cx_fig = sq_x0 + sq / 2
    cy_fig = sq_y0 + sq / 2
    mid = (lo + hi) / 2
    px = cx_fig + (body[..., 0] - mid[0]) * height
    py = cy_fig - (body[..., 1] - mid[1]) * height
    kps = np.stack([px, py, np.ones_like(px)], axis=-1)
    kps[..., :2] = np.round(kps[..., :2], 3)

    head_r = 0.06 * height
    pad = 0.05 * height + head_r
    boxes = np.zeros((cfg.frames, 5))
    for i in range(cfg.frames):
        b = Box(kps[i, :, 0].min() - pad, kps[i, :, 1].min() - pad,
                kps[i, :, 0].max() + pad, kps[i, :, 1].max() + pad).clamp(W, H)
        boxes[i] = [*b.as_tuple(), 1.0]
    boxes[:, :4] = np.round(boxes[:, :4], 3)

    if side == 0:
        obj_cx_range = (sq_x0 + sq + 0.03 * W + obj_size / 2, W - obj_size / 2)
    else:
        obj_cx_range = (obj_size / 2, sq_x0 - 0.03 * W - obj_size / 2)
    render = {
        "bg": tuple(int(v) for v in rng.integers(60, 150, 3)),
        "fig": tuple(int(v) for v in rng.integers(150, 256, 3)),
        "thick": max(1, int(round(height / 22))),
        "head_r": head_r,
        "obj_cx_range": obj_cx_range,
        "obj_size": obj_size,
    }
    return kps, boxes, render


def _scene_for(cfg: SynthConfig, label: int) -> int | None:
    if cfg.bias_mode == "none":
        return None
    if cfg.bias_mode == "scene":
        return label
    return (label + 1) % cfg.num_classes


def _json_dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, separators=(",", ":")) + "\n", encoding="utf-8")


def generate_dataset(config: SynthConfig, out_dir) -> DatasetManifest:
    """Render every split of ``config`` under ``out_dir`` and write the manifest."""
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"cannot create dataset directory {root}: {e}") from e

    entries = []
    for split, count in (("train", config.num_train), ("test", config.num_test)):
        labels = [i % config.num_classes for i in range(count)]
        for idx, label in enumerate(labels):
            seq = [config.seed, _SPLIT_IDS[split], idx]
            fig_rng = np.random.default_rng(seq + [0])
            obj_rng = np.random.default_rng(seq + [1])
            kps, boxes, render = _simulate(config, label, fig_rng)
            scene = _scene_for(config, label)
            obj_cx = obj_rng.uniform(*render["obj_cx_range"]) if render["obj_cx_range"][0] <= render["obj_cx_range"][1] \
                else float(np.mean(render["obj_cx_range"]))
            obj_cy = obj_rng.uniform(render["obj_size"] / 2, config.frame_h - render["obj_size"] / 2)

            rel = f"{split}/video_{idx:05d}"
            vdir = root / rel
            fdir = vdir / "frames"
            try:
                fdir.mkdir(parents=True, exist_ok=True)
                background = np.empty((config.frame_h, config.frame_w, 3), np.uint8)
                background[:] = render["bg"]
                if scene is not None:
                    _scene_shape(background, scene, obj_cx, obj_cy, render["obj_size"])
                for t in range(config.frames):
                    img = background.copy()
                    _draw_figure(img, kps[t], render["fig"], render["thick"], render["head_r"])
                    if not cv2.imwrite(str(fdir / f"{t:06d}.png"), img):
                        raise DatasetError(f"cannot write frame {fdir / f'{t:06d}.png'}")
                annot = {
                    "label": label,
                    "action": ACTIONS[label],
                    "frame_size": [config.frame_w, config.frame_h],
                    "scene_object": scene,
                    "boxes": boxes.tolist(),
                    "keypoints": kps.tolist(),
                }
                _json_dump(annot, vdir / "annot.json")
            except OSError as e:
                raise DatasetError(f"cannot write video {vdir}: {e}") from e
            entries.append({"video_dir": rel, "label": label, "split": split})
    try:
        _json_dump(entries, root / "manifest.json")
    except OSError as e:
        raise DatasetError(f"cannot write manifest in {root}: {e}") from e
    log.info("wrote %d videos to %s", len(entries), root)
    return load_manifest(root / "manifest.json")


def load_video(video_dir, label: int | None = None, split: str = "train") -> VideoRecord:
    """Load and validate one video directory (``frames/`` + ``annot.json``)."""
    vdir = Path(video_dir)
    annot_path = vdir / "annot.json"
    if not annot_path.is_file():
        raise DatasetError(f"missing annotation file {annot_path}")
    try:
        annot = json.loads(annot_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetError(f"malformed annotation {annot_path}: {e}") from e
    for key in ("label", "boxes", "keypoints"):
        if key not in annot:
            raise DatasetError(f"{annot_path}: missing key {key!r}")
    if label is not None and annot["label"] != label:
        raise DatasetError(f"{annot_path}: label {annot['label']} disagrees with manifest label {label}")
    if not isinstance(annot["label"], int) or annot["label"] < 0:
        raise DatasetError(f"{annot_path}: label must be a non-negative int")
    try:
        boxes = np.asarray(annot["boxes"], dtype=np.float64)
        kps = np.asarray(annot["keypoints"], dtype=np.float64)
    except ValueError as e:
        raise DatasetError(f"{annot_path}: ragged boxes or keypoints") from e
    n = len(boxes)
    if boxes.ndim != 2 or boxes.shape[1] != 5:
        raise DatasetError(f"{annot_path}: boxes must be [[x0,y0,x1,y1,conf], ...]")
    if kps.ndim != 3 or kps.shape[0] != n or kps.shape[2] != 3:
        raise DatasetError(f"{annot_path}: keypoints must be [[[x,y,visible] x K] per frame] for {n} frames")
    if not (np.isfinite(boxes).all() and np.isfinite(kps).all()):
        raise DatasetError(f"{annot_path}: non-finite coordinates")
    frame_paths = [vdir / "frames" / f"{t:06d}.png" for t in range(n)]
    for p in frame_paths:
        if not p.is_file():
            raise DatasetError(f"missing frame {p}")
    size = annot.get("frame_size")
    if size is not None:
        w, h = size
        vis = kps[..., 2] > 0
        xs, ys = kps[..., 0][vis], kps[..., 1][vis]
        if ((xs < 0) | (xs > w) | (ys < 0) | (ys > h)).any():
            raise DatasetError(f"{annot_path}: visible keypoint outside the {w}x{h} frame")
        size = (int(w), int(h))
    return VideoRecord(vdir, frame_paths, boxes, kps, int(annot["label"]), split,
                       size, annot.get("scene_object"))


def load_manifest(path) -> DatasetManifest:
    """Read ``manifest.json`` (or a dataset directory containing one)."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.is_file():
        raise DatasetError(f"manifest not found: {path}")
    try:
        entries = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetError(f"malformed manifest {path}: {e}") from e
    if not isinstance(entries, list):
        raise DatasetError(f"{path}: manifest must be a JSON list")
    root = path.parent
    records = []
    for i, e in enumerate(entries):
        try:
            vdir, label, split = e["video_dir"], e["label"], e.get("split", "train")
        except (TypeError, KeyError) as err:
            raise DatasetError(f"{path}: entry {i} lacks video_dir/label") from err
        records.append(load_video(root / vdir, label=label, split=split))
    return DatasetManifest(root, records)
