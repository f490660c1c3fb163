"""Joint training of the RGB, pose-estimation and pose-action tasks."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from . import checkpoint as ckpt
from .backbone import rgb_loss
from .config import TrainConfig, format_config, parse_config
from .data import to_tensor, training_clip
from .model import ActionMachine, Outputs, build_model
from .poseaction import pose_action_loss
from .posehead import PoseTargets, encode_targets, heatmap_loss, offset_loss
from .synthdata import DatasetManifest, VideoRecord

log = logging.getLogger(__name__)

LOSS_KEYS = ("L_r", "L_p", "L_paction")
MOMENTUM_PREFIX = "optimizer.momentum."


def multitask_loss(rgb_logits, pose_pred, pose_targets, pose_logits, label, cfg: TrainConfig):
    """Weighted sum of the three task losses.

    Returns ``(total, components)``; an absent head contributes ``None`` to
    the components and nothing to the total, and a task with zero weight is
    left out of the total entirely so it sends no gradient anywhere.
    """
    comps: dict[str, torch.Tensor | None] = {k: None for k in LOSS_KEYS}
    weights = {"L_r": cfg.lambda_rgb, "L_p": cfg.lambda_pose, "L_paction": cfg.lambda_paction}
    if rgb_logits is not None:
        comps["L_r"] = rgb_loss(rgb_logits, label)
    if pose_pred is not None and pose_targets is not None:
        comps["L_p"] = (cfg.lambda_h * heatmap_loss(pose_pred, pose_targets)
                        + cfg.lambda_o * offset_loss(pose_pred, pose_targets))
    if pose_logits is not None:
        comps["L_paction"] = pose_action_loss(pose_logits, label)
    total = None
    for k in LOSS_KEYS:
        if comps[k] is None or weights[k] == 0:
            continue
        term = weights[k] * comps[k]
        total = term if total is None else total + term
    if total is None:
        ref = next((c for c in comps.values() if c is not None), None)
        total = torch.zeros((), dtype=ref.dtype if ref is not None else torch.float32)
    return total, comps


def clip_gradients(grads: Mapping[str, torch.Tensor], max_l1: float = 2.0) -> dict[str, torch.Tensor]:
    """Rescale each tensor whose L1 norm exceeds ``max_l1`` down to exactly ``max_l1``."""
    out = {}
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in {name}")
        norm = g.abs().sum()
        out[name] = g * (max_l1 / norm) if norm > max_l1 else g
    return out


def clip_elements(grads: Mapping[str, torch.Tensor], limit: float = 2.0) -> dict[str, torch.Tensor]:
    """Clamp every gradient entry to ``[-limit, limit]`` on its own."""
    out = {}
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in {name}")
        out[name] = g.clamp(-limit, limit)
    return out


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    passed = sum(1 for m in cfg.milestone_epochs() if m <= epoch)
    return cfg.lr * cfg.lr_decay ** passed


def _decays(name: str, p: torch.Tensor) -> bool:
    # biases and normalization parameters are exempt
    return p.ndim > 1


class SGD:
    """Momentum SGD with L2 weight decay and gradient clipping.

    ``g' = clip(g) + wd * w``, ``m <- momentum * m + g'``, ``w <- w - lr * m``.
    """

    def __init__(self, named_params, momentum: float = 0.9, weight_decay: float = 1e-4,
                 grad_clip: float | None = 2.0, clip_mode: str = "element"):
        self.params = {n: p for n, p in named_params if p.requires_grad}
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        clips = {"element": clip_elements, "tensor_l1": clip_gradients}
        if clip_mode not in clips:
            raise ValueError(f"unknown clip mode {clip_mode!r}; choose from {sorted(clips)}")
        self.clip = clips[clip_mode]
        self.buffers = {n: torch.zeros_like(p) for n, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def gradients(self) -> dict[str, torch.Tensor]:
        return {n: (p.grad if p.grad is not None else torch.zeros_like(p))
                for n, p in self.params.items()}

    @torch.no_grad()
    def step(self, lr: float):
        grads = self.gradients()
        if self.grad_clip is not None:
            grads = self.clip(grads, self.grad_clip)
        for n, p in self.params.items():
            g = grads[n]
            if self.weight_decay and _decays(n, p):
                g = g + self.weight_decay * p
            buf = self.buffers[n]
            buf.mul_(self.momentum).add_(g)
            p.sub_(lr * buf)

    def state_tensors(self) -> dict[str, torch.Tensor]:
        return {MOMENTUM_PREFIX + n: b for n, b in self.buffers.items()}

    def load_state_tensors(self, tensors: Mapping[str, np.ndarray]):
        for n, b in self.buffers.items():
            key = MOMENTUM_PREFIX + n
            if key not in tensors:
                raise ckpt.CheckpointError(f"checkpoint lacks optimizer state {key}")
            arr = tensors[key]
            if tuple(arr.shape) != tuple(b.shape):
                raise ckpt.CheckpointError(f"{key}: shape {tuple(arr.shape)} != {tuple(b.shape)}")
            b.copy_(torch.as_tensor(np.array(arr), dtype=b.dtype))


def make_optimizer(model: ActionMachine, cfg: TrainConfig) -> SGD:
    return SGD(model.named_parameters(), cfg.momentum, cfg.weight_decay, cfg.grad_clip,
               cfg.grad_clip_mode)


@dataclass
class Batch:
    clips: torch.Tensor        # (B, 3, T, S, S)
    keypoints: torch.Tensor    # (B, T, K, 3) crop pixels
    labels: torch.Tensor       # (B,)


def make_batch(records: list[VideoRecord], cfg: TrainConfig, rng: np.random.Generator) -> Batch:
    clips, kps = zip(*(training_clip(r, cfg, rng) for r in records))
    return Batch(to_tensor(np.stack(clips)), torch.from_numpy(np.stack(kps)),
                 torch.tensor([r.label for r in records], dtype=torch.long))


def targets_for(model: ActionMachine, out: Outputs, keypoints: torch.Tensor) -> PoseTargets | None:
    if out.pose is None:
        return None
    h, w = out.pose.heatmaps.shape[-2:]
    return encode_targets(keypoints.to(out.pose.heatmaps.dtype), (h, w), out.pose.cell_stride,
                          model.cfg.disk_radius)


def fused_probs(out: Outputs) -> torch.Tensor:
    p = torch.softmax(out.rgb_logits, dim=-1)
    if out.pose_logits is not None:
        p = p + torch.softmax(out.pose_logits, dim=-1)
    return p


def forward_losses(model: ActionMachine, batch: Batch, cfg: TrainConfig):
    out = model(batch.clips)
    targets = targets_for(model, out, batch.keypoints)
    total, comps = multitask_loss(out.rgb_logits, out.pose, targets, out.pose_logits, batch.labels, cfg)
    return total, comps, out


def train_step(batch: Batch, model: ActionMachine, optimizer: SGD, cfg: TrainConfig, lr: float) -> dict:
    """One forward/backward/update; returns loss components and batch accuracy."""
    model.train()
    optimizer.zero_grad()
    total, comps, out = forward_losses(model, batch, cfg)
    if total.requires_grad:
        total.backward()
    optimizer.step(lr)
    with torch.no_grad():
        pred = fused_probs(out).argmax(dim=-1)
        correct = int((pred == batch.labels).sum())
    metrics = {k: (None if v is None else float(v.detach())) for k, v in comps.items()}
    metrics.update(loss=float(total.detach()), correct=correct, count=len(batch.labels))
    return metrics


# --------------------------------------------------------------------------
# checkpoints

def save_checkpoint(directory, model: ActionMachine, optimizer: SGD | None, epoch: int) -> Path:
    tensors = {f"model.{k}": v for k, v in ckpt.state_tensors(model).items()}
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
    state = {"epoch": epoch}
    return ckpt.write_archive(tensors, directory, {
        "config.ini": format_config(model.cfg),
        "state.json": json.dumps(state) + "\n",
    })


def load_checkpoint(directory, cfg: TrainConfig | None = None):
    """Rebuild ``(model, tensors, state)`` from a checkpoint directory.

    The stored config is used unless ``cfg`` is given, in which case every
    tensor must still match the model built from ``cfg``.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"checkpoint directory not found: {directory}")
    if cfg is None:
        cfg_path = directory / "config.ini"
        if not cfg_path.is_file():
            raise ckpt.CheckpointError(f"{directory} has no config.ini")
        cfg = parse_config(cfg_path.read_text(encoding="utf-8"), str(cfg_path))
    tensors = ckpt.read_archive(directory)
    model = build_model(cfg)
    ckpt.load_state(model, {k: v for k, v in tensors.items() if k.startswith("model.")}, prefix="model.")
    state_path = directory / "state.json"
    state = json.loads(state_path.read_text()) if state_path.is_file() else {}
    return model, tensors, state


# --------------------------------------------------------------------------
# fitting

def seed_epoch(cfg: TrainConfig, epoch: int) -> np.random.Generator:
    torch.manual_seed(cfg.seed * 1_000_003 + epoch)
    return np.random.default_rng([cfg.seed, epoch])


@dataclass
class FitResult:
    checkpoints: list[Path]
    log_path: Path
    history: list[dict] = field(default_factory=list)
    model: ActionMachine | None = None


def _epoch_line(epoch: int, lr: float, sums: dict, counts: dict, correct: int, total: int) -> dict:
    line = {"epoch": epoch, "lr": lr}
    for k in LOSS_KEYS:
        line[k] = sums[k] / counts[k] if counts[k] else None
    line["train_top1"] = correct / total if total else None
    return line


def fit(manifest: DatasetManifest, cfg: TrainConfig, out_dir, split: str = "train",
        resume=None, init_from=None) -> FitResult:
    """Train for ``cfg.epochs`` epochs, logging one JSON line per epoch.

    ``resume`` continues from a checkpoint written by an earlier call
    (weights and momentum).  ``init_from`` only loads model weights whose
    names exist in both models, which is how the pose classifier is trained
    on top of a fixed pose-estimation model.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = manifest.split(split)
    if not records:
        raise ValueError(f"no videos in split {split!r}")
    for r in records:
        if not 0 <= r.label < cfg.num_classes:
            raise ValueError(f"{r.video_dir}: label {r.label} outside [0, {cfg.num_classes})")

    start_epoch = 0
    if resume is not None:
        model, tensors, state = load_checkpoint(resume, cfg)
        optimizer = make_optimizer(model, cfg)
        optimizer.load_state_tensors(tensors)
        start_epoch = int(state.get("epoch", 0))
    else:
        torch.manual_seed(cfg.seed)
        model = build_model(cfg)
        if init_from is not None:
            _init_shared(model, init_from)
        optimizer = make_optimizer(model, cfg)

    log_path = out_dir / "log.jsonl"
    if resume is None and log_path.exists():
        log_path.unlink()
    milestones = set(cfg.milestone_epochs())
    saved, history = [], []
    for epoch in range(start_epoch, cfg.epochs):
        rng = seed_epoch(cfg, epoch)
        lr = lr_at(epoch, cfg)
        order = rng.permutation(len(records))
        sums = {k: 0.0 for k in LOSS_KEYS}
        counts = {k: 0 for k in LOSS_KEYS}
        correct = seen = 0
        for b in range(0, len(order), cfg.batch_size):
            batch = make_batch([records[i] for i in order[b:b + cfg.batch_size]], cfg, rng)
            m = train_step(batch, model, optimizer, cfg, lr)
            n = m["count"]
            for k in LOSS_KEYS:
                if m[k] is not None:
                    sums[k] += m[k] * n
                    counts[k] += n
            correct += m["correct"]
            seen += n
            if not math.isfinite(m["loss"]):
                raise FloatingPointError(f"loss diverged at epoch {epoch}")
        line = _epoch_line(epoch, lr, sums, counts, correct, seen)
        history.append(line)
        with open(log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(line) + "\n")
        log.info("epoch %d lr %.5g %s", epoch, lr,
                 " ".join(f"{k}={v:.4f}" for k, v in line.items() if isinstance(v, float) and k != "lr"))
        done = epoch + 1
        if done in milestones or done == cfg.epochs:
            try:
                saved.append(save_checkpoint(out_dir / "checkpoints" / f"epoch_{done:04d}",
                                             model, optimizer, done))
            except OSError as e:
                raise OSError(f"writing checkpoint for epoch {done} in {out_dir}: {e}") from e
    return FitResult(saved, log_path, history, model)


def _init_shared(model: ActionMachine, directory) -> None:
    tensors = ckpt.read_archive(directory)
    state = model.state_dict()
    for key, arr in tensors.items():
        if not key.startswith("model."):
            continue
        name = key[len("model."):]
        if name in state and tuple(state[name].shape) == tuple(arr.shape):
            state[name] = torch.as_tensor(np.array(arr), dtype=state[name].dtype)
    model.load_state_dict(state)


def read_log(path) -> list[dict]:
    return [json.loads(l) for l in Path(path).read_text(encoding="utf-8").splitlines() if l.strip()]
