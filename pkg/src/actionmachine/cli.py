"""``actionmachine`` command line: gen-data, train, eval, pose, cam.

Exit codes: 0 ok, 1 runtime error, 2 configuration error, 3 checkpoint mismatch.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from pathlib import Path

from .checkpoint import CheckpointError
from .config import CROP_MODES, HEAD_MODES, ConfigError, TrainConfig, load_config
from .synthdata import BIAS_MODES, DatasetError, SynthConfig, generate_dataset, load_manifest, load_video

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_CHECKPOINT = 0, 1, 2, 3

log = logging.getLogger("actionmachine")


def _fail(code: int, msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def _apply_mode(cfg: TrainConfig, mode: str | None) -> TrainConfig:
    if not mode:
        return cfg
    changes = {}
    for token in mode.replace("+", ",").split(","):
        token = token.strip()
        if token in CROP_MODES:
            changes["crop"] = token
        elif token in HEAD_MODES:
            changes["heads"] = token
        elif token == "pose_cnn_only":
            changes["train_pose_cnn_only"] = True
        elif token:
            raise ConfigError(f"unknown mode {token!r}; choose from {CROP_MODES + HEAD_MODES + ('pose_cnn_only',)}")
    return cfg.replace(**changes)


def cmd_gen_data(args) -> int:
    cfg = SynthConfig(num_train=args.num_videos, num_test=args.num_test, num_classes=args.classes,
                      frames=args.frames, frame_w=args.width, frame_h=args.height,
                      bias_mode=args.bias, seed=args.seed)
    try:
        manifest = generate_dataset(cfg, args.out)
    except (DatasetError, OSError) as e:
        return _fail(EXIT_RUNTIME, str(e))
    print(manifest.root / "manifest.json")
    for split in ("train", "test"):
        counts = Counter(r.label for r in manifest.split(split))
        if counts:
            print(f"{split}: " + " ".join(f"class {c}: {counts[c]}" for c in sorted(counts)))
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import fit
    try:
        cfg = _apply_mode(load_config(args.config), args.mode)
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
    except ConfigError as e:
        return _fail(EXIT_CONFIG, str(e))
    try:
        manifest = load_manifest(args.data)
        result = fit(manifest, cfg, args.out, split=args.split, resume=args.resume, init_from=args.init_from)
    except CheckpointError as e:
        return _fail(EXIT_CHECKPOINT, str(e))
    except (DatasetError, OSError, ValueError, FloatingPointError) as e:
        return _fail(EXIT_RUNTIME, str(e))
    for p in result.checkpoints:
        print(p)
    print(result.log_path)
    return EXIT_OK


def _load_model(args):
    from .trainer import load_checkpoint
    cfg = load_config(args.config) if getattr(args, "config", None) else None
    model, _, _ = load_checkpoint(args.checkpoint, cfg)
    model.eval()
    return model


def cmd_eval(args) -> int:
    from .inference import evaluate_records
    try:
        model = _load_model(args)
    except ConfigError as e:
        return _fail(EXIT_CONFIG, str(e))
    except CheckpointError as e:
        return _fail(EXIT_CHECKPOINT, str(e))
    except OSError as e:
        return _fail(EXIT_RUNTIME, str(e))
    try:
        records = load_manifest(args.data).split(args.split)
        if not records:
            return _fail(EXIT_RUNTIME, f"split {args.split!r} of {args.data} is empty")
        bad = [r.label for r in records if r.label >= model.cfg.num_classes]
        if bad:
            return _fail(EXIT_CHECKPOINT, f"dataset label {bad[0]} exceeds the checkpoint's "
                                          f"{model.cfg.num_classes} classes")
        report = evaluate_records(records, model)
    except (DatasetError, OSError, ValueError) as e:
        return _fail(EXIT_RUNTIME, str(e))
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.report:
        Path(args.report).write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


def _overlay_cmd(args, kind: str) -> int:
    from .inference import export_cam_overlays, export_pose_overlays
    try:
        video = load_video(args.video)
    except DatasetError as e:
        return _fail(EXIT_RUNTIME, str(e))
    try:
        model = _load_model(args)
    except ConfigError as e:
        return _fail(EXIT_CONFIG, str(e))
    except CheckpointError as e:
        return _fail(EXIT_CHECKPOINT, str(e))
    except OSError as e:
        return _fail(EXIT_RUNTIME, str(e))
    try:
        if kind == "pose":
            written = export_pose_overlays(video, model, args.out)
        else:
            written = export_cam_overlays(video, model, args.class_id, args.out)
    except (IndexError, ValueError, OSError) as e:
        return _fail(EXIT_RUNTIME, str(e))
    print(f"wrote {len(written)} overlays to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="actionmachine", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic stick-figure dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--num-videos", type=int, default=40, help="training videos")
    g.add_argument("--num-test", type=int, default=0, help="test videos")
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--frames", type=int, default=32)
    g.add_argument("--width", type=int, default=320)
    g.add_argument("--height", type=int, default=240)
    g.add_argument("--bias", choices=BIAS_MODES, default="none")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train on a dataset split")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--mode", help="comma list of crop/head modes, e.g. person_crop,rgb_only")
    t.add_argument("--split", default="train")
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.add_argument("--init-from", help="checkpoint whose matching weights initialise the model")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint; prints a JSON report")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--config", help="override the config stored in the checkpoint")
    e.add_argument("--report", help="also write the report to this file")
    e.set_defaults(func=cmd_eval)

    po = sub.add_parser("pose", help="write per-frame skeleton overlays")
    po.add_argument("--checkpoint", required=True)
    po.add_argument("--video", required=True)
    po.add_argument("--out", required=True)
    po.set_defaults(func=lambda a: _overlay_cmd(a, "pose"))

    c = sub.add_parser("cam", help="write per-frame class activation overlays")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--video", required=True)
    c.add_argument("--class", dest="class_id", type=int, required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=lambda a: _overlay_cmd(a, "cam"))
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
