import json
import subprocess
import sys

import pytest

from actionmachine.checkpoint import read_manifest
from actionmachine.cli import main
from actionmachine.config import format_config


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def cfg_file(tmp_path, fast_cfg):
    p = tmp_path / "toy.ini"
    p.write_text(format_config(fast_cfg))
    return p


@pytest.mark.parametrize("cmd", ["gen-data", "train", "eval", "pose", "cam"])
def test_help_exits_zero(cmd, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "actionmachine", cmd, "--help"],
                          capture_output=True, text=True, cwd=tmp_path)
    assert proc.returncode == 0 and "usage" in proc.stdout
    assert list(tmp_path.iterdir()) == []


def test_requires_subcommand():
    with pytest.raises(SystemExit) as e:
        main([])
    assert e.value.code == 2


def test_gen_data_counts_and_determinism(tmp_path, capsys):
    args = ["gen-data", "--num-videos", 8, "--classes", 4, "--frames", 3, "--width", 96,
            "--height", 72, "--seed", 5]
    code, out, _ = _run(capsys, *args, "--out", tmp_path / "a")
    assert code == 0
    assert "manifest.json" in out.splitlines()[0]
    assert "train: class 0: 2 class 1: 2 class 2: 2 class 3: 2" in out
    _run(capsys, *args, "--out", tmp_path / "b")
    assert (tmp_path / "a/manifest.json").read_bytes() == (tmp_path / "b/manifest.json").read_bytes()
    assert len(json.loads((tmp_path / "a/manifest.json").read_text())) == 8


def test_gen_data_swapped_backgrounds(tmp_path, capsys):
    base = ["gen-data", "--num-videos", 4, "--frames", 2, "--width", 96, "--height", 72]
    _run(capsys, *base, "--bias", "scene", "--out", tmp_path / "s")
    _run(capsys, *base, "--bias", "scene_swapped", "--out", tmp_path / "w")
    for i in range(4):
        s = json.loads((tmp_path / f"s/train/video_{i:05d}/annot.json").read_text())
        w = json.loads((tmp_path / f"w/train/video_{i:05d}/annot.json").read_text())
        assert w["scene_object"] == (s["scene_object"] + 1) % 4


def test_gen_data_unwritable(tmp_path, capsys):
    (tmp_path / "f").write_text("")
    code, _, err = _run(capsys, "gen-data", "--out", tmp_path / "f" / "x", "--num-videos", 1, "--frames", 1)
    assert code == 1 and "error" in err


def test_train_eval_pose_cam(tiny_data, cfg_file, tmp_path, capsys):
    code, out, _ = _run(capsys, "train", "--config", cfg_file, "--data", tiny_data.root, "--out", tmp_path / "run")
    assert code == 0
    ck = tmp_path / "run/checkpoints/epoch_0001"
    assert str(ck) in out
    assert len((tmp_path / "run/log.jsonl").read_text().splitlines()) == 1

    code, out, _ = _run(capsys, "eval", "--checkpoint", ck, "--data", tiny_data.root,
                        "--report", tmp_path / "r.json")
    assert code == 0
    report = json.loads(out)
    assert {"top1_rgb", "top1_pose", "top1_fused", "oks_map"} <= set(report)
    assert json.loads((tmp_path / "r.json").read_text()) == report

    video = tiny_data.records[0].video_dir
    assert _run(capsys, "pose", "--checkpoint", ck, "--video", video, "--out", tmp_path / "p1")[0] == 0
    assert _run(capsys, "pose", "--checkpoint", ck, "--video", video, "--out", tmp_path / "p2")[0] == 0
    first = sorted((tmp_path / "p1").iterdir())
    assert len(first) == 12
    assert [p.read_bytes() for p in first] == [p.read_bytes() for p in sorted((tmp_path / "p2").iterdir())]

    code, out, _ = _run(capsys, "cam", "--checkpoint", ck, "--video", video, "--class", 2, "--out", tmp_path / "c")
    assert code == 0 and len(list((tmp_path / "c").iterdir())) == 12
    code, _, err = _run(capsys, "cam", "--checkpoint", ck, "--video", video, "--class", 9, "--out", tmp_path / "c2")
    assert code == 1 and "0..3" in err

    code, _, err = _run(capsys, "pose", "--checkpoint", ck, "--video", tmp_path / "missing", "--out", tmp_path / "x")
    assert code == 1 and "missing" in err

    code, _, err = _run(capsys, "eval", "--checkpoint", ck, "--data", tiny_data.root, "--split", "val")
    assert code == 1 and "empty" in err

    wrong = tmp_path / "wrong.ini"
    wrong.write_text(cfg_file.read_text().replace("head_channels = 16", "head_channels = 8"))
    code, _, err = _run(capsys, "eval", "--checkpoint", ck, "--data", tiny_data.root, "--config", wrong)
    assert code == 3 and "pose_head" in err


def test_train_rgb_only_mode(tiny_data, cfg_file, tmp_path, capsys):
    code, _, _ = _run(capsys, "train", "--config", cfg_file, "--data", tiny_data.root,
                      "--out", tmp_path, "--mode", "random_crop,rgb_only")
    assert code == 0
    names = read_manifest(tmp_path / "checkpoints/epoch_0001")
    assert not any("pose" in n for n in names)
    code, out, _ = _run(capsys, "eval", "--checkpoint", tmp_path / "checkpoints/epoch_0001",
                        "--data", tiny_data.root)
    assert code == 0
    assert "top1_pose" not in json.loads(out) and "oks_map" not in json.loads(out)


def test_train_config_errors(tiny_data, cfg_file, tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("epochs = 1\nlearning_rate = 0.1\n")
    code, _, err = _run(capsys, "train", "--config", bad, "--data", tiny_data.root, "--out", tmp_path / "o")
    assert code == 2 and "learning_rate" in err and ":2:" in err
    code, _, err = _run(capsys, "train", "--config", cfg_file, "--data", tiny_data.root,
                        "--out", tmp_path / "o", "--mode", "sideways")
    assert code == 2 and "sideways" in err


def test_train_missing_data(cfg_file, tmp_path, capsys):
    code, _, err = _run(capsys, "train", "--config", cfg_file, "--data", tmp_path / "none", "--out", tmp_path / "o")
    assert code == 1 and "manifest" in err
