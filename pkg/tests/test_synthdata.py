import json
import shutil
from collections import Counter

import numpy as np
import pytest

from actionmachine.synthdata import (DatasetError, SynthConfig, generate_dataset, load_manifest,
                                     load_video)


def _small(**kw):
    base = dict(num_train=4, num_classes=4, frames=6, frame_w=160, frame_h=120, seed=11)
    base.update(kw)
    return SynthConfig(**base)


def _annots(manifest):
    return [(r.video_dir / "annot.json").read_bytes() for r in manifest.records]


def test_same_seed_byte_identical(tmp_path):
    a = generate_dataset(_small(), tmp_path / "a")
    b = generate_dataset(_small(), tmp_path / "b")
    assert _annots(a) == _annots(b)
    assert (tmp_path / "a/manifest.json").read_bytes() == (tmp_path / "b/manifest.json").read_bytes()
    for ra, rb in zip(a.records, b.records):
        assert ra.frame_paths[3].read_bytes() == rb.frame_paths[3].read_bytes()


def test_different_seed_differs(tmp_path):
    a = generate_dataset(_small(), tmp_path / "a")
    b = generate_dataset(_small(seed=12), tmp_path / "b")
    assert _annots(a) != _annots(b)


def test_keypoints_inside_box_and_frame(tiny_data):
    for r in tiny_data.records:
        w, h = r.frame_size
        k, b = r.keypoints, r.boxes
        assert (k[..., 0] >= b[:, None, 0]).all() and (k[..., 0] <= b[:, None, 2]).all()
        assert (k[..., 1] >= b[:, None, 1]).all() and (k[..., 1] <= b[:, None, 3]).all()
        assert (k[..., 0] >= 0).all() and (k[..., 0] <= w).all()
        assert (k[..., 1] >= 0).all() and (k[..., 1] <= h).all()
        assert k.shape[1:] == (17, 3)
        assert (b[:, 4] == 1.0).all()


def test_keypoint_continuity(tiny_data):
    for r in tiny_data.records:
        w, h = r.frame_size
        step = np.linalg.norm(np.diff(r.keypoints[..., :2], axis=0), axis=-1)
        assert step.max() < 0.1 * np.hypot(w, h)


def test_figure_fits_area_budget(tiny_data):
    for r in tiny_data.records:
        w, h = r.frame_size
        b = r.boxes
        assert ((b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])).max() <= 0.4 * w * h


@pytest.mark.parametrize("n,c", [(8, 4), (10, 4), (7, 3)])
def test_class_balance(tmp_path, n, c):
    m = generate_dataset(_small(num_train=n, num_test=c + 1, num_classes=c, frames=2), tmp_path)
    for split in ("train", "test"):
        counts = Counter(r.label for r in m.split(split))
        assert set(counts) == set(range(c))
        assert max(counts.values()) - min(counts.values()) <= 1


def test_scene_bijection_and_swap(tmp_path):
    scene = generate_dataset(_small(num_train=8, bias_mode="scene"), tmp_path / "s")
    swapped = generate_dataset(_small(num_train=8, bias_mode="scene_swapped"), tmp_path / "w")
    plain = generate_dataset(_small(num_train=8), tmp_path / "n")
    mapping = {r.label: r.scene_object for r in scene.records}
    assert len(mapping) == 4 and sorted(mapping.values()) == [0, 1, 2, 3]
    assert all(r.scene_object == mapping[r.label] for r in scene.records)
    for a, b, c in zip(scene.records, swapped.records, plain.records):
        assert b.scene_object == mapping[(a.label + 1) % 4]
        assert c.scene_object is None
        np.testing.assert_array_equal(a.keypoints, b.keypoints)
        np.testing.assert_array_equal(a.keypoints, c.keypoints)
        assert not np.array_equal(a.load_frames()[0], b.load_frames()[0])


def test_manifest_round_trip(tiny_data):
    again = load_manifest(tiny_data.root)
    assert len(again) == len(tiny_data) == 12
    assert [r.label for r in again.records] == [r.label for r in tiny_data.records]
    frames = again.records[0].load_frames()
    assert frames.shape == (12, 120, 160, 3) and frames.dtype == np.uint8


def test_annotation_layout(tiny_data):
    annot = json.loads((tiny_data.records[0].video_dir / "annot.json").read_text())
    assert {"label", "boxes", "keypoints"} <= set(annot)
    assert len(annot["boxes"][0]) == 5
    assert len(annot["keypoints"][0]) == 17 and len(annot["keypoints"][0][0]) == 3
    entries = json.loads((tiny_data.root / "manifest.json").read_text())
    assert set(entries[0]) == {"video_dir", "label", "split"}


def test_missing_frame_names_path(tmp_path):
    generate_dataset(_small(), tmp_path)
    victim = tmp_path / "train/video_00002/frames/000003.png"
    victim.unlink()
    with pytest.raises(DatasetError, match="000003.png"):
        load_manifest(tmp_path)


def test_malformed_annotation(tmp_path):
    generate_dataset(_small(), tmp_path)
    path = tmp_path / "train/video_00001/annot.json"
    annot = json.loads(path.read_text())
    annot["keypoints"] = annot["keypoints"][:-1]
    path.write_text(json.dumps(annot))
    with pytest.raises(DatasetError, match="keypoints"):
        load_manifest(tmp_path)
    path.write_text("{not json")
    with pytest.raises(DatasetError, match="malformed"):
        load_video(path.parent)


def test_label_mismatch(tmp_path):
    generate_dataset(_small(), tmp_path)
    entries = json.loads((tmp_path / "manifest.json").read_text())
    entries[0]["label"] = 3
    (tmp_path / "manifest.json").write_text(json.dumps(entries))
    with pytest.raises(DatasetError, match="label"):
        load_manifest(tmp_path)


def test_empty_manifest(tmp_path):
    (tmp_path / "manifest.json").write_text("[]")
    m = load_manifest(tmp_path)
    assert len(m) == 0 and m.split("train") == []


def test_missing_manifest(tmp_path):
    with pytest.raises(DatasetError, match="manifest"):
        load_manifest(tmp_path / "nope")


def test_unwritable_directory(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(DatasetError):
        generate_dataset(_small(), blocker / "sub")


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(num_classes=1)
    with pytest.raises(ValueError):
        SynthConfig(bias_mode="weird")
