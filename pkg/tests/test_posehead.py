import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from actionmachine.posehead import (HeatmapStack, PoseHead, decode_keypoints, encode_targets,
                                    heatmap_loss, offset_loss, pose_head_forward, pose_loss,
                                    smooth_l1)

K = 17


def _kps(points, k=K, visible=None):
    """(1, 1, K, 3) tensor; unspecified keypoints are invisible."""
    out = torch.zeros(1, 1, k, 3, dtype=torch.float64)
    for j, (x, y) in enumerate(points):
        out[0, 0, j] = torch.tensor([x, y, 1.0])
    if visible is not None:
        out[0, 0, :, 2] = torch.tensor(visible, dtype=torch.float64)
    return out


def _ideal(targets, stride):
    return HeatmapStack(targets.heatmaps.clone(), targets.offsets.clone(), stride)


def test_head_shapes_toy():
    head = PoseHead(256, channels=32).eval()
    out = pose_head_forward(torch.randn(2, 256, 8, 3, 3), head, 8.0)
    assert out.heatmaps.shape == (2, 8, 17, 12, 12)
    assert out.offsets.shape == (2, 8, 34, 12, 12)
    assert head.final.out_channels == 51


def test_head_topology():
    head = PoseHead(64, channels=16)
    deconvs = [m for m in head.modules() if isinstance(m, torch.nn.ConvTranspose2d)]
    assert len(deconvs) == 2
    assert all(d.kernel_size == (4, 4) and d.stride == (2, 2) for d in deconvs)
    assert head.final.kernel_size == (1, 1)


def test_head_shared_across_frames():
    head = PoseHead(16, channels=8).eval()
    f = torch.randn(1, 16, 1, 4, 4)
    out = head(torch.cat([f, torch.randn(1, 16, 1, 4, 4), f], dim=2), 4.0)
    assert torch.equal(out.heatmaps[0, 0], out.heatmaps[0, 2])
    assert torch.equal(out.offsets[0, 0], out.offsets[0, 2])
    assert not torch.equal(out.heatmaps[0, 0], out.heatmaps[0, 1])


def _disk_cells(radius):
    # integer cells within Euclidean distance ``radius`` of the origin
    r = int(math.floor(radius))
    return {(du, dv) for du in range(-r, r + 1) for dv in range(-r, r + 1)
            if du * du + dv * dv <= radius * radius}


def test_encode_disk_of_thirteen_cells():
    t = encode_targets(_kps([(5.0 * 8, 5.0 * 8)]), (12, 12), 8.0, 2.0)
    disk = t.disk[0, 0, 0]
    assert int(disk.sum()) == 13
    got = {(int(c) - 5, int(r) - 5) for r, c in disk.nonzero().tolist()}
    assert got == _disk_cells(2.0)
    assert torch.equal(t.heatmaps[0, 0, 0], disk.double())


def test_encode_offsets():
    t = encode_targets(_kps([(5.0 * 8, 5.0 * 8), (13.0, 20.0)]), (12, 12), 8.0, 2.0)
    assert float(t.offsets[0, 0, 0, 5, 5]) == 0 and float(t.offsets[0, 0, K, 5, 5]) == 0
    assert float(t.offsets[0, 0, 0, 4, 6]) == -1 and float(t.offsets[0, 0, K, 4, 6]) == 1
    # keypoint 1 at cells (1.625, 2.5)
    assert float(t.offsets[0, 0, 1, 2, 2]) == pytest.approx(-0.375)
    assert float(t.offsets[0, 0, K + 1, 2, 2]) == pytest.approx(0.5)
    assert float(t.offsets[0, 0, 1].abs().sum() + t.offsets[0, 0, K + 1].abs().sum()) > 0
    assert (t.offsets[0, 0, 0][~t.disk[0, 0, 0]] == 0).all()


def test_encode_invisible():
    t = encode_targets(_kps([(40.0, 40.0)], visible=[0] + [0] * 16), (12, 12), 8.0)
    assert not t.valid.any()
    assert float(t.heatmaps.sum()) == 0


@given(st.floats(0, 95), st.floats(0, 95), st.floats(0.5, 4))
def test_encode_disk_matches_distance(x, y, m):
    t = encode_targets(_kps([(x, y)]), (12, 12), 8.0, m)
    rows, cols = np.mgrid[0:12, 0:12]
    ref = (cols - x / 8) ** 2 + (rows - y / 8) ** 2 <= m * m
    np.testing.assert_array_equal(t.disk[0, 0, 0].numpy(), ref)


def test_smooth_l1_branches():
    a = torch.tensor([0.0, 0.5, 2.0, -3.0])
    np.testing.assert_allclose(smooth_l1(a, torch.zeros(4)).numpy(), [0, 0.125, 1.5, 2.5])


def test_heatmap_loss_examples():
    t = encode_targets(_kps([(40.0, 40.0)]), (12, 12), 8.0)
    pred = _ideal(t, 8.0)
    assert float(heatmap_loss(pred, t)) == 0
    pred.heatmaps[0, 0, 0, 5, 5] = 0.0
    assert float(heatmap_loss(pred, t)) == pytest.approx(0.5 / 17)
    pred.heatmaps[0, 0, 0, 5, 5] = -1.0
    assert float(heatmap_loss(pred, t)) == pytest.approx(1.5 / 17)


def test_heatmap_loss_ignores_invalid():
    t = encode_targets(_kps([(40.0, 40.0)]), (12, 12), 8.0)
    pred = _ideal(t, 8.0)
    pred.heatmaps[0, 0, 3] = 5.0  # keypoint 3 is not valid
    assert float(heatmap_loss(pred, t)) == 0


def test_offset_loss_examples():
    t = encode_targets(_kps([(40.0, 40.0)]), (12, 12), 8.0)
    pred = _ideal(t, 8.0)
    assert float(offset_loss(pred, t)) == 0
    pred.offsets[0, 0, 0, 0, 0] = 7.0  # outside the disk
    assert float(offset_loss(pred, t)) == 0
    pred.offsets[0, 0, 0, 5, 6] += 0.4
    assert float(offset_loss(pred, t)) == pytest.approx(0.5 * 0.16 / 17)


def test_losses_average_over_frames_and_batch():
    kps = torch.rand(3, 4, K, 3, dtype=torch.float64) * 90
    kps[..., 2] = 1
    t = encode_targets(kps, (12, 12), 8.0)
    g = torch.Generator().manual_seed(0)
    pred = HeatmapStack(torch.randn(3, 4, K, 12, 12, generator=g, dtype=torch.float64),
                        torch.randn(3, 4, 2 * K, 12, 12, generator=g, dtype=torch.float64), 8.0)
    per = []
    for b in range(3):
        for f in range(4):
            tb = encode_targets(kps[b:b + 1, f:f + 1], (12, 12), 8.0)
            pb = HeatmapStack(pred.heatmaps[b:b + 1, f:f + 1], pred.offsets[b:b + 1, f:f + 1], 8.0)
            per.append((float(heatmap_loss(pb, tb)), float(offset_loss(pb, tb))))
    per = np.array(per)
    assert float(heatmap_loss(pred, t)) == pytest.approx(per[:, 0].mean())
    assert float(offset_loss(pred, t)) == pytest.approx(per[:, 1].mean())


def test_pose_loss_weighting():
    kps = torch.rand(1, 2, K, 3, dtype=torch.float64) * 90
    kps[..., 2] = 1
    t = encode_targets(kps, (12, 12), 8.0)
    pred = HeatmapStack(torch.rand(1, 2, K, 12, 12, dtype=torch.float64),
                        torch.rand(1, 2, 2 * K, 12, 12, dtype=torch.float64), 8.0)
    lh, lo = float(heatmap_loss(pred, t)), float(offset_loss(pred, t))
    assert float(pose_loss(pred, t)) == pytest.approx(0.5 * lh + 0.5 * lo)
    assert float(pose_loss(pred, t, 1.0, 1.0)) == pytest.approx(2 * float(pose_loss(pred, t)))
    assert float(pose_loss(_ideal(t, 8.0), t)) == 0


def test_decode_single_peak():
    heat = torch.zeros(1, 1, K, 28, 28)
    off = torch.zeros(1, 1, 2 * K, 28, 28)
    heat[0, 0, 0, 12, 10] = 0.9
    off[0, 0, 0, 12, 10] = 0.4
    off[0, 0, K, 12, 10] = -0.3
    dec = decode_keypoints(HeatmapStack(heat, off, 8.0))
    assert dec.keypoints[0, 0, 0].tolist() == pytest.approx([83.2, 93.6], abs=1e-5)
    assert float(dec.confidence[0, 0, 0]) == pytest.approx(0.9)


def test_decode_zero_heatmap_tie_break():
    dec = decode_keypoints(HeatmapStack(torch.zeros(1, 1, K, 6, 6), torch.zeros(1, 1, 2 * K, 6, 6), 8.0))
    assert (dec.keypoints == 0).all() and (dec.confidence == 0).all()


def test_decode_negative_peak_confidence_zero():
    heat = torch.full((1, 1, K, 4, 4), -2.0)
    heat[..., 3, 1] = -0.5
    dec = decode_keypoints(HeatmapStack(heat, torch.zeros(1, 1, 2 * K, 4, 4), 2.0))
    assert (dec.confidence == 0).all()
    assert dec.keypoints[0, 0, 0].tolist() == [2.0, 6.0]


def test_decode_tie_lowest_row_major():
    heat = torch.zeros(1, 1, K, 5, 5)
    heat[0, 0, 0, 3, 1] = 1.0
    heat[0, 0, 0, 2, 4] = 1.0
    dec = decode_keypoints(HeatmapStack(heat, torch.zeros(1, 1, 2 * K, 5, 5), 1.0))
    assert dec.keypoints[0, 0, 0].tolist() == [4.0, 2.0]


@given(st.floats(-3, 3))
def test_decode_confidence_ignores_offset_shift(c):
    g = torch.Generator().manual_seed(1)
    heat = torch.randn(1, 2, K, 6, 6, generator=g)
    off = torch.randn(1, 2, 2 * K, 6, 6, generator=g)
    a = decode_keypoints(HeatmapStack(heat, off, 4.0)).confidence
    b = decode_keypoints(HeatmapStack(heat, off + c, 4.0)).confidence
    assert torch.equal(a, b)


def test_decode_carries_no_gradient():
    heat = torch.rand(1, 1, K, 4, 4, requires_grad=True)
    off = torch.rand(1, 1, 2 * K, 4, 4, requires_grad=True)
    dec = decode_keypoints(HeatmapStack(heat, off, 4.0))
    assert not dec.keypoints.requires_grad and not dec.confidence.requires_grad


@settings(max_examples=30)
@given(st.lists(st.tuples(st.floats(0.0, 95.99), st.floats(0.0, 95.99)), min_size=K, max_size=K))
def test_round_trip_exact(points):
    kps = _kps(points)
    dec = decode_keypoints(_ideal(encode_targets(kps, (12, 12), 8.0), 8.0))
    err = (dec.keypoints[0, 0] - kps[0, 0, :, :2]).abs().max()
    assert float(err) < 1e-4
