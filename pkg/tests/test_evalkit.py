import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import PR_CASES, detections_for_sequence
from sis3d.evalkit import (Detection, WorldDetection, average_precision, mask_iou, mean_average_precision,
                           merge_frame_predictions, metrics_csv, parse_record, format_record, read_records,
                           rle_decode, rle_encode, voxelize, write_records)
from sis3d.grid import Box3, GridMeta, InstanceAnnotation


@pytest.mark.parametrize("seq,n_gt,expected", PR_CASES)
def test_ap_hand_computed(seq, n_gt, expected):
    assert average_precision(seq, n_gt) == pytest.approx(expected, abs=1e-12)
    dets, gts = detections_for_sequence(seq, n_gt)
    for use_masks in (False, True):
        res = mean_average_precision(dets, gts, 1, (0.5,), use_masks=use_masks, exclude_empty=False)
        assert res[0.5]["ap"][0] == pytest.approx(expected, abs=1e-12)


def test_reference_examples():
    gt = [InstanceAnnotation.from_mask([[0, 0, 0], [1, 1, 1]], 0)]
    perfect = [Detection(gt[0].box, 0, 0.9)]
    assert mean_average_precision(perfect, gt, 1)[0.25]["map"] == 1.0
    # one false positive ranked first, one true positive second
    far = Detection(Box3.from_corners((5, 5, 5), (6, 6, 6)), 0, 0.95)
    assert mean_average_precision([far] + perfect, gt, 1)[0.25]["map"] == pytest.approx(0.5)


def test_duplicate_detection_is_false_positive():
    gt = [InstanceAnnotation.from_mask([[0, 0, 0]], 0)]
    d = Detection(gt[0].box, 0, 0.9)
    d2 = Detection(gt[0].box, 0, 0.8)
    assert mean_average_precision([d, d2], gt, 1)[0.5]["ap"][0] == pytest.approx(1.0)
    assert mean_average_precision([Detection(gt[0].box, 0, 0.7), Detection(gt[0].box, 0, 0.8)], gt,
                                  1)[0.5]["ap"][0] == pytest.approx(1.0)


def test_empty_classes_and_inputs():
    gt = [InstanceAnnotation.from_mask([[0, 0, 0]], 1)]
    res = mean_average_precision([], gt, 3)
    assert res[0.25]["map"] == 0.0 and res[0.25]["n_gt"] == [0, 1, 0]
    ok = mean_average_precision([Detection(gt[0].box, 1, 0.5)], gt, 3)
    assert ok[0.25]["map"] == 1.0
    assert mean_average_precision([Detection(gt[0].box, 1, 0.5)], gt, 3, exclude_empty=False)[0.25]["map"] == \
        pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        Detection(gt[0].box, 0, float("nan"))


def scenes(seed):
    rng = np.random.default_rng(seed)
    out = []
    for s in range(rng.integers(1, 4)):
        gts, dets = [], []
        for _ in range(rng.integers(0, 4)):
            lo = rng.integers(0, 20, 3)
            pts = lo + np.argwhere(np.ones(rng.integers(1, 4, 3)))
            gts.append(InstanceAnnotation.from_mask(pts, int(rng.integers(0, 2))))
        for _ in range(rng.integers(0, 6)):
            lo = rng.uniform(0, 20, 3)
            dets.append(Detection(Box3.from_corners(lo, lo + rng.uniform(1, 4, 3)), int(rng.integers(0, 2)),
                                  float(rng.uniform())))
        for g in gts:
            if rng.uniform() < 0.5:
                dets.append(Detection(g.box, g.class_id, float(rng.uniform())))
        out.append((dets, gts))
    return out


seeds = st.integers(0, 2**31 - 1)


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_map_bounded_and_scene_order_invariant(seed):
    sc = scenes(seed)
    dets, gts = [d for d, _ in sc], [g for _, g in sc]
    res = mean_average_precision(dets, gts, 2)
    for thr in res:
        assert 0.0 <= res[thr]["map"] <= 1.0
        assert all(0.0 <= a <= 1.0 for a in res[thr]["ap"])
    rev = mean_average_precision(dets[::-1], gts[::-1], 2)
    for thr in res:
        assert res[thr]["ap"] == pytest.approx(rev[thr]["ap"])


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_map_invariant_to_monotone_score_transform(seed):
    sc = scenes(seed)
    dets, gts = [d for d, _ in sc], [g for _, g in sc]
    warped = [[Detection(d.box, d.class_id, d.score ** 3 + 2.0) for d in s] for s in dets]
    a, b = mean_average_precision(dets, gts, 2), mean_average_precision(warped, gts, 2)
    for thr in a:
        assert a[thr]["ap"] == pytest.approx(b[thr]["ap"])


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_perfect_detections_score_one(seed):
    sc = scenes(seed)
    gts = [g for _, g in sc]
    dets = [[Detection(x.box, x.class_id, 0.5) for x in g] for g in gts]
    res = mean_average_precision(dets, gts, 2, (0.25, 0.5, 0.99))
    for thr in res:
        for a, n in zip(res[thr]["ap"], res[thr]["n_gt"]):
            assert a == (1.0 if n else 0.0)


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_trailing_false_positive_keeps_ap(seed):
    sc = scenes(seed)
    dets, gts = [d for d, _ in sc], [g for _, g in sc]
    far = Detection(Box3.from_corners((100, 100, 100), (101, 101, 101)), 0, -1.0)
    more = [list(d) for d in dets]
    more[0].append(far)
    a, b = mean_average_precision(dets, gts, 2), mean_average_precision(more, gts, 2)
    for thr in a:
        assert a[thr]["ap"] == pytest.approx(b[thr]["ap"])


def test_mask_iou():
    a = np.array([[0, 0, 0], [0, 0, 1]])
    assert mask_iou(a, a) == 1.0
    assert mask_iou(a, np.array([[0, 0, 1], [5, 5, 5]])) == pytest.approx(1 / 3)
    assert mask_iou(np.zeros((0, 3)), np.zeros((0, 3))) == 0.0


def test_merge_frame_predictions():
    box = Box3.from_corners((0, 0, 0), (2, 2, 2))
    near = Box3.from_corners((0.1, 0, 0), (2.1, 2, 2))
    dets = [Detection(near, 0, 0.5), Detection(box, 0, 0.9), Detection(box, 1, 0.4),
            Detection(Box3.from_corners((5, 5, 5), (6, 6, 6)), 0, 0.1)]
    merged = merge_frame_predictions(dets)
    assert [(d.class_id, d.score) for d in merged] == [(0, 0.9), (1, 0.4), (0, 0.1)]
    assert merge_frame_predictions([]) == []
    # IoU exactly at the threshold does not merge
    half = Box3.from_corners((0, 0, 0), (1, 2, 2))
    assert len(merge_frame_predictions([Detection(box, 0, 0.9), Detection(half, 0, 0.5)], 0.5)) == 2


def test_voxelize_world_detections():
    meta = GridMeta((10, 10, 10), 0.5, (1.0, 0.0, 0.0))
    world = WorldDetection(Box3.from_corners((1.0, 0.5, 1.0), (2.0, 1.5, 2.5)), 2, 0.7,
                           mask_points=np.array([[1.25, 0.75, 1.25], [1.75, 1.25, 2.25]]), cell_size=0.5)
    (d,) = voxelize([world], meta)
    np.testing.assert_allclose(d.box.min, [0, 1, 2])
    np.testing.assert_allclose(d.box.max, [2, 3, 5])
    assert sorted(map(tuple, d.mask.tolist())) == [(0, 1, 2), (1, 2, 4)]
    # a cell twice the voxel size covers 2x2x2 voxel centers
    big = WorldDetection(world.box, 0, 1.0, mask_points=np.array([[1.5, 1.0, 1.5]]), cell_size=1.0)
    assert len(voxelize([big], meta)[0].mask) == 8
    passthrough = Detection(world.box, 0, 1.0)
    assert voxelize([passthrough], meta)[0] is passthrough


masks = st.integers(0, 2**31 - 1).map(lambda s: np.random.default_rng(s))


@settings(max_examples=100)
@given(masks)
def test_rle_roundtrip(rng):
    lo = rng.integers(-3, 5, 3)
    hi = lo + rng.integers(1, 6, 3)
    grid = rng.uniform(size=tuple(hi - lo)) < rng.uniform()
    pts = np.argwhere(grid) + lo
    back = rle_decode(rle_encode(pts, lo, hi), lo, hi)
    np.testing.assert_array_equal(back, pts)


def test_rle_reference():
    # z fastest, runs start with zeros
    pts = np.array([[0, 0, 1], [0, 1, 0]])
    assert rle_encode(pts, (0, 0, 0), (1, 2, 2)) == "1,2,1"
    assert rle_encode(np.zeros((0, 3), int), (0, 0, 0), (1, 1, 2)) == "2"
    assert rle_encode(np.array([[0, 0, 0]]), (0, 0, 0), (1, 1, 1)) == "0,1"


def test_record_roundtrip(tmp_path):
    mask = np.array([[1, 2, 3], [2, 2, 3]])
    d = Detection(Box3.from_corners((1, 2, 3), (3, 3, 4)), 2, 0.123456789, mask)
    line = format_record("scene_0001", d)
    assert line.startswith("scene_0001 2 0.123456789 1.0 2.0 3.0 3.0 3.0 4.0 rle=")
    sid, back = parse_record(line)
    assert sid == "scene_0001" and back.class_id == 2 and back.score == d.score
    np.testing.assert_array_equal(back.mask, mask)
    path = tmp_path / "p.txt"
    plain = Detection(Box3.from_corners((0, 0, 0), (1, 1, 1)), 0, 0.5)
    write_records(path, [("a", d), ("b", plain), ("a", plain)])
    recs = read_records(path)
    assert sorted(recs) == ["a", "b"] and len(recs["a"]) == 2 and recs["b"][0].mask is None
    with pytest.raises(ValueError):
        parse_record("a 0 0.5 1 2 3")
    with pytest.raises(ValueError):
        parse_record("a 0 0.5 0 0 0 1 1 1 mask=3")


def test_metrics_csv_layout():
    res = {"detection": {0.25: {"ap": [1.0, 0.5], "map": 0.75}}}
    text = metrics_csv(res, 2)
    assert text == "metric,iou,class_0,class_1,avg\ndetection,0.25,1.0000,0.5000,0.7500\n"
