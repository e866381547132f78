import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_roi, greedy_nms_oracle, random_boxes
from sis3d import nn
from sis3d.detect import (AnchorLabel, AnchorSet, ClassifyHead, DetectConfig, DetectionBackbone, InsufficientData,
                          RPNHead, Widths, assign_anchors, classify_head, decode_box, decode_deltas, encode_box,
                          encode_deltas, flatten_rpn, interior_margin, kmeans, kmeans_anchors, nms,
                          receptive_radius, roi_pool, rpn_forward)
from sis3d.grid import Box3, EmptyCrop, FeatureVolume, GridMeta, VolumeClass, box_volume_class, iou_matrix
from sis3d.nn.gradcheck import as_param, grad_check


def test_encode_reference_values():
    a = Box3((8.0, 0.0, 0.0), (4.0, 4.0, 4.0))
    gt = Box3((10.0, 0.0, 0.0), (8.0, 4.0, 4.0))
    d = encode_box(gt, a)
    assert d[0] == pytest.approx(0.5)
    assert d[3] == pytest.approx(np.log(2))
    np.testing.assert_allclose(encode_box(a, a), np.zeros(6))
    back = decode_box([0, 0, 0, np.log(2), 0, 0], a)
    assert back.size[0] == pytest.approx(8.0)
    assert decode_box(np.zeros(6), a) == a


@settings(max_examples=200)
@given(st.integers(0, 2**31 - 1))
def test_encode_decode_roundtrip(seed):
    rng = np.random.default_rng(seed)
    gt, an = random_boxes(rng, 50), random_boxes(rng, 50)
    back = decode_deltas(encode_deltas(gt, an), an)
    assert np.abs(back - gt).max() < 1e-9


def test_assign_anchor_reference_cases():
    cfg = DetectConfig(match_best_anchor=False)
    gt = np.array([[0, 0, 0, 4, 4, 4.0]])
    anchors = np.array([[0, 0, 0, 4, 4, 4.0],  # identical
                        [10, 10, 10, 12, 12, 12.0],  # disjoint
                        [0, 0, 0, 4, 4, 1.0]])  # IoU exactly 0.25
    labels, gi = assign_anchors(anchors, gt, cfg)
    assert labels.tolist() == [AnchorLabel.POSITIVE, AnchorLabel.NEGATIVE, AnchorLabel.IGNORE]
    assert gi.tolist() == [0, -1, -1]


def test_assign_ties_pick_lowest_gt():
    gt = np.array([[0, 0, 0, 2, 2, 2.0], [0, 0, 0, 2, 2, 2.0]])
    labels, gi = assign_anchors(gt[:1], gt, DetectConfig())
    assert labels[0] == AnchorLabel.POSITIVE and gi[0] == 0


def test_best_anchor_promotion():
    gt = np.array([[0, 0, 0, 4, 4, 4.0]])
    anchors = np.array([[2, 2, 2, 6, 6, 6.0], [20, 20, 20, 21, 21, 21.0]])
    plain, _ = assign_anchors(anchors, gt, DetectConfig(match_best_anchor=False))
    promoted, gi = assign_anchors(anchors, gt, DetectConfig(match_best_anchor=True))
    assert plain[0] == AnchorLabel.NEGATIVE
    assert promoted[0] == AnchorLabel.POSITIVE and gi[0] == 0
    assert promoted[1] == AnchorLabel.NEGATIVE


@settings(max_examples=50)
@given(st.integers(0, 2**31 - 1), st.floats(0.25, 8.0))
def test_assign_scale_invariant(seed, scale):
    rng = np.random.default_rng(seed)
    anchors, gt = random_boxes(rng, 40), random_boxes(rng, 3)
    cfg = DetectConfig(match_best_anchor=False)
    a, _ = assign_anchors(anchors, gt, cfg)
    b, _ = assign_anchors(anchors * scale, gt * scale, cfg)
    # labels flip only for anchors sitting on a threshold up to rounding
    iou = iou_matrix(anchors, gt).max(axis=1)
    near = np.isclose(iou, cfg.iou_pos, atol=1e-9) | np.isclose(iou, cfg.iou_neg, atol=1e-9)
    np.testing.assert_array_equal(a[~near], b[~near])


def test_nms_reference_cases():
    b = np.array([[0, 0, 0, 1, 1, 1.0]])
    assert nms(b, [0.5], 0.3).tolist() == [0]
    two = np.array([[0, 0, 0, 1, 1, 1.0]] * 2)
    assert nms(two, [0.8, 0.9], 0.3).tolist() == [1]
    # ties resolved by index
    assert nms(two, [0.5, 0.5], 0.3).tolist() == [0]
    assert nms(np.zeros((0, 6)), [], 0.3).tolist() == []


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([0.0, 0.1, 0.3, 0.5, 0.7]))
def test_nms_matches_oracle(seed, thr):
    rng = np.random.default_rng(seed)
    boxes = random_boxes(rng, 64)
    scores = np.round(rng.uniform(0, 1, 64), 1)  # plenty of ties
    keep = nms(boxes, scores, thr)
    assert keep.tolist() == greedy_nms_oracle(boxes, scores, thr)
    kept = boxes[keep]
    iou = iou_matrix(kept, kept)
    np.fill_diagonal(iou, 0)
    assert (iou <= thr + 1e-12).all()
    assert keep[0] == int(np.argmax(scores))


def test_roi_pool_reference_cases():
    meta = GridMeta((8, 8, 8), 1.0)
    const = FeatureVolume(meta, np.full((2, 8, 8, 8), 5.0))
    assert (roi_pool(const, Box3.from_corners((1, 1, 1), (7, 6, 5))).data == 5.0).all()
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 8, 8, 8))
    out = roi_pool(FeatureVolume(meta, x), Box3.from_corners((2, 3, 1), (6, 7, 5))).data
    np.testing.assert_array_equal(out, x[:, 2:6, 3:7, 1:5])
    ramp = np.arange(512, dtype=float).reshape(1, 8, 8, 8)
    out = roi_pool(FeatureVolume(meta, ramp), Box3.from_corners((0, 0, 0), (8, 8, 8))).data
    np.testing.assert_array_equal(out, ramp[:, 1::2, 1::2, 1::2])
    with pytest.raises(EmptyCrop):
        roi_pool(const, Box3.from_corners((9, 9, 9), (10, 10, 10)))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_roi_pool_matches_bin_scan(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 12, 11, 10))
    lo = rng.integers(0, 6, 3)
    hi = np.minimum(lo + rng.integers(1, 9, 3), x.shape[1:])
    out = roi_pool(nn.Tensor(x), np.concatenate([lo, hi]).astype(float)).data
    np.testing.assert_array_equal(out, brute_roi(x, lo, hi))


def test_roi_pool_monotone():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 9, 9, 9))
    box = np.array([1, 2, 0, 8, 9, 7.0])
    before = roi_pool(nn.Tensor(x), box).data
    y = x.copy()
    y[0, 4, 5, 3] += 3.0
    assert (roi_pool(nn.Tensor(y), box).data >= before).all()


def test_roi_pool_scale_maps_voxel_boxes_onto_feature_grid():
    x = np.arange(64.0).reshape(1, 4, 4, 4)
    a = roi_pool(nn.Tensor(x), np.array([0, 0, 0, 16, 16, 16.0]), scale=4).data
    np.testing.assert_array_equal(a, x)


def test_kmeans_reference_cases():
    c, _ = kmeans(np.array([[2, 2, 2], [4, 4, 4.0]]), 1)
    np.testing.assert_allclose(c, [[3, 3, 3]])
    pts = np.array([[1, 1, 1], [5, 5, 5], [9, 9, 9.0]])
    c, labels = kmeans(pts, 3, seed=4)
    np.testing.assert_allclose(np.sort(c, axis=0), pts)
    with pytest.raises(InsufficientData):
        kmeans(np.ones((5, 3)), 2)


def test_kmeans_anchors_partition_by_volume():
    rng = np.random.default_rng(0)
    small = rng.uniform(3, 5, (40, 3))
    large = rng.uniform(20, 30, (40, 3))
    a = kmeans_anchors(np.concatenate([small, large]), k=4, voxel_size=0.05)
    assert sum(a.n_anchors) == 4
    for s in a.small:
        assert box_volume_class(s, 0.05) is VolumeClass.SMALL
    for s in a.large:
        assert box_volume_class(s, 0.05) is VolumeClass.LARGE


def test_anchor_set_rejects_misfiled_size():
    with pytest.raises(ValueError):
        AnchorSet(small=[[100, 100, 100]], large=[[1, 1, 1]], voxel_size=0.05)


def test_anchor_placement_order_and_centers():
    a = AnchorSet([[4, 4, 4], [2, 2, 2]], [[30, 30, 30]], voxel_size=0.01, split_m3=1e-3)
    placed = a.place(0, (2, 1, 1))
    assert placed.shape == (4, 6)
    np.testing.assert_allclose(placed[0], [0, 0, 0, 4, 4, 4])
    np.testing.assert_allclose(placed[1], [4, 0, 0, 8, 4, 4])
    np.testing.assert_allclose(placed[2], [1, 1, 1, 3, 3, 3])
    d = a.to_dict()
    b = AnchorSet.from_dict(d)
    np.testing.assert_array_equal(b.small, a.small)


def test_rpn_channel_counts_and_flatten():
    head = RPNHead(4, 6, 3, rng=np.random.default_rng(0))
    feat = nn.Tensor(np.random.default_rng(1).standard_normal((4, 6, 3, 6)))
    ((obj, deltas),) = rpn_forward([feat], [head])
    assert obj.shape == (6, 6, 3, 6) and deltas.shape == (18, 6, 3, 6)
    logits, d = flatten_rpn(obj, deltas, 3)
    assert logits.shape == (3 * 108, 2) and d.shape == (3 * 108, 6)
    # row (anchor 1, cell 5) gathers channels 2..3 and 6..11 at that cell
    np.testing.assert_array_equal(logits.data[108 + 5], obj.data[2:4].reshape(2, -1)[:, 5])
    np.testing.assert_array_equal(d.data[108 + 5], deltas.data[6:12].reshape(6, -1)[:, 5])
    with pytest.raises(nn.ShapeMismatch):
        rpn_forward([feat], [head, head])


def test_rpn_gradcheck():
    rng = np.random.default_rng(2)
    head = RPNHead(2, 3, 2, rng=rng)
    for p in head.parameters():
        p.data = p.data.astype(np.float64)
    x = as_param(rng.standard_normal((2, 3, 3, 2)))
    w = nn.Tensor(rng.standard_normal((16, 3, 3, 2)))

    def fn():
        o, d = head(x)
        return (nn.concat([o, d], 0) * w).sum()

    assert grad_check(fn, [x] + head.parameters()).passed


def test_classify_head_shapes_and_zero_weights():
    rng = np.random.default_rng(3)
    head = ClassifyHead(2, 5, hidden=8, out=4, rng=rng)
    logits, boxes = classify_head(nn.Tensor(rng.standard_normal((2, 4, 4, 4))), head)
    assert logits.shape == (5,) and boxes.shape == (30,)
    for p in head.parameters():
        p.data[...] = 0
    head.cls.bias.data[:] = np.arange(5)
    logits, _ = classify_head(nn.Tensor(rng.standard_normal((2, 4, 4, 4))), head)
    np.testing.assert_array_equal(logits.data, np.arange(5))
    with pytest.raises(nn.ShapeMismatch):
        head(nn.Tensor(np.zeros((3, 4, 4, 4))))


def test_classify_head_gradcheck():
    rng = np.random.default_rng(4)
    head = ClassifyHead(1, 3, hidden=4, out=3, rng=rng)
    for p in head.parameters():
        p.data = p.data.astype(np.float64)
    x = as_param(rng.standard_normal((1, 4, 4, 4)))
    w = nn.Tensor(rng.standard_normal(21))

    def fn():
        lg, bx = classify_head(x, head)
        return (nn.concat([lg, bx], 0) * w).sum()

    assert grad_check(fn, [x] + head.parameters()).passed


def test_backbone_shapes_and_receptive_field():
    w = Widths.scaled(16, color=4)
    bb = DetectionBackbone(w, use_color=True, rng=np.random.default_rng(0))
    dims = (32, 32, 16)
    geo = np.zeros((1,) + dims)
    col = np.zeros((4,) + dims)
    base = [t.data for t in bb(nn.Tensor(geo), nn.Tensor(col))]
    for t in base:
        assert t.shape[1:] == (8, 8, 4)
    # an impulse may only influence feature cells whose receptive field covers it
    geo2 = geo.copy()
    geo2[0, 5, 6, 7] = 1.0
    changed = np.zeros((8, 8, 4), bool)
    for t0, t1 in zip(base, bb(nn.Tensor(geo2), nn.Tensor(col))):
        changed |= np.any(t0 != t1.data, axis=0)
    r = receptive_radius()
    for cell in np.argwhere(changed):
        center = (cell + 0.5) * 4
        assert np.all(np.abs(center - np.array([5.5, 6.5, 7.5])) <= r)
    assert interior_margin() * 4 >= r
