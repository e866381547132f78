import numpy as np
import pytest

from sis3d import nn
from sis3d.grid import Box3, EmptyCrop, FeatureVolume, GridMeta, InstanceAnnotation, MetaMismatch, TsdfGrid
from sis3d.mask import (MaskBackbone, MaskHead, build_mask_targets, crop_region, mask_backbone, mask_logits,
                        mask_predict)
from sis3d.nn.gradcheck import as_param, grad_check


def cube_ann(lo, hi, cls=0):
    axes = [np.arange(a, b) for a, b in zip(lo, hi)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    return InstanceAnnotation.from_mask(pts, cls)


def test_backbone_keeps_resolution():
    bb = MaskBackbone(width=3, color_channels=2, rng=np.random.default_rng(0))
    out = bb(nn.Tensor(np.zeros((1, 6, 5, 4))), nn.Tensor(np.zeros((2, 6, 5, 4))))
    assert out.shape == (3, 6, 5, 4)
    geo_only = MaskBackbone(width=3, use_color=False, rng=np.random.default_rng(0))
    assert geo_only(nn.Tensor(np.zeros((1, 6, 5, 4)))).shape == (3, 6, 5, 4)
    with pytest.raises(MetaMismatch):
        bb(nn.Tensor(np.zeros((1, 6, 5, 4))), nn.Tensor(np.zeros((2, 6, 5, 2))))


def test_mask_backbone_on_grids():
    meta = GridMeta((4, 4, 4), 0.1)
    tsdf = TsdfGrid.empty(meta)
    bb = MaskBackbone(width=2, color_channels=1, rng=np.random.default_rng(0))
    out = mask_backbone(tsdf, FeatureVolume(meta, np.zeros((1, 4, 4, 4))), bb)
    assert out.shape == (2, 4, 4, 4)
    with pytest.raises(MetaMismatch):
        mask_backbone(tsdf, FeatureVolume(GridMeta((4, 4, 4), 0.2), np.zeros((1, 4, 4, 4))), bb)


def test_mask_logits_pick_class_channel_over_region():
    head = MaskHead(2, 3, rng=np.random.default_rng(0))
    f = np.random.default_rng(1).standard_normal((2, 6, 6, 6))
    full = head(nn.Tensor(f)).data
    lg = mask_logits(nn.Tensor(f), (1, 2, 0), (4, 6, 3), 2, head)
    np.testing.assert_allclose(lg.data, full[2, 1:4, 2:6, 0:3])
    with pytest.raises(ValueError):
        mask_logits(nn.Tensor(f), (0, 0, 0), (1, 1, 1), 3, head)


def test_mask_predict_region_and_range():
    head = MaskHead(2, 2, rng=np.random.default_rng(0))
    f = np.random.default_rng(2).standard_normal((2, 8, 8, 8))
    prob, lo, hi = mask_predict(f, Box3.from_corners((1.5, 0, 6), (3.2, 2, 9)), 1, head)
    assert lo.tolist() == [1, 0, 6] and hi.tolist() == [4, 2, 8]
    assert prob.shape == (3, 2, 2)
    assert ((prob.data > 0) & (prob.data < 1)).all()
    with pytest.raises(EmptyCrop):
        crop_region(np.array([8, 8, 8]), Box3.from_corners((9, 9, 9), (10, 10, 10)))


def test_mask_head_gradcheck():
    rng = np.random.default_rng(3)
    bb = MaskBackbone(width=2, color_channels=1, rng=rng)
    head = MaskHead(2, 2, rng=rng)
    params = bb.parameters() + head.parameters()
    for p in params:
        p.data = p.data.astype(np.float64)
    geo = as_param(rng.standard_normal((1, 4, 4, 3)))
    col = as_param(rng.standard_normal((1, 4, 4, 3)))
    target = nn.Tensor((rng.uniform(size=(2, 3, 2)) > 0.5).astype(float))

    def fn():
        lg = mask_logits(bb(geo, col), (1, 0, 1), (3, 3, 3), 1, head)
        return nn.bce_with_logits(lg, target)

    assert grad_check(fn, [geo, col] + params).passed


def test_targets_gate_and_restriction():
    gt = [cube_ann((2, 2, 2), (6, 6, 6), 1)]
    exact = build_mask_targets([gt[0].box], gt)
    assert len(exact) == 1
    t = exact[0]
    assert t.gt_index == 0 and t.lo.tolist() == [2, 2, 2] and t.hi.tolist() == [6, 6, 6]
    assert t.target.all()
    # shifted by one voxel on x: IoU 3/5, region is the intersection
    shifted = build_mask_targets([np.array([3, 2, 2, 7, 6, 6.0])], gt)
    assert shifted[0].lo.tolist() == [3, 2, 2] and shifted[0].hi.tolist() == [6, 6, 6]
    # IoU 1/3 falls below the gate
    assert build_mask_targets([np.array([4, 2, 2, 8, 6, 6.0])], gt) == []
    assert build_mask_targets([], gt) == []


def test_targets_follow_the_mask_not_the_box():
    pts = np.array([[2, 2, 2], [3, 3, 3]])
    gt = [InstanceAnnotation.from_mask(pts, 0)]
    (t,) = build_mask_targets([gt[0].box], gt)
    assert t.target.sum() == 2
    assert t.target[0, 0, 0] == 1 and t.target[1, 1, 1] == 1 and t.target[0, 1, 0] == 0


def test_targets_clip_to_grid():
    gt = [cube_ann((0, 0, 0), (4, 4, 4))]
    (t,) = build_mask_targets([np.array([-1, 0, 0, 4, 4, 4.0])], gt, dims=np.array([4, 4, 4]))
    assert t.lo.tolist() == [0, 0, 0] and t.hi.tolist() == [4, 4, 4]
