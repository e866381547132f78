"""Per-voxel instance masks over full-resolution mask features."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .grid import Box3, EmptyCrop, MetaMismatch, iou_matrix


@dataclass
class MaskTarget:
    proposal_index: int
    gt_index: int
    lo: np.ndarray  # integer region, inclusive start
    hi: np.ndarray  # exclusive end
    target: np.ndarray  # binary grid over the region

    @property
    def region(self):
        return self.lo, self.hi


class MaskBackbone(nn.Module):
    """Geometry and color branches of two 3x3x3 convs each, joined by two more; stride 1 throughout."""

    def __init__(self, width=8, color_channels=16, use_color=True, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.use_color = use_color
        self.geo1 = nn.Conv3d(1, width, 3, 1, 1, rng=rng)
        self.geo2 = nn.Conv3d(width, width, 3, 1, 1, rng=rng)
        joined = width
        if use_color:
            self.color1 = nn.Conv3d(color_channels, width, 3, 1, 1, rng=rng)
            self.color2 = nn.Conv3d(width, width, 3, 1, 1, rng=rng)
            joined += width
        self.join1 = nn.Conv3d(joined, width, 3, 1, 1, rng=rng)
        self.join2 = nn.Conv3d(width, width, 3, 1, 1, rng=rng)

    def forward(self, tsdf, color=None):
        g = self.geo2(self.geo1(tsdf).relu()).relu()
        if self.use_color:
            if color is None or color.shape[1:] != tsdf.shape[1:]:
                raise MetaMismatch("color volume must share the tsdf grid")
            c = self.color2(self.color1(color).relu()).relu()
            g = nn.concat([g, c], axis=0)
        return self.join2(self.join1(g).relu()).relu()


def mask_backbone(tsdf, colorvol, backbone):
    """Run the backbone on grid objects; returns a ``(width, X, Y, Z)`` tensor."""
    if colorvol is not None and colorvol.meta != tsdf.meta:
        raise MetaMismatch("tsdf and color volume must share a grid")
    geo = nn.Tensor(tsdf.values[None] / tsdf.truncation)
    col = nn.Tensor(colorvol.data) if colorvol is not None else None
    return backbone(geo, col)


class MaskHead(nn.Module):
    """1x1x1 conv to one logit channel per class."""

    def __init__(self, width, n_classes, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_classes = n_classes
        self.conv = nn.Conv3d(width, n_classes, 1, rng=rng)

    def forward(self, features):
        return self.conv(features)


def crop_region(dims, box):
    lo, hi = box.region(dims) if isinstance(box, Box3) else _corner_region(box, dims)
    if np.any(hi <= lo):
        raise EmptyCrop(f"{box} does not intersect grid {dims}")
    return lo, hi


def _corner_region(c, dims):
    c = np.asarray(c, dtype=np.float64)
    lo = np.clip(np.floor(c[:3] + 1e-9).astype(int), 0, dims)
    hi = np.clip(np.ceil(c[3:] - 1e-9).astype(int), 0, dims)
    return lo, hi


def mask_logits(features, lo, hi, class_id, head):
    """Logits of ``class_id`` over the region ``[lo, hi)`` of the mask features."""
    if not 0 <= class_id < head.n_classes:
        raise ValueError(f"class {class_id} outside [0, {head.n_classes})")
    sl = (slice(None),) + tuple(slice(int(a), int(b)) for a, b in zip(lo, hi))
    logits = head(features[sl])
    return logits[class_id]


def mask_predict(features, box, class_id, head):
    """Mask probabilities over the box's integer region; returns ``(probabilities, lo, hi)``."""
    feats = features if isinstance(features, nn.Tensor) else nn.Tensor(features)
    lo, hi = crop_region(np.array(feats.shape[1:]), box)
    return mask_logits(feats, lo, hi, class_id, head).sigmoid(), lo, hi


def _region_of(corners):
    c = np.asarray(corners, dtype=np.float64)
    return np.floor(c[:3] + 1e-9).astype(int), np.ceil(c[3:] - 1e-9).astype(int)


def build_mask_targets(proposals, gts, gate=0.5, dims=None):
    """Targets for proposals overlapping a ground-truth box with IoU >= ``gate``.

    The target region is the intersection of the proposal's and the matched
    box's integer regions; its values are the gt mask restricted there.
    """
    if len(proposals) == 0 or len(gts) == 0:
        return []
    props = np.stack([p.as_array() if isinstance(p, Box3) else np.asarray(p, dtype=float) for p in proposals])
    boxes = np.stack([g.box.as_array() for g in gts])
    iou = iou_matrix(props, boxes)
    out = []
    for i in range(len(props)):
        j = int(np.argmax(iou[i]))
        if iou[i, j] < gate:
            continue
        plo, phi = _region_of(props[i])
        glo, ghi = _region_of(boxes[j])
        lo, hi = np.maximum(plo, glo), np.minimum(phi, ghi)
        if dims is not None:
            lo, hi = np.clip(lo, 0, dims), np.clip(hi, 0, dims)
        if np.any(hi <= lo):
            continue
        target = np.zeros(tuple(hi - lo), dtype=np.float32)
        m = gts[j].mask
        inside = np.all((m >= lo) & (m < hi), axis=1)
        idx = m[inside] - lo
        target[tuple(idx.T)] = 1.0
        out.append(MaskTarget(i, j, lo, hi, target))
    return out
