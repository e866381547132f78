"""Anchor-based 3D detection: backbone, region proposals, RoI pooling, classification."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from . import nn
from .grid import Box3, EmptyCrop, VolumeClass, box_volume_class, iou_matrix
from .nn import functional as F

BACKBONE_STRIDE = 4


class InsufficientData(ValueError):
    pass


@dataclass
class DetectConfig:
    n_classes: int = 3
    iou_pos: float = 0.35
    iou_neg: float = 0.15
    nms_train: float = 0.7
    nms_test: float = 0.3
    roi_dims: tuple = (4, 4, 4)
    mask_iou_gate: float = 0.5
    pre_nms_top_k: int = 256
    post_nms_top_k: int = 32
    match_best_anchor: bool = True
    refine_boxes: bool = True

    def __post_init__(self):
        if not 0 <= self.iou_neg < self.iou_pos <= 1:
            raise ValueError("need 0 <= iou_neg < iou_pos <= 1")


@dataclass
class AnchorSet:
    """Anchor sizes in voxels, split into a small and a large level."""

    small: np.ndarray
    large: np.ndarray
    stride: int = BACKBONE_STRIDE
    voxel_size: float = 0.0469
    split_m3: float = 1.0

    def __post_init__(self):
        self.small = np.asarray(self.small, dtype=np.float64).reshape(-1, 3)
        self.large = np.asarray(self.large, dtype=np.float64).reshape(-1, 3)
        for s in self.small:
            if box_volume_class(s, self.voxel_size, self.split_m3) is not VolumeClass.SMALL:
                raise ValueError(f"anchor {s} is not small")
        for s in self.large:
            if box_volume_class(s, self.voxel_size, self.split_m3) is not VolumeClass.LARGE:
                raise ValueError(f"anchor {s} is not large")

    @classmethod
    def from_sizes(cls, sizes, voxel_size=0.0469, split_m3=1.0, stride=BACKBONE_STRIDE):
        sizes = np.asarray(sizes, dtype=np.float64).reshape(-1, 3)
        sizes = sizes[np.argsort(np.prod(sizes, axis=1), kind="stable")]
        small = [s for s in sizes if box_volume_class(s, voxel_size, split_m3) is VolumeClass.SMALL]
        large = [s for s in sizes if box_volume_class(s, voxel_size, split_m3) is VolumeClass.LARGE]
        return cls(np.array(small).reshape(-1, 3), np.array(large).reshape(-1, 3), stride, voxel_size, split_m3)

    @property
    def n_anchors(self):
        return (len(self.small), len(self.large))

    def level(self, i):
        return self.small if i == 0 else self.large

    def place(self, level, feature_dims):
        """Corner array ``(N * X * Y * Z, 6)`` in voxel coordinates, ordered (anchor, x, y, z)."""
        sizes = self.level(level)
        axes = [(np.arange(n) + 0.5) * self.stride for n in feature_dims]
        centers = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        c = np.broadcast_to(centers[None], (len(sizes),) + centers.shape)
        half = sizes[:, None, :] / 2
        return np.concatenate([c - half, c + half], axis=-1).reshape(-1, 6)

    def to_dict(self):
        return {"small": self.small.tolist(), "large": self.large.tolist(), "stride": self.stride,
                "voxel_size": self.voxel_size, "split_m3": self.split_m3}

    @classmethod
    def from_dict(cls, d):
        return cls(d["small"], d["large"], d.get("stride", BACKBONE_STRIDE), d.get("voxel_size", 0.0469),
                   d.get("split_m3", 1.0))


# -- anchor sizes by k-means ---------------------------------------------------

def _kmeans_pp(x, k, rng):
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = np.min(((x[:, None] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        if d2.sum() == 0:
            centers.append(x[rng.integers(len(x))])
            continue
        centers.append(x[rng.choice(len(x), p=d2 / d2.sum())])
    return np.array(centers, dtype=np.float64)


def kmeans(x, k, seed=0, max_iter=100):
    """Lloyd iterations from a seeded k-means++ start; returns (centroids, labels)."""
    x = np.asarray(x, dtype=np.float64)
    if len(np.unique(x, axis=0)) < k:
        raise InsufficientData(f"need at least {k} distinct points, got {len(np.unique(x, axis=0))}")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, k, rng)
    labels = None
    for _ in range(max_iter):
        d2 = ((x[:, None] - centers[None]) ** 2).sum(-1)
        new = np.argmin(d2, axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            members = x[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
            else:
                centers[j] = x[np.argmax(d2.min(axis=1))]
    return centers, labels


def kmeans_anchors(sizes, k=14, seed=0, voxel_size=0.0469, split_m3=1.0, stride=BACKBONE_STRIDE):
    """Cluster ground-truth box extents into ``k`` anchor sizes and split by volume."""
    sizes = np.asarray([b.size if isinstance(b, Box3) else b for b in sizes], dtype=np.float64).reshape(-1, 3)
    centers, _ = kmeans(sizes, k, seed)
    return AnchorSet.from_sizes(centers, voxel_size, split_m3, stride)


# -- box parameterisation --------------------------------------------------------

def corners_to_center_size(c):
    c = np.asarray(c, dtype=np.float64)
    return (c[..., :3] + c[..., 3:]) / 2, c[..., 3:] - c[..., :3]


def center_size_to_corners(mu, phi):
    return np.concatenate([mu - phi / 2, mu + phi / 2], axis=-1)


def encode_deltas(gt, anchors):
    """Vectorised box encoding between corner arrays ``(..., 6)``."""
    mu, phi = corners_to_center_size(gt)
    mu_a, phi_a = corners_to_center_size(anchors)
    return np.concatenate([(mu - mu_a) / phi_a, np.log(phi / phi_a)], axis=-1)


def decode_deltas(deltas, anchors, max_log=4.0):
    mu_a, phi_a = corners_to_center_size(anchors)
    deltas = np.asarray(deltas, dtype=np.float64)
    mu = mu_a + deltas[..., :3] * phi_a
    phi = phi_a * np.exp(np.clip(deltas[..., 3:], -max_log, max_log))
    return center_size_to_corners(mu, phi)


def encode_box(gt, anchor):
    """``(dx, dy, dz, dw, dh, dl)`` of ``gt`` relative to ``anchor``."""
    mu, phi = np.asarray(gt.center), np.asarray(gt.size)
    mu_a, phi_a = np.asarray(anchor.center), np.asarray(anchor.size)
    return np.concatenate([(mu - mu_a) / phi_a, np.log(phi / phi_a)])


def decode_box(deltas, anchor):
    d = np.asarray(deltas, dtype=np.float64)
    mu_a, phi_a = np.asarray(anchor.center), np.asarray(anchor.size)
    return Box3(tuple(mu_a + d[:3] * phi_a), tuple(phi_a * np.exp(d[3:])))


# -- anchor association ----------------------------------------------------------

class AnchorLabel(IntEnum):
    IGNORE = -1
    NEGATIVE = 0
    POSITIVE = 1


def assign_anchors(anchors, gt, cfg):
    """Label anchors by their best-overlapping ground-truth box.

    Returns ``(labels, gt_index)``.  IoU above ``cfg.iou_pos`` is positive,
    below ``cfg.iou_neg`` negative, in between ignored.  Ties pick the lowest
    gt index.  With ``cfg.match_best_anchor`` the highest-IoU anchor of each
    gt that no threshold reached is promoted to positive as well.
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 6)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 6)
    labels = np.full(len(anchors), AnchorLabel.NEGATIVE, dtype=np.int64)
    gt_index = np.full(len(anchors), -1, dtype=np.int64)
    if len(gt) == 0 or len(anchors) == 0:
        return labels, gt_index
    iou = iou_matrix(anchors, gt)
    best = np.argmax(iou, axis=1)
    best_iou = iou[np.arange(len(anchors)), best]
    labels[best_iou >= cfg.iou_neg] = AnchorLabel.IGNORE
    pos = best_iou > cfg.iou_pos
    labels[pos] = AnchorLabel.POSITIVE
    gt_index[pos] = best[pos]
    if cfg.match_best_anchor:
        covered = np.zeros(len(gt), dtype=bool)
        covered[best[pos]] = True
        for g in np.flatnonzero(~covered):
            col = iou[:, g]
            a = int(np.argmax(col))
            if col[a] > 0 and labels[a] != AnchorLabel.POSITIVE:
                labels[a] = AnchorLabel.POSITIVE
                gt_index[a] = g
    return labels, gt_index


# -- non-maximum suppression -------------------------------------------------------

def nms(boxes, scores, threshold):
    """Greedy suppression; returns kept indices in descending score order.

    ``boxes`` is a corner array ``(n, 6)`` or a list of :class:`Box3`.
    Equal scores are visited in index order.
    """
    if len(boxes) and isinstance(boxes[0], Box3):
        boxes = np.stack([b.as_array() for b in boxes])
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 6)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    keep = []
    alive = np.ones(len(boxes), dtype=bool)
    for i in order:
        if not alive[i]:
            continue
        keep.append(int(i))
        alive[i] = False
        rest = np.flatnonzero(alive)
        if rest.size:
            ov = iou_matrix(boxes[i], boxes[rest])[0]
            alive[rest[ov > threshold]] = False
    return np.array(keep, dtype=np.int64)


# -- RoI pooling -------------------------------------------------------------------

def roi_region(box_corners, dims, scale=1.0):
    """Integer region of a box given in voxels, mapped onto a grid downscaled by ``scale``."""
    c = np.asarray(box_corners, dtype=np.float64) / scale
    lo = np.clip(np.floor(c[:3] + 1e-9).astype(int), 0, dims)
    hi = np.clip(np.ceil(c[3:] - 1e-9).astype(int), 0, dims)
    hi = np.maximum(hi, np.minimum(lo + 1, dims))
    if np.any(hi <= lo):
        raise EmptyCrop(f"box {box_corners} misses grid {dims}")
    return lo, hi


def roi_pool(volume, box, scale=1.0, bins=4):
    """Max-pool the features under ``box`` into a ``(C, bins, bins, bins)`` block."""
    data = volume if isinstance(volume, nn.Tensor) else nn.Tensor(getattr(volume, "data", volume))
    corners = box.as_array() if isinstance(box, Box3) else box
    lo, hi = roi_region(corners, np.array(data.shape[1:]), scale)
    return F.roi_pool(data, lo, hi, bins)


# -- networks ----------------------------------------------------------------------

class ResBlock(nn.Module):
    """Bottleneck 1x1 -> 3x3 -> 1x1 with an identity skip."""

    def __init__(self, c, mid, rng):
        super().__init__()
        self.reduce = nn.Conv3d(c, mid, 1, rng=rng)
        self.conv = nn.Conv3d(mid, mid, 3, 1, 1, rng=rng)
        self.expand = nn.Conv3d(mid, c, 1, rng=rng)
        # identity at init, so stacked blocks do not inflate activations and drown the sparse color branch
        self.expand.weight.data[...] = 0.0

    def forward(self, x):
        y = self.reduce(x).relu()
        y = self.conv(y).relu()
        return (x + self.expand(y)).relu()


@dataclass
class Widths:
    """Channel widths; the defaults are the reference widths divided by 8."""

    narrow: int = 4
    mid: int = 8
    wide: int = 16
    rpn: int = 32
    cls: int = 32
    cls_out: int = 16
    mask: int = 8
    color: int = 16

    @classmethod
    def scaled(cls, divisor=8, color=None):
        d = divisor
        return cls(max(32 // d, 1), max(64 // d, 1), max(128 // d, 1), max(256 // d, 1), max(256 // d, 1),
                   max(128 // d, 1), max(64 // d, 1), color if color is not None else max(128 // d, 1))


class DetectionBackbone(nn.Module):
    """Two-branch encoder reducing space by 4; yields small- and large-anchor feature maps."""

    def __init__(self, widths, use_color=True, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        w = widths
        self.use_color = use_color
        self.geo_down1 = nn.Conv3d(1, w.narrow, 2, 2, rng=rng)
        self.geo_block1 = ResBlock(w.narrow, w.narrow, rng)
        self.geo_block2 = ResBlock(w.narrow, w.narrow, rng)
        self.geo_down2 = nn.Conv3d(w.narrow, w.mid, 2, 2, rng=rng)
        self.geo_block3 = ResBlock(w.mid, w.narrow, rng)
        self.geo_block4 = ResBlock(w.mid, w.narrow, rng)
        joined = w.mid
        if use_color:
            self.color_down1 = nn.Conv3d(w.color, w.mid, 2, 2, rng=rng)
            self.color_block1 = ResBlock(w.mid, w.narrow, rng)
            self.color_down2 = nn.Conv3d(w.mid, w.mid, 2, 2, rng=rng)
            self.color_block2 = ResBlock(w.mid, w.narrow, rng)
            joined += w.mid
        self.combine = nn.Conv3d(joined, w.wide, 3, 1, 1, rng=rng)
        self.combine_block1 = ResBlock(w.wide, w.mid, rng)
        self.combine_block2 = ResBlock(w.wide, w.mid, rng)

    def forward(self, tsdf, color=None):
        g = self.geo_down1(tsdf).relu()
        g = self.geo_block2(self.geo_block1(g))
        g = self.geo_down2(g).relu()
        g = self.geo_block4(self.geo_block3(g))
        if self.use_color:
            c = self.color_down1(color).relu()
            c = F.maxpool3d(self.color_block1(c), 3, 1, 1)
            c = self.color_down2(c).relu()
            c = F.maxpool3d(self.color_block2(c), 3, 1, 1)
            g = nn.concat([g, c], axis=0)
        x = self.combine(g).relu()
        small = self.combine_block1(x)
        deep = self.combine_block2(small)
        large = F.maxpool3d(deep, 3, 1, 1)
        return small, large, deep


# (kernel, stride) along either backbone branch; both branches have the same depth profile
_BACKBONE_CHAIN = [(2, 2), (3, 1), (3, 1), (2, 2), (3, 1), (3, 1), (3, 1), (3, 1), (3, 1), (3, 1)]


def receptive_radius():
    """Half-width, in input voxels, of the detection backbone's receptive field."""
    rf, jump = 1, 1
    for k, s in _BACKBONE_CHAIN:
        rf += (k - 1) * jump
        jump *= s
    return (rf + 1) // 2


def interior_margin():
    """Feature cells to discard at each border before chunked and full passes agree."""
    return -(-receptive_radius() // BACKBONE_STRIDE) + 1


class RPNHead(nn.Module):
    """3x3x3 conv then 1x1x1 heads emitting 2N objectness and 6N delta channels."""

    def __init__(self, c_in, hidden, n_anchors, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_anchors = n_anchors
        self.conv = nn.Conv3d(c_in, hidden, 3, 1, 1, rng=rng)
        self.cls = nn.Conv3d(hidden, 2 * n_anchors, 1, rng=rng)
        self.bbox = nn.Conv3d(hidden, 6 * n_anchors, 1, rng=rng)
        self.cls.weight.data *= 0.1
        self.bbox.weight.data *= 0.1

    def forward(self, x):
        h = self.conv(x).relu()
        return self.cls(h), self.bbox(h)


def rpn_forward(features, heads):
    """Apply per-level heads; returns ``[(objectness, deltas), ...]``."""
    if len(features) != len(heads):
        raise nn.ShapeMismatch("one head per feature level required")
    return [head(f) if head is not None else None for f, head in zip(features, heads)]


def flatten_rpn(objectness, deltas, n_anchors):
    """Reshape level outputs to per-anchor rows ordered (anchor, x, y, z)."""
    spatial = objectness.shape[1:]
    n_cells = int(np.prod(spatial))
    logits = objectness.reshape(n_anchors, 2, n_cells).transpose(0, 2, 1).reshape(n_anchors * n_cells, 2)
    d = deltas.reshape(n_anchors, 6, n_cells).transpose(0, 2, 1).reshape(n_anchors * n_cells, 6)
    return logits, d


class ClassifyHead(nn.Module):
    """MLP over a flattened RoI block with class-logit and per-class box heads."""

    def __init__(self, c_in, n_classes, hidden=32, out=16, roi=4, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_classes = n_classes
        self.in_features = c_in * roi ** 3
        self.fc1 = nn.Linear(self.in_features, hidden, rng=rng)
        self.fc2 = nn.Linear(hidden, hidden, rng=rng)
        self.fc3 = nn.Linear(hidden, out, rng=rng)
        self.cls = nn.Linear(out, n_classes, rng=rng)
        self.bbox = nn.Linear(out, n_classes * 6, rng=rng)
        self.bbox.weight.data *= 0.1

    def forward(self, block):
        if block.data.size % self.in_features:
            raise nn.ShapeMismatch(f"expected {self.in_features} features per roi, got {block.shape}")
        x = block.reshape(-1, self.in_features)
        x = self.fc1(x).relu()
        x = self.fc2(x).relu()
        x = self.fc3(x).relu()
        return self.cls(x), self.bbox(x)


def classify_head(roi_block, head):
    logits, boxes = head(roi_block)
    return logits.reshape(-1), boxes.reshape(-1)
