"""2D color features lifted into the voxel grid.

A small strided conv encoder turns each RGB frame into a feature map at 1/8
resolution.  Each feature cell is unprojected through the depth observed at
its center pixel and written into the single voxel containing that surface
point.  Views are then combined with an elementwise max.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .grid import FeatureVolume, MetaMismatch, in_bounds, world_to_voxel
from .nn import functional as F

DOWNSCALE = 8


@dataclass
class FeatureMap2D:
    data: nn.Tensor  # (C, h, w)
    source_resolution: tuple

    def __post_init__(self):
        h, w = self.data.shape[1:]
        H, W = self.source_resolution
        if H % h or W % w or H // h != W // w:
            raise nn.ShapeMismatch(f"feature map {h}x{w} is not an integer downscale of {H}x{W}")

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def factor(self):
        return self.source_resolution[0] // self.data.shape[1]


class Encoder2D(nn.Module):
    """Three stride-2 stages (kernel 4, padding 1), ReLU after each."""

    def __init__(self, channels=16, hidden=(8, 16), rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        c1, c2 = hidden
        self.conv1 = nn.Conv2d(3, c1, 4, 2, 1, rng=rng)
        self.conv2 = nn.Conv2d(c1, c2, 4, 2, 1, rng=rng)
        self.conv3 = nn.Conv2d(c2, channels, 4, 2, 1, rng=rng)
        self.channels = channels

    def forward(self, image):
        x = self.conv1(image).relu()
        x = self.conv2(x).relu()
        return self.conv3(x).relu()


def color_to_tensor(color):
    """``H x W x 3`` uint8 image -> ``(3, H, W)`` float tensor centered at zero."""
    arr = np.asarray(color)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    return nn.Tensor(np.ascontiguousarray(arr.transpose(2, 0, 1), dtype=np.float32) - 0.5)


def encode_2d(color, encoder):
    """Feature map at 1/8 of the image resolution."""
    h, w = np.asarray(color).shape[:2]
    if h % DOWNSCALE or w % DOWNSCALE:
        raise nn.ShapeMismatch(f"image {h}x{w} is not divisible by {DOWNSCALE}")
    return FeatureMap2D(encoder(color_to_tensor(color)), (h, w))


def cell_voxel_index(depth, intrinsics, pose, meta, feature_shape):
    """Flat destination voxel for each feature cell, or -1 when it has no valid landing voxel."""
    depth = np.asarray(depth)
    h, w = feature_shape
    factor = depth.shape[0] // h
    rows = np.arange(h) * factor + factor // 2
    cols = np.arange(w) * factor + factor // 2
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    d = depth[rr, cc].astype(np.float64)
    fx, fy, cx, cy = intrinsics
    pc = np.stack([(cc - cx) / fx * d, (rr - cy) / fy * d, d], axis=-1)
    pose = np.asarray(pose, dtype=np.float64)
    world = pc @ pose[:3, :3].T + pose[:3, 3]
    vox = np.floor(world_to_voxel(world, meta)).astype(np.int64)
    ok = (d > 0) & in_bounds(vox, meta)
    flat = np.ravel_multi_index(tuple(np.where(ok[..., None], vox, 0).reshape(-1, 3).T), meta.dims)
    return np.where(ok.reshape(-1), flat, -1)


def backproject(fmap, depth, intrinsics, pose, meta):
    """Scatter a feature map into a ``(C, X, Y, Z)`` tensor over ``meta``'s grid.

    Collisions within the view keep the elementwise max; voxels receiving no
    feature are zero.  Differentiable with respect to the feature values.
    """
    data = fmap.data if isinstance(fmap, FeatureMap2D) else nn.as_tensor(fmap)
    if np.asarray(depth).shape[0] % data.shape[1]:
        raise nn.ShapeMismatch("depth resolution is not a multiple of the feature map")
    index = cell_voxel_index(depth, intrinsics, pose, meta, data.shape[1:])
    c = data.shape[0]
    flat = F.scatter_max(data.reshape(c, -1), index, meta.n_voxels)
    return flat.reshape((c,) + meta.dims)


def backproject_view(view, encoder, meta):
    return backproject(encode_2d(view.color, encoder), view.depth, view.intrinsics, view.pose, meta)


def view_pool(volumes):
    """Elementwise max across per-view volumes.

    Accepts :class:`FeatureVolume` (returns one) or tensors (differentiable,
    gradient to the first maximising view).
    """
    if not volumes:
        raise ValueError("view_pool needs at least one volume")
    if isinstance(volumes[0], FeatureVolume):
        meta = volumes[0].meta
        if any(v.meta != meta or v.channels != volumes[0].channels for v in volumes):
            raise MetaMismatch("view_pool volumes must share grid and channel count")
        return FeatureVolume(meta, np.maximum.reduce([v.data for v in volumes]))
    if any(v.shape != volumes[0].shape for v in volumes):
        raise MetaMismatch("view_pool volumes must share grid and channel count")
    if len(volumes) == 1:
        return volumes[0]
    return nn.stack_max(volumes)
