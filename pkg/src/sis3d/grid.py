"""Volumetric grid and axis-aligned box geometry.

Box coordinates are continuous voxel coordinates: voxel ``(i, j, k)`` covers
``[i, i+1) x [j, j+1) x [k, k+1)``.  Rounding to integer voxel regions
happens only in :meth:`Box3.region` (floor of the min corner, ceil of the
max corner).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class EmptyCrop(ValueError):
    """The requested region has no voxels inside the grid."""


class MetaMismatch(ValueError):
    """Volumes that must share a grid do not."""


@dataclass(frozen=True)
class GridMeta:
    dims: tuple
    voxel_size: float
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"dims must be 3 positive integers, got {self.dims}")
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def n_voxels(self):
        return self.dims[0] * self.dims[1] * self.dims[2]

    def sub(self, lo, dims):
        """Meta of the sub-grid starting at integer voxel ``lo`` with ``dims``."""
        origin = np.asarray(self.origin) + np.asarray(lo, dtype=float) * self.voxel_size
        return GridMeta(tuple(dims), self.voxel_size, tuple(origin))

    def voxel_centers(self):
        """World coordinates of all voxel centers, shape ``(X, Y, Z, 3)``."""
        axes = [np.arange(n) + 0.5 for n in self.dims]
        idx = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        return np.asarray(self.origin) + idx * self.voxel_size


def world_to_voxel(p, meta):
    """Continuous voxel coordinates of world points (meters); not clamped."""
    return (np.asarray(p, dtype=np.float64) - np.asarray(meta.origin)) / meta.voxel_size


def voxel_to_world(v, meta):
    return np.asarray(v, dtype=np.float64) * meta.voxel_size + np.asarray(meta.origin)


def in_bounds(v, meta):
    """True where continuous voxel coordinates fall inside the grid."""
    v = np.asarray(v, dtype=np.float64)
    return np.all((v >= 0) & (v < np.asarray(meta.dims)), axis=-1)


@dataclass
class TsdfGrid:
    meta: GridMeta
    values: np.ndarray
    weights: np.ndarray
    truncation: float = 3.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.weights = np.asarray(self.weights, dtype=np.float32)
        if self.values.shape != self.meta.dims or self.weights.shape != self.meta.dims:
            raise MetaMismatch(f"tsdf arrays {self.values.shape} do not match dims {self.meta.dims}")

    @classmethod
    def empty(cls, meta, truncation=3.0):
        return cls(meta, np.full(meta.dims, truncation, np.float32), np.zeros(meta.dims, np.float32), truncation)

    @property
    def observed(self):
        return self.weights > 0

    def crop(self, lo, dims):
        sl = tuple(slice(a, a + n) for a, n in zip(lo, dims))
        return TsdfGrid(self.meta.sub(lo, dims), self.values[sl].copy(), self.weights[sl].copy(), self.truncation)

    def as_feature(self):
        return FeatureVolume(self.meta, self.values[None].copy())


@dataclass
class FeatureVolume:
    meta: GridMeta
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4 or self.data.shape[1:] != self.meta.dims:
            raise MetaMismatch(f"feature data {self.data.shape} does not match dims {self.meta.dims}")

    @property
    def channels(self):
        return self.data.shape[0]


@dataclass(frozen=True)
class Box3:
    center: tuple
    size: tuple

    def __post_init__(self):
        c = tuple(float(v) for v in self.center)
        s = tuple(float(v) for v in self.size)
        if len(c) != 3 or len(s) != 3:
            raise ValueError("Box3 needs 3D center and size")
        if not all(v > 0 for v in s):
            raise ValueError(f"box size must be positive, got {s}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "size", s)

    @classmethod
    def from_corners(cls, lo, hi):
        lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
        return cls(tuple((lo + hi) / 2), tuple(hi - lo))

    @property
    def min(self):
        return np.asarray(self.center) - np.asarray(self.size) / 2

    @property
    def max(self):
        return np.asarray(self.center) + np.asarray(self.size) / 2

    @property
    def volume(self):
        return float(np.prod(self.size))

    def as_array(self):
        """``[xmin, ymin, zmin, xmax, ymax, zmax]``."""
        return np.concatenate([self.min, self.max])

    def region(self, dims=None):
        """Enclosing integer voxel region ``(lo, hi)``, optionally clamped to ``dims``."""
        lo = np.floor(self.min + 1e-9).astype(int)
        hi = np.ceil(self.max - 1e-9).astype(int)
        hi = np.maximum(hi, lo + 1)
        if dims is not None:
            lo = np.clip(lo, 0, dims)
            hi = np.clip(hi, 0, dims)
        return lo, hi

    def scaled(self, factor):
        return Box3(tuple(np.asarray(self.center) * factor), tuple(np.asarray(self.size) * factor))


@dataclass
class InstanceAnnotation:
    box: Box3
    class_id: int
    mask: np.ndarray = field(repr=False)  # (n, 3) integer voxel indices

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.int64).reshape(-1, 3)
        if len(self.mask) == 0:
            raise ValueError("instance mask must be non-empty")

    @classmethod
    def from_mask(cls, mask, class_id):
        """Annotation whose box is the tight hull of ``mask`` voxels."""
        mask = np.asarray(mask, dtype=np.int64).reshape(-1, 3)
        if len(mask) == 0:
            raise ValueError("instance mask must be non-empty")
        return cls(Box3.from_corners(mask.min(axis=0), mask.max(axis=0) + 1), int(class_id), mask)


def boxes_to_array(boxes):
    if len(boxes) == 0:
        return np.zeros((0, 6))
    return np.stack([b.as_array() for b in boxes])


def box_iou(a, b):
    """Intersection-over-union of two axis-aligned boxes."""
    return float(iou_matrix(a.as_array(), b.as_array())[0, 0])


def iou_matrix(a, b):
    """Pairwise IoU of corner arrays ``(n, 6)`` and ``(m, 6)``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 6)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 6)
    lo = np.maximum(a[:, None, :3], b[None, :, :3])
    hi = np.minimum(a[:, None, 3:], b[None, :, 3:])
    inter = np.prod(np.clip(hi - lo, 0, None), axis=-1)
    va = np.prod(a[:, 3:] - a[:, :3], axis=-1)
    vb = np.prod(b[:, 3:] - b[:, :3], axis=-1)
    union = va[:, None] + vb[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return np.minimum(out, 1.0)  # identical boxes can round a hair above 1


def crop_region(dims, box):
    lo, hi = box.region(dims)
    if np.any(hi <= lo):
        raise EmptyCrop(f"box {box} does not intersect grid of dims {dims}")
    return lo, hi


def crop_volume(vol, box):
    """Sub-volume covered by the integer region enclosing ``box``, clamped to the grid."""
    lo, hi = crop_region(vol.meta.dims, box)
    sl = (slice(None),) + tuple(slice(a, b) for a, b in zip(lo, hi))
    return FeatureVolume(vol.meta.sub(lo, hi - lo), vol.data[sl].copy())


class VolumeClass(Enum):
    SMALL = "small"
    LARGE = "large"


def box_volume_class(box, voxel_size, threshold_m3=1.0):
    """Small iff the box's metric volume is strictly below ``threshold_m3``."""
    size = box.size if isinstance(box, Box3) else tuple(box)
    vol = float(np.prod(size)) * voxel_size ** 3
    return VolumeClass.SMALL if vol < threshold_m3 else VolumeClass.LARGE
