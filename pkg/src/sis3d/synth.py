"""Synthetic rooms of axis-aligned boxes, virtual RGB-D scanning and TSDF fusion.

World frame: meters, +z up, floor at z = 0, room spanning
``[0, room_x] x [0, room_y]``.  Cameras follow the OpenCV convention
(x right, y down, z forward); poses are camera-to-world.  Pixel ``(r, c)``
has image coordinates ``u = c, v = r``, i.e. pixel centers sit on integers.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import Box3, GridMeta, InstanceAnnotation, TsdfGrid

CLASS_COLORS = np.array([
    [0.85, 0.20, 0.20],
    [0.20, 0.75, 0.25],
    [0.20, 0.30, 0.85],
    [0.85, 0.80, 0.20],
    [0.70, 0.25, 0.80],
    [0.20, 0.80, 0.80],
])
# base object extents in meters (x, y, z); class i uses row i mod len
CLASS_SIZES = np.array([
    [0.30, 0.30, 0.30],
    [0.50, 0.40, 0.45],
    [0.70, 0.50, 0.30],
])
FLOOR_ALBEDO = (0.55, 0.50, 0.45)
WALL_ALBEDO = (0.80, 0.80, 0.75)
STRUCTURE = -1


class PlacementFailure(RuntimeError):
    """Rejection sampling could not place the requested objects."""


@dataclass(frozen=True)
class SceneObject:
    class_id: int
    box: Box3  # world meters
    albedo: tuple


@dataclass
class SceneSpec:
    room: tuple
    objects: list = field(default_factory=list)
    seed: int = 0

    def to_dict(self):
        return {
            "room": list(self.room),
            "seed": int(self.seed),
            "objects": [
                {"class_id": o.class_id, "center": list(o.box.center), "size": list(o.box.size), "albedo": list(o.albedo)}
                for o in self.objects
            ],
        }

    @classmethod
    def from_dict(cls, d):
        objs = [SceneObject(int(o["class_id"]), Box3(o["center"], o["size"]), tuple(o["albedo"])) for o in d["objects"]]
        return cls(tuple(d["room"]), objs, int(d["seed"]))


@dataclass
class CameraView:
    intrinsics: tuple  # fx, fy, cx, cy
    pose: np.ndarray  # 4x4 camera-to-world
    depth: np.ndarray  # H x W meters, 0 = invalid
    color: np.ndarray  # H x W x 3 uint8
    instance: np.ndarray | None = None  # H x W object index, -1 structure/miss

    def __post_init__(self):
        fx, fy = self.intrinsics[:2]
        if not (fx > 0 and fy > 0):
            raise ValueError("focal lengths must be positive")
        self.pose = np.asarray(self.pose, dtype=np.float64)
        rot = self.pose[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
            raise ValueError("pose rotation is not orthonormal")
        self.depth = np.asarray(self.depth, dtype=np.float32)
        if np.any(self.depth < 0):
            raise ValueError("depth must be non-negative")

    @property
    def resolution(self):
        return self.depth.shape

    def project(self, points):
        """World points -> (pixel rows, pixel cols, camera z), nearest pixel."""
        fx, fy, cx, cy = self.intrinsics
        rot, t = self.pose[:3, :3], self.pose[:3, 3]
        pc = (np.asarray(points, dtype=np.float64) - t) @ rot
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = fx * pc[..., 0] / z + cx
            v = fy * pc[..., 1] / z + cy
        return np.rint(v), np.rint(u), z

    def unproject(self, rows, cols, depth):
        """Pixel coordinates with z-depth -> world points."""
        fx, fy, cx, cy = self.intrinsics
        x = (np.asarray(cols, dtype=np.float64) - cx) / fx * depth
        y = (np.asarray(rows, dtype=np.float64) - cy) / fy * depth
        pc = np.stack([x, y, np.asarray(depth, dtype=np.float64)], axis=-1)
        return pc @ self.pose[:3, :3].T + self.pose[:3, 3]


def generate_scene(room=(1.5, 1.5, 0.75), n_objects=(1, 3), n_classes=3, seed=0, shared_geometry=False,
                   size_jitter=0.15, color_jitter=0.05, gap=0.1, margin=0.05, max_attempts=200):
    """Sample a room with non-overlapping box objects resting on the floor.

    Each class owns a base color (jittered by ``color_jitter``) and, unless
    ``shared_geometry`` is set, a base size.  With ``shared_geometry`` every
    object draws its size profile independently of its class, so only color
    identifies the class.
    """
    if n_classes > len(CLASS_COLORS):
        raise ValueError(f"at most {len(CLASS_COLORS)} classes supported")
    rng = np.random.default_rng(seed)
    lo_n, hi_n = (n_objects, n_objects) if np.isscalar(n_objects) else n_objects
    count = int(rng.integers(lo_n, hi_n + 1))
    room = tuple(float(r) for r in room)
    specs = []
    for _ in range(count):
        cls = int(rng.integers(n_classes))
        profile = int(rng.integers(n_classes)) if shared_geometry else cls
        base = CLASS_SIZES[profile % len(CLASS_SIZES)]
        size = base * (1 + rng.uniform(-size_jitter, size_jitter, 3))
        if rng.random() < 0.5:
            size[[0, 1]] = size[[1, 0]]
        size[2] = min(size[2], room[2] - margin)
        if room[0] - 2 * margin < size[0] or room[1] - 2 * margin < size[1]:
            raise PlacementFailure("object larger than room")
        albedo = np.clip(CLASS_COLORS[cls] + rng.normal(0, color_jitter, 3), 0, 1)
        specs.append((cls, size, tuple(float(a) for a in albedo)))
    # largest footprint first; restart the whole layout when an object does not fit
    specs.sort(key=lambda s: -s[1][0] * s[1][1])
    for _layout in range(max_attempts):
        objects = []
        for cls, size, albedo in specs:
            for _try in range(50):
                lo = np.array([rng.uniform(margin, room[0] - margin - size[0]),
                               rng.uniform(margin, room[1] - margin - size[1]), 0.0])
                box = Box3.from_corners(lo, lo + size)
                if all(_separated(box, o.box, gap) for o in objects):
                    objects.append(SceneObject(cls, box, albedo))
                    break
            else:
                break
        if len(objects) == len(specs):
            break
    else:
        raise PlacementFailure(f"could not place {count} objects after {max_attempts} layouts")
    return SceneSpec(room, objects, int(seed))


def _separated(a, b, gap):
    return bool(np.any((a.min - gap >= b.max) | (b.min - gap >= a.max)))


def structure_boxes(room, thickness=0.1, wall_height=2.5):
    """Floor slab and four walls enclosing the room."""
    x, y = room[0], room[1]
    t = thickness
    return [
        Box3.from_corners((-t, -t, -t), (x + t, y + t, 0.0)),
        Box3.from_corners((-t, -t, 0.0), (0.0, y + t, wall_height)),
        Box3.from_corners((x, -t, 0.0), (x + t, y + t, wall_height)),
        Box3.from_corners((0.0, -t, 0.0), (x, 0.0, wall_height)),
        Box3.from_corners((0.0, y, 0.0), (x, y + t, wall_height)),
    ]


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f /= np.linalg.norm(f)
    r = np.cross(f, up)
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    pose = np.eye(4)
    pose[:3, :3] = np.stack([r, d, f], axis=1)
    pose[:3, 3] = eye
    return pose


def default_intrinsics(width, height, fov_deg=75.0):
    f = width / (2 * np.tan(np.radians(fov_deg) / 2))
    return (f, f, (width - 1) / 2, (height - 1) / 2)


def orbit_poses(room, n_views, seed=0, height=1.1, radius_frac=0.85, jitter=0.05):
    """Camera poses on a jittered ellipse inside the room, looking at the floor center region."""
    rng = np.random.default_rng(seed)
    cx, cy = room[0] / 2, room[1] / 2
    phase = rng.uniform(0, 2 * np.pi)
    poses = []
    for i in range(n_views):
        a = phase + 2 * np.pi * i / n_views
        eye = np.array([cx + radius_frac * cx * np.cos(a), cy + radius_frac * cy * np.sin(a), height])
        eye[:2] += rng.normal(0, jitter, 2)
        eye[0] = np.clip(eye[0], 0.02, room[0] - 0.02)
        eye[1] = np.clip(eye[1], 0.02, room[1] - 0.02)
        target = np.array([cx - 0.35 * (eye[0] - cx), cy - 0.35 * (eye[1] - cy), 0.0]) + np.r_[rng.normal(0, jitter, 2), 0]
        poses.append(look_at(eye, target))
    return poses


def _ray_boxes(origin, dirs, boxes):
    """Nearest positive hit parameter per ray and the box index (-1 = miss)."""
    n = dirs.shape[0]
    best_t = np.full(n, np.inf)
    best_i = np.full(n, -1, dtype=np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    for i, box in enumerate(boxes):
        with np.errstate(invalid="ignore"):
            t1 = (box.min - origin) * inv
            t2 = (box.max - origin) * inv
        # rays parallel to a slab: inside -> (-inf, inf), outside -> empty
        par = dirs == 0
        inside = (origin >= box.min) & (origin <= box.max)
        t1 = np.where(par, np.where(inside, -np.inf, np.inf), t1)
        t2 = np.where(par, np.where(inside, np.inf, -np.inf), t2)
        tmin = np.max(np.minimum(t1, t2), axis=1)
        tmax = np.min(np.maximum(t1, t2), axis=1)
        hit = (tmax >= tmin) & (tmin > 1e-9) & (tmin < best_t)
        best_t[hit] = tmin[hit]
        best_i[hit] = i
    return best_t, best_i


def render_view(scene, pose, intrinsics, resolution, with_structure=True):
    """Ray-cast z-depth, albedo color and instance ids for one camera."""
    h, w = resolution
    fx, fy, cx, cy = intrinsics
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dcam = np.stack([(cols - cx) / fx, (rows - cy) / fy, np.ones_like(rows, dtype=float)], axis=-1).reshape(-1, 3)
    pose = np.asarray(pose, dtype=np.float64)
    dirs = dcam @ pose[:3, :3].T
    boxes = [o.box for o in scene.objects]
    albedo = [o.albedo for o in scene.objects]
    if with_structure:
        walls = structure_boxes(scene.room)
        boxes += walls
        albedo += [FLOOR_ALBEDO] + [WALL_ALBEDO] * (len(walls) - 1)
    t, idx = _ray_boxes(pose[:3, 3], dirs, boxes)
    hit = idx >= 0
    depth = np.where(hit, t, 0.0).reshape(h, w)
    palette = np.asarray(albedo + [(0.0, 0.0, 0.0)])
    color = np.rint(palette[idx] * 255).astype(np.uint8).reshape(h, w, 3)
    n_obj = len(scene.objects)
    instance = np.where(hit & (idx < n_obj), idx, STRUCTURE).reshape(h, w)
    return CameraView(tuple(intrinsics), pose, depth.astype(np.float32), color, instance)


def scan_scene(scene, n_views=6, resolution=(96, 96), seed=0, fov_deg=75.0, height=1.1):
    """Render a seeded orbit trajectory through the scene."""
    intr = default_intrinsics(resolution[1], resolution[0], fov_deg)
    return [render_view(scene, p, intr, resolution) for p in orbit_poses(scene.room, n_views, seed, height)]


def integrate_view(view, meta, truncation=3.0):
    """Per-view partial fusion: (signed-distance sum, weight) arrays."""
    centers = meta.voxel_centers().reshape(-1, 3)
    rows, cols, z = view.project(centers)
    h, w = view.depth.shape
    ok = (z > 0) & (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    r = np.where(ok, rows, 0).astype(np.int64)
    c = np.where(ok, cols, 0).astype(np.int64)
    d = view.depth[r, c].astype(np.float64)
    ok &= d > 0
    sdf = (d - z) / meta.voxel_size
    ok &= sdf > -truncation
    val = np.clip(sdf, -truncation, truncation)
    s = np.where(ok, val, 0.0).reshape(meta.dims)
    wgt = ok.astype(np.float64).reshape(meta.dims)
    return s, wgt


def fuse_tsdf(views, meta, truncation=3.0):
    """Weighted running-average TSDF fusion with unit weight per observation.

    A voxel is updated by a view when its center projects onto a valid depth
    pixel and the signed distance (in voxels) exceeds ``-truncation``.
    Untouched voxels keep ``(+truncation, weight 0)``.
    """
    if not views:
        raise ValueError("fusion needs at least one view")
    if truncation < 1:
        raise ValueError("truncation must be >= 1 voxel")
    total = np.zeros(meta.dims)
    weight = np.zeros(meta.dims)
    for v in views:
        s, wgt = integrate_view(v, meta, truncation)
        total += s
        weight += wgt
    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.where(weight > 0, total / np.maximum(weight, 1), truncation)
    values = np.clip(values, -truncation, truncation)
    return TsdfGrid(meta, values.astype(np.float32), weight.astype(np.float32), float(truncation))


def object_voxels(box, meta):
    """Boolean grid of voxels whose center lies inside a world-space box."""
    centers = meta.voxel_centers()
    return np.all((centers >= box.min) & (centers < box.max), axis=-1)


def ground_truth(scene, meta, fused):
    """Instance annotations: observed near-surface voxels inside each object's box."""
    near = fused.observed & (np.abs(fused.values) < fused.truncation)
    out = []
    for obj in scene.objects:
        mask = np.argwhere(object_voxels(obj.box, meta) & near)
        if len(mask):
            out.append(InstanceAnnotation.from_mask(mask, obj.class_id))
    return out


def room_meta(room, voxel_size=0.0469, dims=None):
    """Grid covering the room footprint from the floor up."""
    if dims is None:
        dims = tuple(int(round(r / voxel_size)) for r in room)
    return GridMeta(dims, voxel_size, (0.0, 0.0, 0.0))
