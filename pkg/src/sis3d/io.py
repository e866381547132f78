"""File formats: VGRD grids, scene/view files, PLY export, run manifests."""
from __future__ import annotations

import hashlib
import json
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .grid import FeatureVolume, GridMeta, TsdfGrid

VGRD_MAGIC = b"VGRD"
VGRD_VERSION = 1
KIND_TSDF = 0
KIND_FEATURE = 1
_HEAD = struct.Struct("<4sII3IIf3f")
_TAU = struct.Struct("<f")


class GridFormatError(ValueError):
    pass


class BadMagic(GridFormatError):
    pass


class VersionUnsupported(GridFormatError):
    pass


class TruncatedFile(GridFormatError):
    pass


class IoFailure(OSError):
    pass


def _f32_decimal(x):
    # shortest decimal that survives float32, read back at double precision
    f = np.float32(x)
    return float(str(f)) if np.isfinite(f) else float(f)


# -- VGRD ---------------------------------------------------------------------------

def grid_to_bytes(grid):
    """Serialize a :class:`TsdfGrid` (channels: value, weight) or :class:`FeatureVolume`."""
    meta = grid.meta
    if isinstance(grid, TsdfGrid):
        kind, payload = KIND_TSDF, np.stack([grid.values, grid.weights])
    elif isinstance(grid, FeatureVolume):
        kind, payload = KIND_FEATURE, grid.data
    else:
        raise TypeError(f"cannot serialize {type(grid).__name__}")
    head = _HEAD.pack(VGRD_MAGIC, VGRD_VERSION, kind, *meta.dims, payload.shape[0], meta.voxel_size, *meta.origin)
    if kind == KIND_TSDF:
        head += _TAU.pack(grid.truncation)
    return head + np.ascontiguousarray(payload, dtype="<f4").tobytes()


def grid_from_bytes(buf):
    buf = bytes(buf)
    if len(buf) < 4 or buf[:4] != VGRD_MAGIC:
        raise BadMagic(f"expected {VGRD_MAGIC!r}, got {buf[:4]!r}")
    if len(buf) < 8:
        raise TruncatedFile("header cut short")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VGRD_VERSION:
        raise VersionUnsupported(f"VGRD version {version}")
    if len(buf) < _HEAD.size:
        raise TruncatedFile("header cut short")
    _, _, kind, x, y, z, channels, vs, ox, oy, oz = _HEAD.unpack_from(buf)
    if kind not in (KIND_TSDF, KIND_FEATURE):
        raise GridFormatError(f"unknown grid kind {kind}")
    off = _HEAD.size
    tau = None
    if kind == KIND_TSDF:
        if len(buf) < off + _TAU.size:
            raise TruncatedFile("header cut short")
        (tau,) = _TAU.unpack_from(buf, off)
        off += _TAU.size
        if channels != 2:
            raise GridFormatError(f"tsdf grid needs 2 channels, header says {channels}")
    n = channels * x * y * z
    need = off + 4 * n
    if len(buf) < need:
        raise TruncatedFile(f"payload has {len(buf) - off} bytes, expected {4 * n}")
    if len(buf) > need:
        raise GridFormatError(f"{len(buf) - need} trailing bytes")
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=off).astype(np.float32).reshape(channels, x, y, z)
    meta = GridMeta((x, y, z), _f32_decimal(vs), tuple(_f32_decimal(o) for o in (ox, oy, oz)))
    if kind == KIND_TSDF:
        return TsdfGrid(meta, data[0].copy(), data[1].copy(), _f32_decimal(tau))
    return FeatureVolume(meta, data)


def write_grid(path, grid):
    _write_bytes(path, grid_to_bytes(grid))


def read_grid(path):
    return grid_from_bytes(_read_bytes(path))


def _write_bytes(path, data):
    try:
        Path(path).write_bytes(data)
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def _read_bytes(path):
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e


def _write_text(path, text):
    try:
        Path(path).write_text(text)
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


# -- images -------------------------------------------------------------------------

def write_pfm(path, image):
    """Single-channel little-endian PFM, rows stored bottom to top."""
    img = np.asarray(image, dtype="<f4")
    h, w = img.shape
    _write_bytes(path, f"Pf\n{w} {h}\n-1.0\n".encode() + np.ascontiguousarray(img[::-1]).tobytes())


def _header_tokens(buf, n):
    tokens, pos = [], 0
    while len(tokens) < n:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncatedFile("image header cut short")
        tokens.append(buf[start:pos].decode("ascii"))
    return tokens, pos + 1


def read_pfm(path):
    buf = _read_bytes(path)
    (kind, w, h, scale), off = _header_tokens(buf, 4)
    if kind != "Pf":
        raise BadMagic(f"expected Pf, got {kind!r}")
    w, h, scale = int(w), int(h), float(scale)
    dtype = "<f4" if scale < 0 else ">f4"
    if len(buf) < off + 4 * w * h:
        raise TruncatedFile("PFM payload cut short")
    img = np.frombuffer(buf, dtype=dtype, count=w * h, offset=off).reshape(h, w)[::-1]
    return img.astype(np.float32)


def write_ppm(path, image):
    img = np.asarray(image, dtype=np.uint8)
    h, w, _ = img.shape
    _write_bytes(path, f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img).tobytes())


def read_ppm(path):
    buf = _read_bytes(path)
    (kind, w, h, maxval), off = _header_tokens(buf, 4)
    if kind != "P6" or maxval != "255":
        raise BadMagic(f"unsupported PPM header {kind} {maxval}")
    w, h = int(w), int(h)
    if len(buf) < off + 3 * w * h:
        raise TruncatedFile("PPM payload cut short")
    return np.frombuffer(buf, dtype=np.uint8, count=3 * w * h, offset=off).reshape(h, w, 3).copy()


# -- scenes and views ---------------------------------------------------------------

def dump_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_scene(path, scene):
    _write_text(path, dump_json(scene.to_dict()))


def read_scene(path):
    from .synth import SceneSpec

    try:
        return SceneSpec.from_dict(json.loads(_read_bytes(path)))
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise GridFormatError(f"bad scene file {path}: {e}") from e


def write_views(directory, views):
    """``cameras.json`` plus ``view_NNN.pfm`` depth and ``view_NNN.ppm`` color per view."""
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoFailure(f"cannot create {d}: {e}") from e
    cams = []
    for i, v in enumerate(views):
        write_pfm(d / f"view_{i:03d}.pfm", v.depth)
        write_ppm(d / f"view_{i:03d}.ppm", v.color)
        cams.append({"intrinsics": [float(a) for a in v.intrinsics], "pose": np.asarray(v.pose).tolist()})
    _write_text(d / "cameras.json", dump_json({"views": cams}))


def read_views(directory):
    from .synth import CameraView

    d = Path(directory)
    cams = json.loads(_read_bytes(d / "cameras.json"))["views"]
    out = []
    for i, c in enumerate(cams):
        out.append(CameraView(tuple(c["intrinsics"]), np.array(c["pose"]), read_pfm(d / f"view_{i:03d}.pfm"),
                              read_ppm(d / f"view_{i:03d}.ppm")))
    return out


def write_annotations(path, annotations):
    rows = [{"class_id": a.class_id, "mask": a.mask.tolist()} for a in annotations]
    _write_text(path, dump_json({"instances": rows}))


def read_annotations(path):
    from .grid import InstanceAnnotation

    rows = json.loads(_read_bytes(path))["instances"]
    return [InstanceAnnotation.from_mask(np.array(r["mask"], dtype=np.int64), r["class_id"]) for r in rows]


# -- PLY ----------------------------------------------------------------------------

BOX_EDGES = np.array([[0, 1], [1, 3], [3, 2], [2, 0], [4, 5], [5, 7], [7, 6], [6, 4],
                      [0, 4], [1, 5], [2, 6], [3, 7]])


def instance_colors(n, seed=0):
    rng = np.random.default_rng(seed)
    return rng.integers(40, 256, size=(n, 3)).astype(np.uint8)


def box_corners(box):
    lo, hi = np.asarray(box.min), np.asarray(box.max)
    bits = np.array([[(i >> 2) & 1, (i >> 1) & 1, i & 1] for i in range(8)])
    return np.where(bits, hi, lo)


def _ply(vertices, colors, edges=None, faces=None):
    lines = ["ply", "format ascii 1.0", f"element vertex {len(vertices)}",
             "property float x", "property float y", "property float z",
             "property uchar red", "property uchar green", "property uchar blue"]
    if edges is not None:
        lines += [f"element edge {len(edges)}", "property int vertex1", "property int vertex2"]
    if faces is not None:
        lines += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    lines.append("end_header")
    for p, c in zip(vertices, colors):
        lines.append(f"{p[0]:.6g} {p[1]:.6g} {p[2]:.6g} {int(c[0])} {int(c[1])} {int(c[2])}")
    for e in edges if edges is not None else ():
        lines.append(f"{int(e[0])} {int(e[1])}")
    for f in faces if faces is not None else ():
        lines.append(f"{len(f)} " + " ".join(str(int(i)) for i in f))
    return "\n".join(lines) + "\n"


def _to_world(points, meta):
    return points if meta is None else np.asarray(points) * meta.voxel_size + np.asarray(meta.origin)


def boxes_ply(detections, meta=None):
    """Wireframe of each detection box; coordinates in voxels unless ``meta`` is given."""
    cols = instance_colors(len(detections))
    verts, vcols, edges = [], [], []
    for i, d in enumerate(detections):
        verts.append(_to_world(box_corners(d.box), meta))
        vcols.append(np.repeat(cols[i:i + 1], 8, axis=0))
        edges.append(BOX_EDGES + 8 * i)
    v = np.concatenate(verts) if verts else np.zeros((0, 3))
    c = np.concatenate(vcols) if vcols else np.zeros((0, 3), np.uint8)
    e = np.concatenate(edges) if edges else np.zeros((0, 2), np.int64)
    return _ply(v, c, edges=e)


def masks_ply(detections, meta=None):
    """Colored voxel-center point cloud of every detection mask."""
    cols = instance_colors(len(detections))
    verts, vcols = [], []
    for i, d in enumerate(detections):
        if d.mask is None or len(d.mask) == 0:
            continue
        verts.append(_to_world(d.mask + 0.5, meta))
        vcols.append(np.repeat(cols[i:i + 1], len(d.mask), axis=0))
    v = np.concatenate(verts) if verts else np.zeros((0, 3))
    c = np.concatenate(vcols) if vcols else np.zeros((0, 3), np.uint8)
    return _ply(v, c)


def surface_faces(tsdf):
    """Voxel faces separating an observed inside voxel (value <= 0) from an observed outside one.

    Returns ``(quads (n, 4, 3), normals_axis (n,))`` in voxel coordinates.
    """
    inside = tsdf.observed & (tsdf.values <= 0)
    outside = tsdf.observed & (tsdf.values > 0)
    quads, axes = [], []
    offsets = {0: [(0, 0, 0), (0, 1, 0), (0, 1, 1), (0, 0, 1)],
               1: [(0, 0, 0), (0, 0, 1), (1, 0, 1), (1, 0, 0)],
               2: [(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0)]}
    for ax in range(3):
        a = [slice(None)] * 3
        b = [slice(None)] * 3
        a[ax], b[ax] = slice(None, -1), slice(1, None)
        a, b = tuple(a), tuple(b)
        cross = (inside[a] & outside[b]) | (outside[a] & inside[b])
        idx = np.argwhere(cross)
        if len(idx) == 0:
            continue
        base = idx.astype(np.float64)
        base[:, ax] += 1.0
        quads.append(base[:, None, :] + np.array(offsets[ax], dtype=np.float64)[None])
        axes.append(np.full(len(idx), ax))
    if not quads:
        return np.zeros((0, 4, 3)), np.zeros(0, dtype=np.int64)
    return np.concatenate(quads), np.concatenate(axes)


def surface_ply(tsdf, world=True):
    quads, _ = surface_faces(tsdf)
    verts = quads.reshape(-1, 3)
    if world:
        verts = _to_world(verts, tsdf.meta)
    colors = np.full((len(verts), 3), 200, dtype=np.uint8)
    faces = np.arange(len(verts)).reshape(-1, 4)
    return _ply(verts, colors, faces=faces)


def export_ply(obj, path, kind=None, meta=None):
    """Write boxes (default for detection lists), masks, or a TSDF surface as ASCII PLY."""
    if isinstance(obj, TsdfGrid):
        text = surface_ply(obj)
    elif kind == "masks":
        text = masks_ply(obj, meta)
    elif kind in (None, "boxes"):
        text = boxes_ply(obj, meta)
    else:
        raise ValueError(f"unknown PLY kind {kind!r}")
    _write_text(path, text)


# -- manifests ----------------------------------------------------------------------

def config_hash(config):
    return hashlib.sha256(json.dumps(config, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    version: str
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def to_json(self):
        return dump_json(asdict(self))

    def write(self, path):
        _write_text(path, self.to_json())

    @classmethod
    def read(cls, path):
        return cls(**json.loads(_read_bytes(path)))


class StageTimer:
    """Collect wall-clock seconds per named stage."""

    def __init__(self):
        self.timings = {}

    def __call__(self, name):
        timer = self

        class _Span:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *exc):
                timer.timings[name] = timer.timings.get(name, 0.0) + time.perf_counter() - self.t

        return _Span()
