"""Detection/instance evaluation: voxelization, frame merging, mean average precision."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .grid import Box3, box_iou, world_to_voxel


@dataclass
class Detection:
    box: Box3  # voxel coordinates
    class_id: int
    score: float = 1.0
    mask: np.ndarray | None = None  # (n, 3) voxel indices

    def __post_init__(self):
        self.class_id = int(self.class_id)
        self.score = float(self.score)
        if not np.isfinite(self.score):
            raise ValueError("detection score must be finite")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=np.int64).reshape(-1, 3)


@dataclass
class WorldDetection:
    """Detection in meters; the mask is a set of cubic cells given by their centers."""

    box: Box3
    class_id: int
    score: float = 1.0
    mask_points: np.ndarray | None = None
    cell_size: float = 0.0


def _rasterize_cells(points, cell, meta):
    v = world_to_voxel(points, meta)
    half = cell / (2 * meta.voxel_size)
    # voxel k has center k + 0.5: it lies in [c - half, c + half) iff k in [ceil(c - half - .5), ceil(c + half - .5))
    lo = np.ceil(v - half - 0.5 - 1e-9).astype(np.int64)
    hi = np.ceil(v + half - 0.5 - 1e-9).astype(np.int64)
    dims = np.array(meta.dims)
    lo, hi = np.clip(lo, 0, dims), np.clip(hi, 0, dims)
    occ = np.zeros(meta.dims, dtype=bool)
    for a, b in zip(lo, hi):
        occ[a[0]:b[0], a[1]:b[1], a[2]:b[2]] = True
    return np.argwhere(occ)


def voxelize(detections, meta):
    """Map world-space detections into ``meta``'s voxel space."""
    out = []
    for d in detections:
        if isinstance(d, Detection):
            out.append(d)
            continue
        lo = world_to_voxel(d.box.min, meta)
        hi = world_to_voxel(d.box.max, meta)
        mask = None
        if d.mask_points is not None:
            mask = _rasterize_cells(np.asarray(d.mask_points, dtype=float).reshape(-1, 3), d.cell_size, meta)
        out.append(Detection(Box3.from_corners(lo, hi), d.class_id, d.score, mask))
    return out


def merge_frame_predictions(detections, iou_thresh=0.5):
    """Greedy score-ordered merge of same-class detections overlapping above ``iou_thresh``.

    Each cluster is represented by its highest-scoring member.
    """
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    reps = []
    for i in order:
        d = detections[i]
        if not any(r.class_id == d.class_id and box_iou(r.box, d.box) > iou_thresh for r in reps):
            reps.append(d)
    return reps


def _keys(mask):
    m = np.asarray(mask, dtype=np.int64)
    return np.unique((m[:, 0] << 42) | (m[:, 1] << 21) | m[:, 2])


def mask_iou(a, b):
    ka, kb = _keys(a), _keys(b)
    inter = np.intersect1d(ka, kb, assume_unique=True).size
    union = ka.size + kb.size - inter
    return inter / union if union else 0.0


def average_precision(tp, n_gt):
    """All-point interpolated area under the precision/recall curve."""
    if n_gt == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    rec = ctp / n_gt
    prec = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def _as_scenes(x):
    if not len(x):
        return [[]]
    if len(x) and not isinstance(x[0], (list, tuple)):
        return [list(x)]
    return [list(s) for s in x]


def class_average_precision(detections, gts, class_id, iou_threshold, use_masks=False):
    """AP for one class.  ``detections``/``gts`` are per-scene lists."""
    cands = []
    n_gt = 0
    gt_by_scene = []
    for s, (dets, g) in enumerate(zip(detections, gts)):
        mine = [x for x in g if x.class_id == class_id]
        gt_by_scene.append(mine)
        n_gt += len(mine)
        cands += [(d.score, s, k, d) for k, d in enumerate(dets) if d.class_id == class_id]
    cands.sort(key=lambda c: (-c[0], c[1], c[2]))
    used = [np.zeros(len(g), dtype=bool) for g in gt_by_scene]
    tp = []
    for _score, s, _k, d in cands:
        best, best_j = -1.0, -1
        for j, g in enumerate(gt_by_scene[s]):
            if used[s][j]:
                continue
            if use_masks:
                ov = mask_iou(d.mask, g.mask) if d.mask is not None and len(d.mask) else 0.0
            else:
                ov = box_iou(d.box, g.box)
            if ov > best:
                best, best_j = ov, j
        if best_j >= 0 and best >= iou_threshold:
            used[s][best_j] = True
            tp.append(1)
        else:
            tp.append(0)
    return average_precision(tp, n_gt), n_gt


def mean_average_precision(detections, gts, n_classes, iou_thresholds=(0.25, 0.5), use_masks=False,
                           exclude_empty=True):
    """Per-class AP table and mAP at each IoU threshold.

    ``detections`` and ``gts`` are either flat lists (one scene) or lists of
    per-scene lists; ground truth needs ``box``, ``class_id`` and, for
    ``use_masks``, ``mask``.  Returns ``{threshold: {"ap": [...], "map": float}}``.
    Classes without ground truth are skipped in the mean unless
    ``exclude_empty`` is False, in which case they count as 0.
    """
    dets, g = _as_scenes(detections), _as_scenes(gts)
    if len(dets) != len(g):
        if not dets or all(len(d) == 0 for d in dets):
            dets = [[] for _ in g]
        else:
            raise ValueError("detections and ground truth cover different scene counts")
    out = {}
    for thr in iou_thresholds:
        aps, counts = [], []
        for c in range(n_classes):
            ap, n = class_average_precision(dets, g, c, thr, use_masks)
            aps.append(ap)
            counts.append(n)
        valid = [a for a, n in zip(aps, counts) if n > 0 or not exclude_empty]
        out[thr] = {"ap": aps, "n_gt": counts, "map": float(np.mean(valid)) if valid else 0.0}
    return out


# -- interchange files -------------------------------------------------------------

def rle_encode(mask, lo, hi):
    grid = np.zeros(tuple(np.asarray(hi) - np.asarray(lo)), dtype=bool)
    idx = np.asarray(mask, dtype=np.int64) - np.asarray(lo)
    grid[tuple(idx.T)] = True
    flat = grid.reshape(-1)
    runs = []
    current, count = False, 0
    for v in flat:
        if v == current:
            count += 1
        else:
            runs.append(count)
            current, count = v, 1
    runs.append(count)
    return ",".join(str(r) for r in runs)


def rle_decode(text, lo, hi):
    shape = tuple(np.asarray(hi) - np.asarray(lo))
    runs = [int(r) for r in text.split(",")] if text else []
    flat = np.zeros(int(np.prod(shape)), dtype=bool)
    pos, val = 0, False
    for r in runs:
        if val:
            flat[pos:pos + r] = True
        pos += r
        val = not val
    return np.argwhere(flat.reshape(shape)) + np.asarray(lo)


def format_record(scene_id, det):
    lo, hi = det.box.region()
    fields = [str(scene_id), str(det.class_id), repr(float(det.score))] + [repr(float(v)) for v in det.box.as_array()]
    if det.mask is not None:
        fields.append("rle=" + rle_encode(det.mask, lo, hi))
    return " ".join(fields)


def parse_record(line):
    parts = line.split()
    if len(parts) not in (9, 10):
        raise ValueError(f"malformed record: {line!r}")
    scene_id, cls, score = parts[0], int(parts[1]), float(parts[2])
    corners = [float(v) for v in parts[3:9]]
    box = Box3.from_corners(corners[:3], corners[3:])
    mask = None
    if len(parts) == 10:
        if not parts[9].startswith("rle="):
            raise ValueError(f"malformed mask field: {parts[9]!r}")
        lo, hi = box.region()
        mask = rle_decode(parts[9][4:], lo, hi)
    return scene_id, Detection(box, cls, score, mask)


def write_records(path, records):
    """``records``: iterable of ``(scene_id, Detection)``."""
    with open(path, "w") as fh:
        for sid, det in records:
            fh.write(format_record(sid, det) + "\n")


def read_records(path):
    by_scene = {}
    with open(path) as fh:
        for line in fh:
            if line.strip() and not line.startswith("#"):
                sid, det = parse_record(line)
                by_scene.setdefault(sid, []).append(det)
    return by_scene


def metrics_csv(results, n_classes, class_names=None):
    """Rows ``metric, iou, <class columns>, avg``; ``results`` maps metric name to a mAP dict."""
    names = class_names or [f"class_{c}" for c in range(n_classes)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "iou"] + list(names) + ["avg"])
    for metric, table in results.items():
        for thr, row in table.items():
            w.writerow([metric, f"{thr:g}"] + [f"{a:.4f}" for a in row["ap"]] + [f"{row['map']:.4f}"])
    return buf.getvalue()
