"""Chunk extraction, view selection, staged training and single-pass scene inference."""
from __future__ import annotations

import contextlib
import os
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .backproject import backproject_view, view_pool
from .detect import (BACKBONE_STRIDE, AnchorSet, ClassifyHead, DetectConfig, DetectionBackbone, InsufficientData,
                     RPNHead, Widths, assign_anchors, decode_deltas, encode_deltas, flatten_rpn, kmeans, nms,
                     roi_pool)
from .evalkit import Detection
from .grid import Box3, InstanceAnnotation, TsdfGrid, VolumeClass, box_volume_class, iou_matrix, voxel_to_world
from .mask import MaskBackbone, MaskHead, build_mask_targets, mask_logits
from .nn import functional as F
from .nn.optim import STAGES, TrainConfig, sgd_step

DEFAULT_CHUNK = (32, 32, 16)
DESK_SPLIT_M3 = 1.0 / 27.0
MASK_MARGIN = 4  # receptive radius of the mask backbone


class SceneTooSmall(ValueError):
    pass


class NoViews(ValueError):
    pass


class DivergenceDetected(RuntimeError):
    """Non-finite loss; ``state`` holds the last finite parameters."""

    def __init__(self, message, state):
        super().__init__(message)
        self.state = state


# -- runtime ----------------------------------------------------------------------

def worker_count():
    """Threads allowed by ``SIS_THREADS``; 0 (deterministic) maps to a single thread."""
    raw = os.environ.get("SIS_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        return None
    return max(n, 1) if n >= 0 else None


@contextlib.contextmanager
def deterministic(enabled=True):
    """Pin BLAS to one thread so reductions run in a fixed order."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


# -- chunks -----------------------------------------------------------------------

@dataclass
class Chunk:
    tsdf: TsdfGrid
    views: list = field(default_factory=list)
    annotations: list = field(default_factory=list)
    offset: tuple = (0, 0, 0)

    def __post_init__(self):
        if any(d % BACKBONE_STRIDE for d in self.tsdf.meta.dims):
            raise nn.ShapeMismatch(f"chunk dims {self.tsdf.meta.dims} not divisible by {BACKBONE_STRIDE}")

    @property
    def meta(self):
        return self.tsdf.meta


def _starts(n, c, s):
    starts = list(range(0, n - c + 1, s))
    if starts[-1] + c < n:
        starts.append(n - c)
    return starts


def extract_chunks(tsdf, annotations=(), chunk_dims=DEFAULT_CHUNK, stride=None, views=(), min_inside=0.5):
    """Sliding-window crops in x, y, z order.

    Annotations are clipped to each crop; instances keeping less than
    ``min_inside`` of their mask voxels are dropped.  The last window on each
    axis is shifted back so the crops cover the whole grid.
    """
    dims = tsdf.meta.dims
    chunk_dims = tuple(int(c) for c in chunk_dims)
    if any(d < c for d, c in zip(dims, chunk_dims)):
        raise SceneTooSmall(f"scene {dims} smaller than chunk {chunk_dims}")
    stride = tuple(chunk_dims) if stride is None else tuple(np.broadcast_to(stride, 3).astype(int))
    if min(stride) < 1:
        raise ValueError("stride must be positive")
    out = []
    for x in _starts(dims[0], chunk_dims[0], stride[0]):
        for y in _starts(dims[1], chunk_dims[1], stride[1]):
            for z in _starts(dims[2], chunk_dims[2], stride[2]):
                lo = np.array([x, y, z])
                hi = lo + chunk_dims
                anns = []
                for a in annotations:
                    inside = np.all((a.mask >= lo) & (a.mask < hi), axis=1)
                    if inside.sum() >= min_inside * len(a.mask) and inside.any():
                        anns.append(InstanceAnnotation.from_mask(a.mask[inside] - lo, a.class_id))
                out.append(Chunk(tsdf.crop(lo, chunk_dims), list(views), anns, (x, y, z)))
    return out


def view_coverage(chunk, view):
    """Mean over instances of the fraction of mask voxels seen by ``view`` at the right depth."""
    if not chunk.annotations:
        return 0.0
    meta = chunk.meta
    h, w = view.depth.shape
    fracs = []
    for ann in chunk.annotations:
        rows, cols, z = view.project(voxel_to_world(ann.mask + 0.5, meta))
        ok = (z > 0) & (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
        r = np.where(ok, rows, 0).astype(np.int64)
        c = np.where(ok, cols, 0).astype(np.int64)
        d = view.depth[r, c].astype(np.float64)
        ok &= (d > 0) & (np.abs(d - z) <= meta.voxel_size)
        fracs.append(float(ok.mean()))
    return float(np.mean(fracs))


def select_views(chunk, candidates, n):
    """Top-``n`` candidates by coverage; ties go to the earlier view."""
    candidates = list(candidates)
    if not candidates:
        raise NoViews("no candidate views")
    scores = np.array([view_coverage(chunk, v) for v in candidates])
    order = np.argsort(-scores, kind="stable")[:n]
    return [candidates[i] for i in order]


def _rotation_z(k):
    c, s = [(1, 0), (0, 1), (-1, 0), (0, -1)][k % 4]
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)


def rotate_chunk(chunk, k):
    """Rotate a chunk by ``k`` quarter turns about the vertical axis through its center."""
    k %= 4
    dims = chunk.meta.dims
    if dims[0] != dims[1]:
        raise nn.ShapeMismatch("quarter-turn rotation needs a square footprint")
    if k == 0:
        return chunk
    n = dims[0]
    tsdf = TsdfGrid(chunk.meta, np.rot90(chunk.tsdf.values, k, (0, 1)).copy(),
                    np.rot90(chunk.tsdf.weights, k, (0, 1)).copy(), chunk.tsdf.truncation)
    anns = []
    for a in chunk.annotations:
        m = a.mask.copy()
        for _ in range(k):
            m = np.stack([n - 1 - m[:, 1], m[:, 0], m[:, 2]], axis=1)
        anns.append(InstanceAnnotation.from_mask(m, a.class_id))
    center = voxel_to_world(np.array(dims) / 2.0, chunk.meta)
    world = np.eye(4)
    world[:3, :3] = _rotation_z(k)
    world[:3, 3] = center - world[:3, :3] @ center
    views = []
    for v in chunk.views:
        views.append(type(v)(v.intrinsics, world @ v.pose, v.depth, v.color, v.instance))
    return Chunk(tsdf, views, anns, chunk.offset)


# -- model ------------------------------------------------------------------------

def fit_anchors(annotations, per_level=(2, 3), voxel_size=0.0469, split_m3=DESK_SPLIT_M3, seed=0):
    """Cluster annotation box sizes separately below and above the volume split."""
    sizes = np.array([a.box.size for a in annotations], dtype=np.float64).reshape(-1, 3)
    if len(sizes) == 0:
        raise InsufficientData("no annotations to fit anchors")
    small = np.array([box_volume_class(s, voxel_size, split_m3) is VolumeClass.SMALL for s in sizes])
    levels = []
    for sel, k in ((small, per_level[0]), (~small, per_level[1])):
        pts = sizes[sel]
        k = min(k, len(np.unique(pts, axis=0))) if len(pts) else 0
        if k == 0:
            levels.append(np.zeros((0, 3)))
            continue
        centers, _ = kmeans(pts, k, seed)
        centers = centers.astype(np.float32).astype(np.float64)
        levels.append(centers[np.argsort(np.prod(centers, axis=1), kind="stable")])
    return AnchorSet(levels[0], levels[1], BACKBONE_STRIDE, voxel_size, split_m3)


class SISNet(nn.Module):
    """Color encoder, detection backbone, two proposal heads, classifier and mask branch."""

    def __init__(self, anchors, n_classes=3, widths=None, use_color=True, seed=0):
        super().__init__()
        w = widths or Widths()
        rng = np.random.default_rng(seed)
        self.anchors = anchors
        self.n_classes = n_classes
        self.use_color = use_color
        self.widths = w
        if use_color:
            from .backproject import Encoder2D

            self.encoder = Encoder2D(w.color, (max(w.color // 2, 1), w.color), rng=rng)
        self.backbone = DetectionBackbone(w, use_color, rng)
        n_small, n_large = anchors.n_anchors
        self.rpn_small = RPNHead(w.wide, w.rpn, n_small, rng) if n_small else None
        self.rpn_large = RPNHead(w.wide, w.rpn, n_large, rng) if n_large else None
        self.classifier = ClassifyHead(w.wide, n_classes, w.cls, w.cls_out, rng=rng)
        self.mask_backbone = MaskBackbone(w.mask, w.color, use_color, rng)
        self.mask_head = MaskHead(w.mask, n_classes, rng)
        self._placed = {}

    def color_volume(self, views, meta):
        if not self.use_color:
            return None
        if not views:
            raise NoViews("color features need at least one view")
        return view_pool([backproject_view(v, self.encoder, meta) for v in views])

    def geometry(self, tsdf):
        return nn.Tensor(tsdf.values[None] / tsdf.truncation)

    def placed_anchors(self, feature_dims):
        key = tuple(feature_dims)
        if key not in self._placed:
            self._placed[key] = [self.anchors.place(i, key) if len(self.anchors.level(i)) else np.zeros((0, 6))
                                 for i in range(2)]
        return self._placed[key]

    def rpn(self, small, large):
        """Concatenated ``(logits, deltas)`` over both levels, rows ordered level, anchor, x, y, z."""
        logits, deltas = [], []
        for feat, head in ((small, self.rpn_small), (large, self.rpn_large)):
            if head is None:
                continue
            o, d = head(feat)
            lg, dl = flatten_rpn(o, d, head.n_anchors)
            logits.append(lg)
            deltas.append(dl)
        if len(logits) == 1:
            return logits[0], deltas[0]
        return nn.concat(logits, 0), nn.concat(deltas, 0)

    def classify(self, deep, boxes):
        blocks = [roi_pool(deep, b, scale=BACKBONE_STRIDE).reshape(1, -1) for b in boxes]
        x = blocks[0] if len(blocks) == 1 else nn.concat(blocks, 0)
        return self.classifier(x)


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _clip_boxes(boxes, dims):
    lim = np.concatenate([dims, dims]).astype(np.float64)
    return np.clip(boxes, 0, lim)


def propose(logits, deltas, anchors, dims, threshold, pre_k=256, post_k=32):
    """Decode, clip, and suppress proposals; returns ``(boxes, objectness)``."""
    prob = _softmax(np.asarray(logits, dtype=np.float64))[:, 1]
    boxes = _clip_boxes(decode_deltas(deltas, anchors), dims)
    valid = np.flatnonzero(np.all(boxes[:, 3:] - boxes[:, :3] >= 1.0, axis=1))
    order = valid[np.argsort(-prob[valid], kind="stable")][:pre_k]
    keep = nms(boxes[order], prob[order], threshold)[:post_k]
    return boxes[order][keep], prob[order][keep]


# -- training ---------------------------------------------------------------------

@dataclass
class TrainState:
    stage: str
    step: int
    params: OrderedDict
    rng_state: dict
    loss_log: list = field(default_factory=list)


LOSS_TERMS = ("rpn_objectness", "rpn_box", "cls", "cls_box", "mask")


@dataclass
class Budgets:
    rpn: int = 2000
    cls: int = 1000
    mask: int = 1000

    def __post_init__(self):
        if min(self.rpn, self.cls, self.mask) < 0:
            raise ValueError("step budgets must be non-negative")

    def schedule(self):
        return [(s, getattr(self, s)) for s in STAGES]


@dataclass
class Sampling:
    """Per-step sample sizes; ``rpn=None`` keeps every labeled anchor."""

    rpn: int | None = None
    cls: int = 16
    mask: int = 16


def _gt_corners(chunk):
    if not chunk.annotations:
        return np.zeros((0, 6))
    return np.stack([a.box.as_array() for a in chunk.annotations])


def _sample(rng, idx, n):
    if n is None or len(idx) <= n:
        return idx
    return np.sort(rng.choice(idx, n, replace=False))


def _rpn_losses(logits, deltas, anchors, gt, cfg, rng, batch):
    labels, gi = assign_anchors(anchors, gt, cfg)
    if batch is None:
        pos, neg = np.flatnonzero(labels == 1), np.flatnonzero(labels == 0)
    else:
        pos = _sample(rng, np.flatnonzero(labels == 1), batch // 2)
        neg = _sample(rng, np.flatnonzero(labels == 0), batch - len(pos))
    terms = {}
    obj = None
    if len(neg):
        obj = F.cross_entropy(logits[neg], np.zeros(len(neg), dtype=np.int64))
    if len(pos):
        p = F.cross_entropy(logits[pos], np.ones(len(pos), dtype=np.int64))
        obj = p if obj is None else obj + p
        target = encode_deltas(gt[gi[pos]], anchors[pos])
        terms["rpn_box"] = F.huber(deltas[pos], target)
    if obj is not None:
        terms["rpn_objectness"] = obj
    return terms


def _cls_losses(model, deep, proposals, chunk, gt, cfg, rng, batch):
    cls_ids = np.array([a.class_id for a in chunk.annotations], dtype=np.int64)
    n_gt = min(len(gt), batch // 2)
    gt_pick = _sample(rng, np.arange(len(gt)), n_gt)
    rois, targets, owners = [gt[gt_pick]], [cls_ids[gt_pick]], [gt_pick]
    if len(proposals):
        iou = iou_matrix(proposals, gt)
        best = np.argmax(iou, axis=1)
        pos = np.flatnonzero(iou[np.arange(len(proposals)), best] > cfg.iou_pos)
        pos = _sample(rng, pos, batch - n_gt)
        rois.append(proposals[pos])
        targets.append(cls_ids[best[pos]])
        owners.append(best[pos])
    rois, targets, owners = np.concatenate(rois), np.concatenate(targets), np.concatenate(owners)
    logits, boxes = model.classify(deep, rois)
    terms = {"cls": F.cross_entropy(logits, targets)}
    if cfg.refine_boxes:
        rows = np.arange(len(rois))[:, None]
        cols = targets[:, None] * 6 + np.arange(6)[None]
        terms["cls_box"] = F.huber(boxes[rows, cols], encode_deltas(gt[owners], rois))
    return terms


def _mask_features(model, geo, color, lo, hi):
    sl = tuple(slice(int(a), int(b)) for a, b in zip(lo, hi))
    g = geo[(slice(None),) + sl]
    c = color[(slice(None),) + sl] if color is not None else None
    return model.mask_backbone(g, c)


def _mask_losses(model, geo, color, proposals, chunk, gt, cfg, rng, batch):
    dims = np.array(chunk.meta.dims)
    cands = []
    if len(proposals):
        iou = iou_matrix(proposals, gt)
        ok = np.flatnonzero(iou.max(axis=1) >= cfg.mask_iou_gate)
        cands = list(proposals[_sample(rng, ok, batch // 2)])
    n_gt = min(len(gt), batch - len(cands))
    boxes = [gt[i] for i in _sample(rng, np.arange(len(gt)), n_gt)] + cands
    targets = build_mask_targets(boxes, chunk.annotations, cfg.mask_iou_gate, dims)
    if not targets:
        return {}
    lo = np.clip(np.min([t.lo for t in targets], axis=0) - MASK_MARGIN, 0, dims)
    hi = np.clip(np.max([t.hi for t in targets], axis=0) + MASK_MARGIN, 0, dims)
    feats = _mask_features(model, geo, color, lo, hi)
    loss = None
    for t in targets:
        cid = chunk.annotations[t.gt_index].class_id
        logit = mask_logits(feats, t.lo - lo, t.hi - lo, cid, model.mask_head)
        term = F.bce_with_logits(logit, t.target)
        loss = term if loss is None else loss + term
    return {"mask": loss * (1.0 / len(targets))}


def training_losses(model, chunk, stage, cfg, rng, sampling=None):
    """Active loss terms for one chunk at ``stage``; later stages keep the earlier terms."""
    sampling = sampling or Sampling()
    level = STAGES.index(stage)
    geo = model.geometry(chunk.tsdf)
    color = model.color_volume(chunk.views, chunk.meta)
    small, large, deep = model.backbone(geo, color)
    logits, deltas = model.rpn(small, large)
    anchors = np.concatenate(model.placed_anchors(small.shape[1:]))
    gt = _gt_corners(chunk)
    terms = _rpn_losses(logits, deltas, anchors, gt, cfg, rng, sampling.rpn)
    if level >= 1 and len(gt):
        proposals, _ = propose(logits.data, deltas.data, anchors, chunk.meta.dims, cfg.nms_train,
                               cfg.pre_nms_top_k, cfg.post_nms_top_k)
        terms.update(_cls_losses(model, deep, proposals, chunk, gt, cfg, rng, sampling.cls))
        if level >= 2:
            terms.update(_mask_losses(model, geo, color, proposals, chunk, gt, cfg, rng, sampling.mask))
    return terms


def _snapshot(model, stage, step, rng, log):
    return TrainState(stage, step, model.state_dict(), rng.bit_generator.state, list(log))


def train(model, chunks, budgets=None, train_cfg=None, detect_cfg=None, seed=0, sampling=None, augment=False,
          callback=None):
    """Staged SGD over ``chunks``; returns the final :class:`TrainState`.

    Each step draws one chunk.  The step counter and learning-rate schedule
    run across stages.  A non-finite loss raises :class:`DivergenceDetected`
    carrying the last finite state.
    """
    if not chunks:
        raise ValueError("training needs at least one chunk")
    budgets = budgets or Budgets()
    train_cfg = train_cfg or TrainConfig()
    detect_cfg = detect_cfg or DetectConfig()
    rng = np.random.default_rng(seed)
    params = model.parameters()
    velocity = {}
    log = []
    step = 0
    stage = STAGES[0]
    for stage, n_steps in budgets.schedule():
        for _ in range(n_steps):
            chunk = chunks[int(rng.integers(len(chunks)))]
            if augment:
                chunk = rotate_chunk(chunk, int(rng.integers(4)))
            model.zero_grad()
            terms = training_losses(model, chunk, stage, detect_cfg, rng, sampling)
            if not terms:
                continue
            total = None
            for t in terms.values():
                total = t if total is None else total + t
            value = float(total.data)
            if not np.isfinite(value):
                raise DivergenceDetected(f"non-finite loss at step {step}", _snapshot(model, stage, step, rng, log))
            total.backward()
            grads = [p.grad for p in params]
            if not all(g is None or np.all(np.isfinite(g)) for g in grads):
                raise DivergenceDetected(f"non-finite gradient at step {step}",
                                         _snapshot(model, stage, step, rng, log))
            sgd_step(params, grads, velocity, train_cfg, step)
            entry = {"step": step, "stage": stage, "total": value, "lr": train_cfg.lr_at(step)}
            entry.update({k: float(v.data) for k, v in terms.items()})
            log.append(entry)
            if callback is not None:
                callback(entry)
            step += 1
    model.zero_grad()
    return _snapshot(model, stage, step, rng, log)


def loss_log_csv(log):
    cols = ["step", "stage"] + list(LOSS_TERMS) + ["total", "lr"]
    lines = [",".join(cols)]
    for e in log:
        row = []
        for c in cols:
            v = e.get(c, "")
            row.append(repr(float(v)) if isinstance(v, float) else str(v))
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


# -- inference --------------------------------------------------------------------

def backbone_features(model, tsdf, views):
    """Detection backbone maps ``(small, large, deep)`` as arrays."""
    small, large, deep = model.backbone(model.geometry(tsdf), model.color_volume(views, tsdf.meta))
    return small.data, large.data, deep.data


def infer_scene(model, tsdf, views, detect_cfg=None, fixed_height=None, mask_threshold=0.5):
    """Detections over a whole scene in one forward pass, using every view."""
    cfg = detect_cfg or DetectConfig()
    dims = tsdf.meta.dims
    if fixed_height is not None and dims[2] != fixed_height:
        raise nn.ShapeMismatch(f"scene height {dims[2]} != trained height {fixed_height}")
    if dims[0] % BACKBONE_STRIDE or dims[1] % BACKBONE_STRIDE or dims[2] % BACKBONE_STRIDE:
        raise nn.ShapeMismatch(f"scene dims {dims} not divisible by {BACKBONE_STRIDE}")
    geo = model.geometry(tsdf)
    color = model.color_volume(views, tsdf.meta)
    small, large, deep = model.backbone(geo, color)
    logits, deltas = model.rpn(small, large)
    anchors = np.concatenate(model.placed_anchors(small.shape[1:]))
    proposals, objectness = propose(logits.data, deltas.data, anchors, dims, cfg.nms_test,
                                    cfg.pre_nms_top_k, cfg.post_nms_top_k)
    if len(proposals) == 0:
        return []
    cls_logits, cls_boxes = model.classify(deep, proposals)
    prob = _softmax(cls_logits.data.astype(np.float64))
    labels = np.argmax(prob, axis=1)
    scores = objectness * prob[np.arange(len(labels)), labels]
    boxes = proposals
    if cfg.refine_boxes:
        d = cls_boxes.data.astype(np.float64).reshape(len(labels), -1, 6)[np.arange(len(labels)), labels]
        boxes = _clip_boxes(decode_deltas(d, proposals), dims)
    ok = np.all(boxes[:, 3:] - boxes[:, :3] > 0, axis=1)
    boxes, labels, scores = boxes[ok], labels[ok], scores[ok]
    keep = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        keep.extend(idx[nms(boxes[idx], scores[idx], cfg.nms_test)])
    keep = np.array(sorted(keep, key=lambda i: (-scores[i], i)), dtype=np.int64)
    if len(keep) == 0:
        return []
    feats = model.mask_backbone(geo, color)
    out = []
    for i in keep:
        box = Box3.from_corners(boxes[i, :3], boxes[i, 3:])
        lo, hi = box.region(np.array(dims))
        if np.any(hi <= lo):
            continue
        logit = mask_logits(feats, lo, hi, int(labels[i]), model.mask_head)
        mask = np.argwhere(logit.data > np.log(mask_threshold / (1 - mask_threshold))) + lo
        out.append(Detection(box, int(labels[i]), float(scores[i]), mask))
    return out


# -- synthetic datasets -----------------------------------------------------------

@dataclass
class DeskScene:
    """A rendered and fused synthetic scene with its annotations."""

    spec: object
    tsdf: TsdfGrid
    views: list
    annotations: list


def synthetic_scene(seed, room=(1.5, 1.5, 0.75), n_objects=(1, 3), n_views=6, resolution=(96, 96),
                    voxel_size=0.0469, shared_geometry=False, n_classes=3):
    """Generate, render and fuse one scene; placement failures move on to the next seed offset."""
    from .synth import PlacementFailure, fuse_tsdf, generate_scene, ground_truth, room_meta, scan_scene

    for attempt in range(100):
        try:
            spec = generate_scene(room, n_objects, n_classes, seed=seed * 1000 + attempt,
                                  shared_geometry=shared_geometry)
            break
        except PlacementFailure:
            continue
    else:
        raise PlacementFailure(f"no layout for seed {seed}")
    meta = room_meta(room, voxel_size)
    views = scan_scene(spec, n_views, resolution, seed=seed)
    tsdf = fuse_tsdf(views, meta)
    return DeskScene(spec, tsdf, views, ground_truth(spec, meta, tsdf))


def synthetic_chunks(n, seed=0, chunk_dims=DEFAULT_CHUNK, n_select=3, n_candidates=6, shared_geometry=False,
                     voxel_size=0.0469, resolution=(96, 96)):
    """``n`` single-chunk rooms, each keeping its best ``n_select`` views."""
    room = tuple(d * voxel_size for d in chunk_dims)
    out = []
    for i in range(n):
        sc = synthetic_scene(seed + i, room, n_views=n_candidates, resolution=resolution,
                             voxel_size=voxel_size, shared_geometry=shared_geometry)
        (chunk,) = extract_chunks(sc.tsdf, sc.annotations, chunk_dims)
        chunk.views = select_views(chunk, sc.views, n_select)
        out.append(chunk)
    return out


# -- persistence ------------------------------------------------------------------

def model_config(model):
    from dataclasses import asdict

    a = model.anchors
    return {"n_classes": model.n_classes, "use_color": model.use_color, "widths": asdict(model.widths),
            "stride": a.stride, "voxel_size": a.voxel_size, "split_m3": a.split_m3}


def save_model(path, model, extra=None):
    """Parameters and anchors to ``path`` (SISW), architecture to ``path`` + ``.json``."""
    import json

    from .nn.serialize import save_checkpoint

    state = model.state_dict()
    state["anchors.small"] = model.anchors.small.astype(np.float32)
    state["anchors.large"] = model.anchors.large.astype(np.float32)
    save_checkpoint(path, state)
    cfg = model_config(model)
    if extra:
        cfg["extra"] = extra
    with open(str(path) + ".json", "w") as fh:
        fh.write(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def load_model(path):
    import json

    from .nn.serialize import load_checkpoint

    with open(str(path) + ".json") as fh:
        cfg = json.load(fh)
    state = load_checkpoint(path)
    anchors = AnchorSet(state.pop("anchors.small").astype(np.float64).reshape(-1, 3),
                        state.pop("anchors.large").astype(np.float64).reshape(-1, 3),
                        cfg["stride"], cfg["voxel_size"], cfg["split_m3"])
    model = SISNet(anchors, cfg["n_classes"], Widths(**cfg["widths"]), cfg["use_color"])
    model.load_state_dict(state)
    return model, cfg.get("extra", {})
