"""Scikit-learn style wrapper around the chunk-trained instance segmentation network."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import pipeline as P
from ._validation import check_chunks, check_scenes
from .detect import DetectConfig, Widths
from .evalkit import mean_average_precision
from .nn.optim import TrainConfig


class InstanceSegmenter(BaseEstimator):
    """Detect and segment object instances in fused TSDF scans.

    ``fit`` takes a list of :class:`~sis3d.pipeline.Chunk` with annotations;
    ``predict`` takes chunks or any objects with ``tsdf`` and ``views``
    attributes and returns one list of detections per input.
    """

    def __init__(self, n_classes=3, chunk_dims=(32, 32, 16), voxel_size=0.0469, width_divisor=8,
                 color_channels=16, use_color=True, anchors_per_level=(2, 3), split_m3=P.DESK_SPLIT_M3,
                 steps=(2000, 1000, 1000), learning_rate=0.001, momentum=0.9, lr_decay_every=100_000,
                 rpn_batch=None, roi_batch=16, mask_batch=16, augment_rotations=False, refine_boxes=True,
                 match_best_anchor=True, seed=0, deterministic=True):
        self.n_classes = n_classes
        self.chunk_dims = chunk_dims
        self.voxel_size = voxel_size
        self.width_divisor = width_divisor
        self.color_channels = color_channels
        self.use_color = use_color
        self.anchors_per_level = anchors_per_level
        self.split_m3 = split_m3
        self.steps = steps
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.lr_decay_every = lr_decay_every
        self.rpn_batch = rpn_batch
        self.roi_batch = roi_batch
        self.mask_batch = mask_batch
        self.augment_rotations = augment_rotations
        self.refine_boxes = refine_boxes
        self.match_best_anchor = match_best_anchor
        self.seed = seed
        self.deterministic = deterministic

    def _detect_config(self):
        return DetectConfig(n_classes=self.n_classes, refine_boxes=self.refine_boxes,
                            match_best_anchor=self.match_best_anchor)

    def fit(self, X, y=None, callback=None):
        chunks = check_chunks(X, self.chunk_dims, require_views=self.use_color)
        if y is not None:
            if len(y) != len(chunks):
                raise ValueError(f"{len(y)} annotation lists for {len(chunks)} chunks")
            chunks = [P.Chunk(c.tsdf, c.views, list(a), c.offset) for c, a in zip(chunks, y)]
        anns = [a for c in chunks for a in c.annotations]
        bad = [a.class_id for a in anns if not 0 <= a.class_id < self.n_classes]
        if bad:
            raise ValueError(f"class ids {sorted(set(bad))} outside [0, {self.n_classes})")
        with P.deterministic(self.deterministic):
            self.anchors_ = P.fit_anchors(anns, self.anchors_per_level, self.voxel_size, self.split_m3, self.seed)
            widths = Widths.scaled(self.width_divisor, color=self.color_channels)
            self.model_ = P.SISNet(self.anchors_, self.n_classes, widths, self.use_color, self.seed)
            self.initial_state_ = self.model_.state_dict()
            budgets = P.Budgets(*self.steps)
            cfg = TrainConfig(learning_rate=self.learning_rate, momentum=self.momentum,
                              lr_decay_every=self.lr_decay_every)
            sampling = P.Sampling(self.rpn_batch, self.roi_batch, self.mask_batch)
            self.train_state_ = P.train(self.model_, chunks, budgets, cfg, self._detect_config(), self.seed,
                                        sampling, self.augment_rotations, callback)
        self.loss_log_ = self.train_state_.loss_log
        self.classes_ = np.arange(self.n_classes)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        scenes = check_scenes(X, self.chunk_dims[2], require_views=self.use_color)
        cfg = self._detect_config()
        with P.deterministic(self.deterministic):
            return [P.infer_scene(self.model_, s.tsdf, s.views if self.use_color else [], cfg, self.chunk_dims[2])
                    for s in scenes]

    def evaluate(self, X, iou_thresholds=(0.25, 0.5)):
        """Box and mask mAP tables against the annotations carried by ``X``."""
        dets = self.predict(X)
        gts = [list(s.annotations) for s in X]
        return {"detection": mean_average_precision(dets, gts, self.n_classes, iou_thresholds),
                "instance": mean_average_precision(dets, gts, self.n_classes, iou_thresholds, use_masks=True)}

    def score(self, X, y=None):
        """Instance (mask) mAP at IoU 0.25."""
        return self.evaluate(X, (0.25,))["instance"][0.25]["map"]

    def save(self, path):
        check_is_fitted(self, "model_")
        P.save_model(path, self.model_, {"params": _jsonable(self.get_params())})

    @classmethod
    def load(cls, path):
        model, extra = P.load_model(path)
        est = cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in extra.get("params", {}).items()})
        est.model_ = model
        est.anchors_ = model.anchors
        est.classes_ = np.arange(model.n_classes)
        return est


def _jsonable(params):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in params.items()}
