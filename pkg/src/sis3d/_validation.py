"""Input checks shared by the estimator and the command line."""
from __future__ import annotations

from .detect import BACKBONE_STRIDE
from .grid import TsdfGrid
from .nn import ShapeMismatch
from .pipeline import Chunk, NoViews


def check_chunks(X, chunk_dims=None, require_views=True):
    chunks = list(X)
    if not chunks:
        raise ValueError("need at least one chunk")
    for i, c in enumerate(chunks):
        if not isinstance(c, Chunk):
            raise TypeError(f"item {i} is {type(c).__name__}, expected Chunk")
        if chunk_dims is not None and tuple(c.meta.dims) != tuple(chunk_dims):
            raise ShapeMismatch(f"chunk {i} has dims {c.meta.dims}, expected {tuple(chunk_dims)}")
        if require_views and not c.views:
            raise NoViews(f"chunk {i} has no views")
    return chunks


def check_scenes(X, height=None, require_views=True):
    scenes = list(X)
    for i, s in enumerate(scenes):
        tsdf = getattr(s, "tsdf", None)
        if not isinstance(tsdf, TsdfGrid):
            raise TypeError(f"item {i} lacks a TsdfGrid 'tsdf' attribute")
        dims = tsdf.meta.dims
        if any(d % BACKBONE_STRIDE for d in dims):
            raise ShapeMismatch(f"scene {i} dims {dims} not divisible by {BACKBONE_STRIDE}")
        if height is not None and dims[2] != height:
            raise ShapeMismatch(f"scene {i} height {dims[2]} != {height}")
        if require_views and not getattr(s, "views", None):
            raise NoViews(f"scene {i} has no views")
    return scenes
