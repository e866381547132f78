"""Instance detection and segmentation on fused RGB-D voxel grids, with a numpy autodiff core."""

__version__ = "0.1.0"

from .estimator import InstanceSegmenter  # noqa: E402
from .evalkit import Detection, mean_average_precision  # noqa: E402
from .grid import Box3, FeatureVolume, GridMeta, InstanceAnnotation, TsdfGrid  # noqa: E402
from .pipeline import Chunk, extract_chunks, infer_scene, select_views, train  # noqa: E402

__all__ = ["InstanceSegmenter", "Detection", "mean_average_precision", "Box3", "FeatureVolume", "GridMeta",
           "InstanceAnnotation", "TsdfGrid", "Chunk", "extract_chunks", "infer_scene", "select_views", "train",
           "__version__"]
