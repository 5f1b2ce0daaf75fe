"""Guidance-driven regional 6-DoF grasp detection on depth scenes."""

from .geometry import Grasp, RegionalGrasp, RegionFrame
from .cloud import Intrinsics, PointCloud, depth_to_cloud
from .guidance import GuidanceSource, Region
from .model import AnchorSet, ModelConfig, load_checkpoint, save_checkpoint, train
from .pipeline import DetectConfig, DetectResult, detect
from .postproc import DecodedGrasp, grasp_nms, splice_heatmap

__version__ = "0.1.0"

__all__ = [
    "AnchorSet", "DecodedGrasp", "DetectConfig", "DetectResult", "Grasp",
    "GuidanceSource", "Intrinsics", "ModelConfig", "PointCloud", "Region",
    "RegionFrame", "RegionalGrasp", "depth_to_cloud", "detect", "grasp_nms",
    "load_checkpoint", "save_checkpoint", "splice_heatmap", "train",
    "__version__",
]
