"""End-to-end detection: guidance to regions to deduplicated, ranked grasps.

The pipeline is a pure function of (cloud, guidance, checkpoint, config):
resolve guidance into region centers, ball-crop the local point sets, run the
model per region, decode the head outputs, and suppress near-duplicates.
Per-region work may fan out to a bounded thread pool (FLEXLOG_THREADS); the
reduction is by region order, so the worker count never changes the output.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cloud import PointCloud
from .guidance import (DEFAULT_GRID_PX, DEFAULT_REGION_COUNT,
                       DEFAULT_REGION_POINTS, DEFAULT_REGION_RADIUS,
                       EmptyTarget, GuidanceSource, Region, build_regions,
                       cap_centers, centers_from_graspness,
                       centers_from_heatmap, centers_from_target, grid_centers)
from .model import AnchorSet, ModelConfig, ParamLayout, _encoder_forward, _heads_forward
from .postproc import (DEFAULT_NMS_ROTATION, DEFAULT_NMS_TRANSLATION,
                       DecodedGrasp, decode_region, grasp_nms)

DEFAULT_TOP_PER_REGION = 8
DEFAULT_TOP_N = 50


class NoRegions(ValueError):
    """Guidance produced no usable region (bad target, or all regions empty)."""


@dataclass
class DetectConfig:
    """Tunable knobs of the detection pipeline."""

    k: int = DEFAULT_REGION_COUNT
    grid_px: int = DEFAULT_GRID_PX
    radius: float = DEFAULT_REGION_RADIUS
    n_points: int = DEFAULT_REGION_POINTS
    top_per_region: int = DEFAULT_TOP_PER_REGION
    top_n: int = DEFAULT_TOP_N
    nms_translation: float = DEFAULT_NMS_TRANSLATION
    nms_rotation: float = DEFAULT_NMS_ROTATION
    threads: int | None = None  # None reads FLEXLOG_THREADS, default 1

    def __post_init__(self):
        if self.k < 1 or self.top_per_region < 1 or self.top_n < 1:
            raise ValueError("k, top_per_region and top_n must be >= 1")
        if not 0.0 < self.radius:
            raise ValueError("radius must be positive")

    def worker_count(self) -> int:
        if self.threads is not None:
            return max(1, int(self.threads))
        return max(1, int(os.environ.get("FLEXLOG_THREADS", "1")))


@dataclass(eq=False)
class DetectResult:
    """Ranked grasps plus the per-region provenance needed for heatmaps."""

    grasps: list[DecodedGrasp]
    regions: list[Region]
    region_best: list[float]  # best decoded score per region, before NMS
    dropped_centers: int


def resolve_centers(source: GuidanceSource, cloud: PointCloud,
                    image_hw: tuple[int, int], config: DetectConfig,
                    intrinsics=None) -> list:
    """Dispatch a guidance source to its center-producing routine, capped to
    config.k centers (a click yields exactly one)."""
    if source.mode == "uniform_grid":
        grid_px = config.grid_px if source.payload is None else int(source.payload)
        frames = grid_centers(cloud, image_hw, grid_px)
        return cap_centers(cloud.points, frames, config.k)
    if source.mode == "heatmap":
        return centers_from_heatmap(np.asarray(source.payload), cloud, config.k)
    if source.mode == "graspness_points":
        pts, scores = source.payload
        return centers_from_graspness(pts, scores, config.k, intr=intrinsics)
    return centers_from_target(source, cloud, image_hw, config.k)


def detect(cloud: PointCloud, image_hw: tuple[int, int], source: GuidanceSource,
           params: np.ndarray, anchors: AnchorSet, model_config: ModelConfig,
           config: DetectConfig | None = None, intrinsics=None) -> DetectResult:
    """Full detection pass. Raises NoRegions when guidance yields nothing
    croppable (including a click on a pixel with no depth)."""
    config = config or DetectConfig()
    try:
        centers = resolve_centers(source, cloud, image_hw, config, intrinsics)
    except EmptyTarget as e:
        raise NoRegions(str(e)) from e
    regions, dropped = build_regions(cloud, centers, radius=config.radius,
                                     n_points=config.n_points)
    if not regions:
        raise NoRegions(f"guidance mode {source.mode!r} produced no usable region")

    layout = ParamLayout(model_config)
    views = layout.views(np.asarray(params, dtype=np.float64))

    def run_region(item: tuple[int, Region]) -> list[DecodedGrasp]:
        index, region = item
        feature, _ = _encoder_forward(region.points, views, model_config)
        pred, _ = _heads_forward(feature, views, model_config)
        return decode_region(pred, region.frame, anchors, model_config,
                             config.top_per_region, region_index=index)

    items = list(enumerate(regions))
    workers = config.worker_count()
    if workers == 1:
        per_region = [run_region(it) for it in items]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_region = list(pool.map(run_region, items))

    candidates = [g for group in per_region for g in group]
    kept = grasp_nms(candidates, config.nms_translation, config.nms_rotation)
    return DetectResult(
        grasps=kept[:config.top_n],
        regions=regions,
        region_best=[max(g.grasp.score for g in group) for group in per_region],
        dropped_centers=len(dropped),
    )
