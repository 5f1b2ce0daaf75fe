"""Flexible guidance: turn scene-level or target-oriented hints into regional
centers, then aggregate the local point regions the grasp model consumes.

Guidance never runs a network here. Heatmaps, graspness points, boxes, masks
and clicks all arrive as data (files or request payloads), which is what makes
the stage pluggable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .cloud import PointCloud, ball_query, farthest_point_sample
from .geometry import RegionFrame, to_local_frame

DEFAULT_GRID_PX = 12
DEFAULT_REGION_COUNT = 48
DEFAULT_REGION_RADIUS = 0.08  # inside the 6-12 cm aggregation band
DEFAULT_REGION_POINTS = 512
MIN_REGION_POINTS = 32  # thinner regions carry too little geometry and are dropped


class HeatmapDimMismatch(ValueError):
    """Guidance heatmap dimensions disagree with the scene image."""


class EmptyTarget(ValueError):
    """Target guidance (bbox / mask / click) contains no valid-depth pixel."""


class EmptyRegion(ValueError):
    """A region holds no points, or fewer than the usable minimum."""


@dataclass(eq=False)
class GuidanceSource:
    """A guidance mode plus its payload.

    mode / payload:
      uniform_grid     grid size in pixels (int)
      heatmap          (h, w) confidence map in [0, 1]
      graspness_points (points (n, 3), scores (n,))
      bbox             (u0, v0, u1, v1) half-open pixel rectangle
      mask             (h, w) boolean array
      click            (u, v) pixel
    """

    mode: str
    payload: object

    MODES = ("uniform_grid", "heatmap", "graspness_points", "bbox", "mask", "click")

    def __post_init__(self):
        if self.mode not in self.MODES:
            raise ValueError(f"unknown guidance mode {self.mode!r}")


@dataclass(eq=False)
class Region:
    """A ball-cropped local point set, expressed in its region frame."""

    frame: RegionFrame
    points: np.ndarray  # (k, 3) region frame
    radius: float

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        norms = np.linalg.norm(self.points, axis=1)
        if len(norms) and norms.max() > self.radius + 1e-9:
            raise ValueError("region contains points outside its radius")


def _pixel_index(cloud: PointCloud) -> dict[tuple[int, int], int]:
    if cloud.pixel_of is None:
        raise ValueError("scene cloud needs pixel provenance for pixel-based guidance")
    return {(int(u), int(v)): i for i, (u, v) in enumerate(cloud.pixel_of)}


def _valid_mask(cloud: PointCloud, h: int, w: int) -> np.ndarray:
    mask = np.zeros((h, w), dtype=bool)
    mask[cloud.pixel_of[:, 1], cloud.pixel_of[:, 0]] = True
    return mask


def grid_centers(cloud: PointCloud, image_hw: tuple[int, int],
                 grid_px: int = DEFAULT_GRID_PX) -> list[RegionFrame]:
    """One candidate center per grid cell: the cell's center pixel, or the
    valid-depth pixel nearest to it; cells with no valid depth are skipped."""
    if grid_px < 1:
        raise ValueError("grid_px must be >= 1")
    h, w = image_hw
    lookup = _pixel_index(cloud)
    valid = _valid_mask(cloud, h, w)
    frames = []
    for v0 in range(0, h, grid_px):
        v1 = min(v0 + grid_px, h)
        for u0 in range(0, w, grid_px):
            u1 = min(u0 + grid_px, w)
            cu, cv = (u0 + u1 - 1) // 2, (v0 + v1 - 1) // 2
            cell = valid[v0:v1, u0:u1]
            if not cell.any():
                continue
            if valid[cv, cu]:
                pick = (cu, cv)
            else:
                vv, uu = np.nonzero(cell)
                d2 = (uu + u0 - cu) ** 2 + (vv + v0 - cv) ** 2
                j = int(np.argmin(d2))  # argmin ties resolve row-major
                pick = (int(uu[j] + u0), int(vv[j] + v0))
            idx = lookup[pick]
            frames.append(RegionFrame(center=cloud.points[idx], source_pixel=pick))
    return frames


def centers_from_heatmap(heatmap: np.ndarray, cloud: PointCloud, k: int = DEFAULT_REGION_COUNT,
                         suppress_window: int = 3) -> list[RegionFrame]:
    """Top-k valid-depth local maxima of the heatmap, ties in row-major order.

    Local-max filtering stops the top-k from clustering on a single blob;
    window size 1 disables it.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    heatmap = np.asarray(heatmap, dtype=np.float64)
    h, w = heatmap.shape
    if cloud.pixel_of is None:
        raise ValueError("scene cloud needs pixel provenance")
    if (cloud.pixel_of[:, 0].max(initial=0) >= w) or (cloud.pixel_of[:, 1].max(initial=0) >= h):
        raise HeatmapDimMismatch("heatmap smaller than the scene image")
    is_max = heatmap >= ndimage.maximum_filter(heatmap, size=suppress_window, mode="nearest")
    valid = _valid_mask(cloud, h, w)
    vv, uu = np.nonzero(is_max & valid)
    if len(vv) == 0:
        return []
    order = np.lexsort((uu, vv, -heatmap[vv, uu]))[:k]
    lookup = _pixel_index(cloud)
    frames = []
    for j in order:
        pick = (int(uu[j]), int(vv[j]))
        frames.append(RegionFrame(center=cloud.points[lookup[pick]], source_pixel=pick))
    return frames


def centers_from_graspness(points: np.ndarray, scores: np.ndarray, k: int,
                           intr=None) -> list[RegionFrame]:
    """Top-k externally scored 3D points, ties in input order. When intrinsics
    are given, centers gain pixel provenance by projection."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.lexsort((np.arange(len(scores)), -scores))[:k]
    frames = []
    for i in order:
        pix = None
        if intr is not None:
            u, v = intr.project(points[i : i + 1])[0]
            u, v = int(round(u)), int(round(v))
            if 0 <= u < intr.width and 0 <= v < intr.height:
                pix = (u, v)
        frames.append(RegionFrame(center=points[i], source_pixel=pix))
    return frames


def centers_from_target(target: GuidanceSource, cloud: PointCloud,
                        image_hw: tuple[int, int], k: int = DEFAULT_REGION_COUNT) -> list[RegionFrame]:
    """Local guidance: a click gives exactly one center; a bbox or mask gives
    k FPS-spread centers over the target's valid-depth points."""
    h, w = image_hw
    lookup = _pixel_index(cloud)
    if target.mode == "click":
        u, v = (int(x) for x in target.payload)
        idx = lookup.get((u, v))
        if idx is None:
            raise EmptyTarget(f"click at ({u}, {v}) has no valid depth")
        return [RegionFrame(center=cloud.points[idx], source_pixel=(u, v))]
    if target.mode == "bbox":
        u0, v0, u1, v1 = (int(x) for x in target.payload)
        if not (0 <= u0 < u1 <= w and 0 <= v0 < v1 <= h):
            raise ValueError(f"bbox {(u0, v0, u1, v1)} outside image bounds {(w, h)}")
        sel = ((cloud.pixel_of[:, 0] >= u0) & (cloud.pixel_of[:, 0] < u1)
               & (cloud.pixel_of[:, 1] >= v0) & (cloud.pixel_of[:, 1] < v1))
    elif target.mode == "mask":
        mask = np.asarray(target.payload, dtype=bool)
        if mask.shape != (h, w):
            raise ValueError(f"mask shape {mask.shape} != image {(h, w)}")
        sel = mask[cloud.pixel_of[:, 1], cloud.pixel_of[:, 0]]
    else:
        raise ValueError(f"{target.mode!r} is not a target-oriented mode")
    idx = np.flatnonzero(sel)
    if len(idx) == 0:
        raise EmptyTarget(f"{target.mode} target contains no valid-depth pixel")
    pts = cloud.points[idx]
    seed = int(np.argmin(np.linalg.norm(pts - pts.mean(axis=0), axis=1)))
    keep = idx[farthest_point_sample(pts, k, seed_index=seed)]
    return [
        RegionFrame(center=cloud.points[i],
                    source_pixel=(int(cloud.pixel_of[i, 0]), int(cloud.pixel_of[i, 1])))
        for i in keep
    ]


def cap_centers(cloud_points: np.ndarray, frames: Sequence[RegionFrame], k: int) -> list[RegionFrame]:
    """FPS-downsample an oversized center list to k, seeded nearest-to-centroid.

    FPS prefixes nest, so smaller k always selects a subset of larger k.
    """
    if len(frames) <= k:
        return list(frames)
    centers = np.stack([f.center for f in frames])
    seed = int(np.argmin(np.linalg.norm(centers - centers.mean(axis=0), axis=1)))
    keep = farthest_point_sample(centers, k, seed_index=seed)
    return [frames[i] for i in keep]


def build_regions(cloud: PointCloud, centers: Sequence[RegionFrame],
                  radius: float = DEFAULT_REGION_RADIUS, n_points: int = DEFAULT_REGION_POINTS,
                  k_min: int = MIN_REGION_POINTS) -> tuple[list[Region], list[int]]:
    """Ball-crop each center to at most n_points and shift into the region
    frame. Returns (regions, dropped_center_indices); regions keep the input
    center order with dropped ones omitted."""
    if n_points < k_min:
        raise ValueError("n_points must be >= k_min")
    regions, dropped = [], []
    for i, frame in enumerate(centers):
        try:
            idx = ball_query(cloud.points, frame.center, radius, cap=n_points)
        except Exception:
            dropped.append(i)
            continue
        if len(idx) < k_min:
            dropped.append(i)
            continue
        regions.append(Region(frame=frame, points=to_local_frame(cloud.points[idx], frame),
                              radius=radius))
    return regions, dropped
