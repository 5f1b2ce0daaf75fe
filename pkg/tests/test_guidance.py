"""Regional-center proposal and ball-crop aggregation behavior."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexlog.cloud import Intrinsics, ball_query, depth_to_cloud, farthest_point_sample
from flexlog.geometry import to_local_frame
from flexlog.guidance import (
    EmptyTarget,
    GuidanceSource,
    HeatmapDimMismatch,
    Region,
    build_regions,
    cap_centers,
    centers_from_graspness,
    centers_from_heatmap,
    centers_from_target,
    grid_centers,
)

INTR = Intrinsics(fx=100.0, fy=100.0, cx=24.0, cy=24.0, width=48, height=48)


def flat_scene(depth_mm=600, holes=()):
    depth = np.full((48, 48), depth_mm, dtype=np.uint16)
    for (v0, v1, u0, u1) in holes:
        depth[v0:v1, u0:u1] = 0
    return depth, depth_to_cloud(depth, INTR)


def test_grid_one_center_per_cell():
    _, cloud = flat_scene()
    frames = grid_centers(cloud, (48, 48), grid_px=12)
    assert len(frames) == 16
    pixels = {f.source_pixel for f in frames}
    assert len(pixels) == 16
    # every valid cell-center pixel is chosen verbatim
    for f in frames:
        u, v = f.source_pixel
        assert u % 12 == 5 and v % 12 == 5


def test_grid_single_cell():
    _, cloud = flat_scene()
    assert len(grid_centers(cloud, (48, 48), grid_px=48)) == 1


def test_grid_nearest_valid_fallback_and_skip():
    # hole over one whole cell kills it; a hole over another cell's center
    # pixel falls back to the nearest valid pixel inside that cell
    depth, cloud = flat_scene(holes=[(0, 12, 0, 12), (4, 8, 16, 20)])
    frames = grid_centers(cloud, (48, 48), grid_px=12)
    assert len(frames) == 15
    near = [f for f in frames if f.source_pixel[1] < 12 and 12 <= f.source_pixel[0] < 24]
    assert len(near) == 1
    u, v = near[0].source_pixel
    assert depth[v, u] > 0 and (12 <= u < 24) and (v < 12)
    # nearest to the dead center (17, 5): pixel just outside the hole
    assert abs(u - 17) + abs(v - 5) <= 3


@given(st.integers(1, 48), st.integers(0, 50))
@settings(deadline=None)
def test_grid_count_bound_and_monotonicity(grid_px, seed):
    rng = np.random.default_rng(seed)
    depth = np.where(rng.uniform(0, 1, (48, 48)) < 0.7, 600, 0).astype(np.uint16)
    cloud = depth_to_cloud(depth, INTR)
    if len(cloud) == 0:
        return
    n = len(grid_centers(cloud, (48, 48), grid_px))
    assert n <= int(np.ceil(48 / grid_px)) ** 2
    if grid_px > 1:
        assert len(grid_centers(cloud, (48, 48), grid_px - 1)) >= n


def test_heatmap_one_hot():
    _, cloud = flat_scene()
    hm = np.zeros((48, 48))
    hm[30, 7] = 1.0
    frames = centers_from_heatmap(hm, cloud, k=1)
    assert len(frames) == 1
    assert frames[0].source_pixel == (7, 30)
    lookup = {(int(u), int(v)): i for i, (u, v) in enumerate(cloud.pixel_of)}
    np.testing.assert_array_equal(frames[0].center, cloud.points[lookup[(7, 30)]])


def test_heatmap_tie_row_major():
    _, cloud = flat_scene()
    hm = np.zeros((48, 48))
    hm[20, 40] = 0.8
    hm[31, 2] = 0.8
    frames = centers_from_heatmap(hm, cloud, k=1)
    assert frames[0].source_pixel == (40, 20)


def test_heatmap_monotone_growth():
    rng = np.random.default_rng(2)
    _, cloud = flat_scene()
    hm = rng.uniform(0, 1, (48, 48))
    prev = set()
    for k in (1, 2, 4, 8, 16, 32):
        cur = {f.source_pixel for f in centers_from_heatmap(hm, cloud, k=k)}
        assert prev <= cur
        prev = cur


def test_heatmap_dim_mismatch():
    _, cloud = flat_scene()
    with pytest.raises(HeatmapDimMismatch):
        centers_from_heatmap(np.zeros((20, 20)), cloud, k=4)


def test_heatmap_local_max_suppression():
    """A single blob yields one center, not k clustered ones."""
    _, cloud = flat_scene()
    vv, uu = np.mgrid[0:48, 0:48]
    hm = np.exp(-((uu - 24.0) ** 2 + (vv - 24.0) ** 2) / 20.0)
    frames = centers_from_heatmap(hm, cloud, k=8)
    assert len(frames) == 1 and frames[0].source_pixel == (24, 24)


def test_click_center_equals_backprojection():
    _, cloud = flat_scene()
    frames = centers_from_target(GuidanceSource("click", (10, 20)), cloud, (48, 48))
    assert len(frames) == 1
    lookup = {(int(u), int(v)): i for i, (u, v) in enumerate(cloud.pixel_of)}
    np.testing.assert_array_equal(frames[0].center, cloud.points[lookup[(10, 20)]])


def test_click_zero_depth_raises():
    _, cloud = flat_scene(holes=[(18, 22, 8, 12)])
    with pytest.raises(EmptyTarget):
        centers_from_target(GuidanceSource("click", (10, 20)), cloud, (48, 48))


def test_mask_fps_centers_match_oracle():
    _, cloud = flat_scene()
    mask = np.zeros((48, 48), dtype=bool)
    mask[10:30, 5:25] = True
    frames = centers_from_target(GuidanceSource("mask", mask), cloud, (48, 48), k=4)
    assert len(frames) == 4
    sel = mask[cloud.pixel_of[:, 1], cloud.pixel_of[:, 0]]
    idx = np.flatnonzero(sel)
    pts = cloud.points[idx]
    seed = int(np.argmin(np.linalg.norm(pts - pts.mean(axis=0), axis=1)))
    expect = idx[farthest_point_sample(pts, 4, seed_index=seed)]
    np.testing.assert_array_equal(np.stack([f.center for f in frames]),
                                  cloud.points[expect])
    for f in frames:
        assert mask[f.source_pixel[1], f.source_pixel[0]]


def test_bbox_bounds_and_empty():
    _, cloud = flat_scene(holes=[(0, 10, 0, 10)])
    with pytest.raises(ValueError):
        centers_from_target(GuidanceSource("bbox", (40, 40, 60, 60)), cloud, (48, 48))
    with pytest.raises(EmptyTarget):
        centers_from_target(GuidanceSource("bbox", (0, 0, 10, 10)), cloud, (48, 48))
    frames = centers_from_target(GuidanceSource("bbox", (20, 20, 40, 40)), cloud,
                                 (48, 48), k=6)
    assert len(frames) == 6
    for f in frames:
        u, v = f.source_pixel
        assert 20 <= u < 40 and 20 <= v < 40


def test_graspness_top_k_tie_by_input_order():
    pts = np.array([[0.0, 0, 0.5], [0.1, 0, 0.5], [0.2, 0, 0.5]])
    frames = centers_from_graspness(pts, np.array([0.5, 0.9, 0.9]), k=2)
    np.testing.assert_array_equal(frames[0].center, pts[1])
    np.testing.assert_array_equal(frames[1].center, pts[2])


def test_build_regions_cap_and_radius():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-0.03, 0.03, (800, 3)) + [0, 0, 0.6]
    from flexlog.cloud import PointCloud
    from flexlog.geometry import RegionFrame
    cloud = PointCloud(points=pts)
    frame = RegionFrame(center=[0.0, 0.0, 0.6])
    regions, dropped = build_regions(cloud, [frame], radius=0.08, n_points=256)
    assert dropped == []
    (region,) = regions
    assert region.points.shape == (256, 3)
    assert np.linalg.norm(region.points, axis=1).max() <= 0.08 + 1e-9


def test_build_regions_drops_isolated_and_thin():
    from flexlog.cloud import PointCloud
    from flexlog.geometry import RegionFrame
    rng = np.random.default_rng(1)
    pts = rng.uniform(-0.02, 0.02, (300, 3)) + [0, 0, 0.6]
    cloud = PointCloud(points=pts)
    good = RegionFrame(center=[0.0, 0.0, 0.6])
    isolated = RegionFrame(center=[1.0, 1.0, 1.0])
    regions, dropped = build_regions(cloud, [isolated, good], radius=0.08,
                                     n_points=128)
    assert dropped == [0]
    assert len(regions) == 1
    np.testing.assert_array_equal(regions[0].frame.center, good.center)


def test_build_regions_equals_crop_plus_fps_oracle():
    from flexlog.cloud import PointCloud
    from flexlog.geometry import RegionFrame
    rng = np.random.default_rng(4)
    pts = rng.uniform(-0.1, 0.1, (2000, 3)) + [0, 0, 0.6]
    cloud = PointCloud(points=pts)
    frame = RegionFrame(center=pts[17])
    (region,), _ = build_regions(cloud, [frame], radius=0.08, n_points=64)
    idx = ball_query(pts, pts[17], 0.08, cap=64)
    np.testing.assert_array_equal(region.points, to_local_frame(pts[idx], frame))


def test_region_rejects_points_outside_radius():
    from flexlog.geometry import RegionFrame
    with pytest.raises(ValueError):
        Region(frame=RegionFrame(center=[0, 0, 0.5]),
               points=np.array([[0.2, 0.0, 0.0]]), radius=0.08)


def test_cap_centers_prefixes_nest():
    from flexlog.geometry import RegionFrame
    rng = np.random.default_rng(9)
    pts = rng.uniform(-0.2, 0.2, (60, 3)) + [0, 0, 0.6]
    frames = [RegionFrame(center=p) for p in pts]
    prev = None
    for k in (4, 8, 16, 32):
        sel = {tuple(f.center) for f in cap_centers(pts, frames, k)}
        assert len(sel) == k
        if prev is not None:
            assert prev <= sel
        prev = sel
    assert len(cap_centers(pts, frames, 100)) == 60
