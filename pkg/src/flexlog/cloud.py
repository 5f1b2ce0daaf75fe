"""Depth back-projection and the point sampling kernels.

The kernels are deliberately exact rather than approximate: farthest point
sampling is greedy with ties broken by lowest index, and ball query reduces
oversized neighborhoods with an FPS pass seeded at the point nearest the
query center. Golden tests rely on this determinism, so any optimization has
to preserve results bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

try:  # compiled FPS inner loop; the numpy path below is the reference
    from numba import njit
except ImportError:  # pragma: no cover - numba is an optional accelerator
    njit = None


class DimensionMismatch(ValueError):
    """Depth image dimensions disagree with the intrinsics."""


class EmptyInput(ValueError):
    """Sampling kernel called on an empty point set."""


class NoNeighbors(ValueError):
    """Ball query found no points inside the ball."""


@dataclass
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 0.001  # stored depth unit -> meters

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if self.depth_scale <= 0:
            raise ValueError("depth_scale must be positive")

    def to_json(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height, "depth_scale": self.depth_scale,
        }

    @classmethod
    def from_json(cls, rec: dict) -> "Intrinsics":
        return cls(
            fx=float(rec["fx"]), fy=float(rec["fy"]),
            cx=float(rec["cx"]), cy=float(rec["cy"]),
            width=int(rec["width"]), height=int(rec["height"]),
            depth_scale=float(rec["depth_scale"]),
        )

    def project(self, points: np.ndarray) -> np.ndarray:
        """Pinhole projection of camera-frame points to float (u, v) pixels."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.stack(
            [self.fx * p[:, 0] / p[:, 2] + self.cx, self.fy * p[:, 1] / p[:, 2] + self.cy],
            axis=1,
        )


@dataclass(eq=False)
class PointCloud:
    """Camera-frame points, optionally remembering which pixel each came from."""

    points: np.ndarray                 # (n, 3) float64
    pixel_of: np.ndarray | None = None  # (n, 2) int (u, v)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.pixel_of is not None:
            self.pixel_of = np.asarray(self.pixel_of, dtype=np.int64).reshape(-1, 2)
            if len(self.pixel_of) != len(self.points):
                raise ValueError("pixel_of length must match points")

    def __len__(self) -> int:
        return len(self.points)


def depth_to_cloud(depth: np.ndarray, intr: Intrinsics) -> PointCloud:
    """Back-project a depth image; zero depth marks invalid pixels.

    Points come out in row-major pixel order. pixel_of stores (u, v).
    """
    depth = np.asarray(depth)
    if depth.shape != (intr.height, intr.width):
        raise DimensionMismatch(
            f"depth shape {depth.shape} != intrinsics ({intr.height}, {intr.width})"
        )
    v, u = np.nonzero(depth > 0)
    z = depth[v, u].astype(np.float64) * intr.depth_scale
    x = (u - intr.cx) * z / intr.fx
    y = (v - intr.cy) * z / intr.fy
    return PointCloud(points=np.stack([x, y, z], axis=1), pixel_of=np.stack([u, v], axis=1))


def _fps_numpy(points: np.ndarray, m: int, seed_index: int) -> np.ndarray:
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = seed_index
    # min squared distance to the chosen set; selected entries are parked at -1
    # so duplicates (distance 0) still beat them and fall out in index order.
    # (diff**2).sum(axis=1) accumulates x then y then z, matching the scalar
    # chain in the compiled kernel bit-for-bit (einsum's SIMD path does not).
    diff = points - points[seed_index]
    mind = (diff * diff).sum(axis=1)
    mind[seed_index] = -1.0
    for i in range(1, m):
        nxt = int(np.argmax(mind))
        chosen[i] = nxt
        diff = points - points[nxt]
        d = (diff * diff).sum(axis=1)
        np.minimum(mind, d, out=mind)
        mind[nxt] = -1.0
    return chosen


if njit is not None:

    @njit(cache=True)
    def _fps_compiled(points: np.ndarray, m: int, seed_index: int) -> np.ndarray:
        # Same greedy recurrence and rounding as _fps_numpy: squared distance
        # accumulates x then y then z, argmax keeps the first maximum, chosen
        # entries park at -1. One fused pass updates mind and finds the max;
        # when the running max lands on the point parked this round (only
        # possible through duplicates), a plain rescan recovers the argmax.
        n = points.shape[0]
        chosen = np.empty(m, dtype=np.int64)
        chosen[0] = seed_index
        mind = np.empty(n, dtype=np.float64)
        last = seed_index
        for j in range(1, m):
            lx, ly, lz = points[last, 0], points[last, 1], points[last, 2]
            best = 0
            bv = -2.0
            for i in range(n):
                dx = points[i, 0] - lx
                dy = points[i, 1] - ly
                dz = points[i, 2] - lz
                d = dx * dx + dy * dy + dz * dz
                if j == 1 or d < mind[i]:
                    mind[i] = d
                if mind[i] > bv:
                    bv = mind[i]
                    best = i
            mind[last] = -1.0
            if mind[best] < 0.0:
                best = 0
                bv = mind[0]
                for i in range(1, n):
                    if mind[i] > bv:
                        bv = mind[i]
                        best = i
            chosen[j] = best
            last = best
        return chosen


def farthest_point_sample(points: np.ndarray, m: int, seed_index: int = 0) -> np.ndarray:
    """Greedy FPS: grow from seed_index, always adding the point farthest from
    the chosen set. Ties break to the lowest index; m >= n returns all indices.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    if n == 0:
        raise EmptyInput("farthest_point_sample on empty point set")
    if m < 1:
        raise ValueError("m must be >= 1")
    m = min(m, n)
    if njit is not None:
        return _fps_compiled(np.ascontiguousarray(points), m, seed_index)
    return _fps_numpy(points, m, seed_index)


def ball_query(points: np.ndarray, center: np.ndarray, radius: float, cap: int) -> np.ndarray:
    """Indices of points with ||p - center|| <= radius, FPS-capped to at most
    `cap` (seeded at the in-ball point nearest the center)."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    if cap < 1:
        raise ValueError("cap must be >= 1")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    center = np.asarray(center, dtype=np.float64).reshape(3)
    diff = points - center
    d2 = np.einsum("ij,ij->i", diff, diff)
    inside = np.flatnonzero(d2 <= radius * radius)
    if len(inside) == 0:
        raise NoNeighbors(f"no points within {radius} m of {center}")
    if len(inside) <= cap:
        return inside
    seed = int(np.argmin(d2[inside]))
    keep = farthest_point_sample(points[inside], cap, seed_index=seed)
    return inside[keep]
