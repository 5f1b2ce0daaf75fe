"""Analytic solid primitives: ray intersection, surface sampling, normals.

Everything is closed-form, which keeps synthetic depth rendering, antipodal
label generation and contact evaluation mutually consistent without meshes.

Object frames: boxes are axis-aligned around the origin with full extents
`dims`; cylinders have their axis along +z with dims (radius, height);
spheres have dims (radius,). A pose (rotation, position) places the object
in the camera frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("box", "cylinder", "sphere")


@dataclass(eq=False)
class SceneObject:
    kind: str
    dims: np.ndarray       # see module docstring
    rotation: np.ndarray   # (3, 3) object -> camera
    position: np.ndarray   # (3,) camera frame

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        self.dims = np.asarray(self.dims, dtype=np.float64).reshape(-1)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)

    def bounding_radius(self) -> float:
        if self.kind == "box":
            return float(np.linalg.norm(self.dims) / 2)
        if self.kind == "cylinder":
            r, h = self.dims
            return float(np.hypot(r, h / 2))
        return float(self.dims[0])

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "dims": [float(v) for v in self.dims],
            "rotation": [float(v) for v in self.rotation.reshape(-1)],
            "position": [float(v) for v in self.position],
        }

    @classmethod
    def from_json(cls, rec: dict) -> "SceneObject":
        return cls(
            kind=rec["kind"],
            dims=np.asarray(rec["dims"], dtype=np.float64),
            rotation=np.asarray(rec["rotation"], dtype=np.float64).reshape(3, 3),
            position=np.asarray(rec["position"], dtype=np.float64),
        )

    def to_object_frame(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64).reshape(-1, 3) - self.position) @ self.rotation

    def to_camera_frame(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64).reshape(-1, 3) @ self.rotation.T + self.position


def _ray_box(o, d, extents):
    half = extents / 2
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    lo = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    hi = np.where(np.isnan(t1), np.inf, np.maximum(t1, t2))
    # rays parallel to an axis miss unless the origin is inside that slab
    parallel = d == 0
    outside = parallel & (np.abs(o) > half)
    tmin = lo.max(axis=1)
    tmax = hi.min(axis=1)
    valid = (tmax >= tmin) & ~outside.any(axis=1)
    return tmin, tmax, valid


def _ray_sphere(o, d, radius):
    a = np.einsum("ij,ij->i", d, d)
    b = 2.0 * np.einsum("ij,ij->i", o, d)
    c = np.einsum("ij,ij->i", o, o) - radius * radius
    disc = b * b - 4 * a * c
    valid = disc >= 0
    root = np.sqrt(np.maximum(disc, 0.0))
    tmin = (-b - root) / (2 * a)
    tmax = (-b + root) / (2 * a)
    return tmin, tmax, valid


def _ray_cylinder(o, d, radius, height):
    half = height / 2
    n = len(o)
    tmin = np.full(n, np.inf)
    tmax = np.full(n, -np.inf)
    # side surface: quadratic in the xy-plane, clipped to |z| <= half
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2 * (o[:, 0] * d[:, 0] + o[:, 1] * d[:, 1])
    c = o[:, 0] ** 2 + o[:, 1] ** 2 - radius * radius
    disc = b * b - 4 * a * c
    quad = (a > 0) & (disc >= 0)
    root = np.sqrt(np.maximum(disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        for sign in (-1.0, 1.0):
            t = (-b + sign * root) / (2 * a)
            z = o[:, 2] + t * d[:, 2]
            ok = quad & (np.abs(z) <= half)
            tmin = np.where(ok, np.minimum(tmin, t), tmin)
            tmax = np.where(ok, np.maximum(tmax, t), tmax)
        # caps: plane z = +-half, inside the disk
        for zcap in (-half, half):
            t = (zcap - o[:, 2]) / d[:, 2]
            x = o[:, 0] + t * d[:, 0]
            y = o[:, 1] + t * d[:, 1]
            ok = np.isfinite(t) & (x * x + y * y <= radius * radius)
            tmin = np.where(ok, np.minimum(tmin, t), tmin)
            tmax = np.where(ok, np.maximum(tmax, t), tmax)
    valid = np.isfinite(tmin) & (tmax >= tmin)
    return tmin, tmax, valid


def ray_intersect(obj: SceneObject, origins: np.ndarray, dirs: np.ndarray):
    """Entry/exit ray parameters against one object.

    Rays are camera-frame, p(t) = origin + t * dir, dir need not be unit.
    Returns (tmin, tmax, valid) arrays; consult entries only where valid.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    o = (origins - obj.position) @ obj.rotation
    d = dirs @ obj.rotation
    if obj.kind == "box":
        return _ray_box(o, d, obj.dims)
    if obj.kind == "sphere":
        return _ray_sphere(o, d, obj.dims[0])
    return _ray_cylinder(o, d, obj.dims[0], obj.dims[1])


def surface_normals(obj: SceneObject, points: np.ndarray) -> np.ndarray:
    """Outward unit normals for camera-frame points lying on the surface."""
    p = obj.to_object_frame(points)
    if obj.kind == "sphere":
        n = p / np.linalg.norm(p, axis=1, keepdims=True)
    elif obj.kind == "box":
        half = obj.dims / 2
        gap = half - np.abs(p)  # distance to each face plane
        axis = np.argmin(gap, axis=1)
        rows = np.arange(len(p))
        n = np.zeros_like(p)
        sign = np.sign(p[rows, axis])
        n[rows, axis] = np.where(sign == 0, 1.0, sign)
    else:
        r, h = obj.dims
        cap_gap = h / 2 - np.abs(p[:, 2])
        rho = np.hypot(p[:, 0], p[:, 1])
        side_gap = r - rho
        n = np.zeros_like(p)
        on_cap = cap_gap < side_gap
        n[on_cap, 2] = np.sign(p[on_cap, 2])
        safe = np.maximum(rho, 1e-12)
        n[~on_cap, 0] = p[~on_cap, 0] / safe[~on_cap]
        n[~on_cap, 1] = p[~on_cap, 1] / safe[~on_cap]
    return n @ obj.rotation.T


def sample_surface(obj: SceneObject, count: int, rng: np.random.Generator):
    """Area-uniform camera-frame surface points with outward normals."""
    if obj.kind == "sphere":
        r = obj.dims[0]
        n = rng.normal(size=(count, 3))
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        local = n * r
        normals_local = n
    elif obj.kind == "box":
        ex, ey, ez = obj.dims
        areas = np.array([ey * ez, ey * ez, ex * ez, ex * ez, ex * ey, ex * ey])
        face = rng.choice(6, size=count, p=areas / areas.sum())
        uv = rng.uniform(-0.5, 0.5, size=(count, 2))
        local = np.empty((count, 3))
        normals_local = np.zeros((count, 3))
        for f in range(6):
            sel = face == f
            axis, sign = divmod(f, 2)
            sign = 1.0 if sign == 0 else -1.0
            others = [i for i in range(3) if i != axis]
            local[sel, axis] = sign * obj.dims[axis] / 2
            local[sel, others[0]] = uv[sel, 0] * obj.dims[others[0]]
            local[sel, others[1]] = uv[sel, 1] * obj.dims[others[1]]
            normals_local[sel, axis] = sign
    else:
        r, h = obj.dims
        side_area = 2 * np.pi * r * h
        cap_area = np.pi * r * r
        part = rng.choice(3, size=count,
                          p=np.array([side_area, cap_area, cap_area]) / (side_area + 2 * cap_area))
        local = np.empty((count, 3))
        normals_local = np.zeros((count, 3))
        phi = rng.uniform(0, 2 * np.pi, size=count)
        sel = part == 0
        local[sel, 0] = r * np.cos(phi[sel])
        local[sel, 1] = r * np.sin(phi[sel])
        local[sel, 2] = rng.uniform(-h / 2, h / 2, size=sel.sum())
        normals_local[sel, 0] = np.cos(phi[sel])
        normals_local[sel, 1] = np.sin(phi[sel])
        for which, sign in ((1, 1.0), (2, -1.0)):
            sel = part == which
            rho = r * np.sqrt(rng.uniform(0, 1, size=sel.sum()))
            local[sel, 0] = rho * np.cos(phi[sel])
            local[sel, 1] = rho * np.sin(phi[sel])
            local[sel, 2] = sign * h / 2
            normals_local[sel, 2] = sign
    return obj.to_camera_frame(local), normals_local @ obj.rotation.T
