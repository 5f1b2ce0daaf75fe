"""Synthetic scene generation and the regional grasp-centric training dataset.

Scenes are primitive arrangements on a tabletop viewed top-down: the camera
sits at the origin looking along +z and the table is the constant-depth plane
z = table_z, so depth images come from closed-form ray casting. Ground-truth
grasps come from an antipodal oracle over the primitives' analytic surfaces;
each label records the smallest friction grade at which it achieves force
closure and is scored 1.1 - mu_min, clamped to [0, 1].

The dataset pipeline projects scene labels to pixels, renders a kernel + blur
heatmap, grid-samples region centers from it (plus a seeded fraction of noise
centers), and crops one RegionSample per surviving center. Samples carry f32
payloads from creation so the binary record round-trip is bit-exact.

Binary dataset layout (little-endian): magic "FLXG", version u16 = 1,
record_count u32, then per record: center 3xf64, point_count u16,
points point_count x 3 x f32, label_count u16, labels label_count x 8 x f32
(dx, dy, dz, theta, gamma, beta, width, score).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .cloud import Intrinsics, NoNeighbors, PointCloud, ball_query, depth_to_cloud
from .evaluation import DEFAULT_GRADES
from .geometry import Grasp, RegionFrame, RegionalGrasp, axis_to_angles
from .guidance import (DEFAULT_REGION_POINTS, DEFAULT_REGION_RADIUS, EmptyRegion,
                       MIN_REGION_POINTS)
from .primitives import SceneObject, ray_intersect, sample_surface, surface_normals

MAGIC = b"FLXG"
VERSION = 1
LABEL_RADIUS = 0.02   # m; labels farther than this from a region center are dropped
TABLE_Z = 0.6         # m; constant-depth tabletop plane
MU_LABEL = 0.4        # friction cone half-angle atan(mu) admitted for labels
PLACEMENT_GAP = 0.015  # m between bounding spheres; keeps finger slabs single-object
MAX_PLACEMENT_TRIES = 200

DEFAULT_INTRINSICS = Intrinsics(fx=300.0, fy=300.0, cx=160.0, cy=120.0,
                                width=320, height=240, depth_scale=0.001)


class PlacementFailure(RuntimeError):
    """Could not place an object without overlap within the retry budget."""


class CorruptRecord(ValueError):
    """Dataset bytes fail validation: bad magic/version, truncation, or NaN."""


@dataclass(eq=False)
class Scene:
    """A rendered synthetic scene: quantized depth plus its generating objects."""

    depth_mm: np.ndarray  # (h, w) uint16 depth in depth_scale units
    intrinsics: Intrinsics
    objects: list[SceneObject]
    table_z: float = TABLE_Z

    def cloud(self) -> PointCloud:
        return depth_to_cloud(self.depth_mm, self.intrinsics)


@dataclass(eq=False)
class SceneLabels:
    """Oracle grasps for a scene with their provenance.

    contact_points/normals hold the analytic antipodal pair behind each label,
    so force closure at the recorded mu_min can be re-checked independently.
    """

    grasps: list[Grasp]
    object_ids: np.ndarray       # (n,) int32
    mask: np.ndarray             # (h, w) int32 instance ids, 0 = table
    mu_min: np.ndarray           # (n,) float64
    contact_points: np.ndarray   # (n, 2, 3)
    contact_normals: np.ndarray  # (n, 2, 3)

    def __post_init__(self):
        n = len(self.grasps)
        self.object_ids = np.asarray(self.object_ids, dtype=np.int32).reshape(n)
        self.mu_min = np.asarray(self.mu_min, dtype=np.float64).reshape(n)
        self.contact_points = np.asarray(self.contact_points, dtype=np.float64).reshape(n, 2, 3)
        self.contact_normals = np.asarray(self.contact_normals, dtype=np.float64).reshape(n, 2, 3)


@dataclass(eq=False)
class RegionSample:
    """One training example: a cropped region and its nearby grasp labels.

    points and label payloads are f32-valued (held in f64 containers) so
    encode/decode round-trips reproduce the sample exactly.
    """

    frame: RegionFrame
    points: np.ndarray  # (k, 3) region frame
    labels: list[RegionalGrasp]

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)

    def __eq__(self, other) -> bool:
        # Persisted content only: source_pixel is provenance and not serialized.
        if not isinstance(other, RegionSample):
            return NotImplemented
        if not np.array_equal(self.frame.center, other.frame.center):
            return False
        if not np.array_equal(self.points, other.points):
            return False
        if len(self.labels) != len(other.labels):
            return False
        for a, b in zip(self.labels, other.labels):
            if not np.array_equal(a.dt, b.dt):
                return False
            if (a.theta, a.gamma, a.beta, a.width, a.score) != (
                    b.theta, b.gamma, b.beta, b.width, b.score):
                return False
        return True


@dataclass
class DatagenConfig:
    seed: int = 0
    scene_count: int = 4
    object_count: int = 4
    labels_per_object: int = 40
    sigma_k: float = 3.0       # px; per-label kernel width (unspecified upstream, ours)
    sigma_blur: float = 2.0    # px; post-kernel blur width (ours)
    cell_px: int = 8           # px; grid-sampling cell (ours)
    threshold: float = 0.2     # heatmap value a cell argmax must reach (ours)
    noise_frac: float = 0.1    # fraction of cells adding a random center (ours)
    min_label_score: float = 0.5  # labels below this are not projected (ours)
    region_radius: float = DEFAULT_REGION_RADIUS
    region_points: int = DEFAULT_REGION_POINTS

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must be in (0,1)")
        if not 0.0 <= self.noise_frac < 1.0:
            raise ValueError("noise_frac must be in [0,1)")
        if not 0.06 <= self.region_radius <= 0.12:
            raise ValueError("region_radius must be within [0.06, 0.12] m")


@dataclass
class DatasetStats:
    scenes: int = 0
    regions: int = 0
    labeled_regions: int = 0
    labels: int = 0

    @property
    def invalid_fraction(self) -> float:
        if self.regions == 0:
            return 0.0
        return (self.regions - self.labeled_regions) / self.regions


# ---------------------------------------------------------------------------
# heatmap pipeline


def project_to_planar(labels: SceneLabels, intr: Intrinsics,
                      min_score: float = 0.0) -> np.ndarray:
    """Project grasp centers to nearest-integer pixels; drop z<=0 and
    out-of-image results. Returns an (m, 2) int array of (u, v)."""
    out = []
    for g in labels.grasps:
        if g.score < min_score or g.t[2] <= 0:
            continue
        u = int(round(intr.fx * g.t[0] / g.t[2] + intr.cx))
        v = int(round(intr.fy * g.t[1] / g.t[2] + intr.cy))
        if 0 <= u < intr.width and 0 <= v < intr.height:
            out.append((u, v))
    return np.asarray(out, dtype=np.int64).reshape(-1, 2)


def paint_kernels(pixels: np.ndarray, h: int, w: int, sigma_k: float) -> np.ndarray:
    """Per-pixel max over per-label kernels exp(-d^2 / (2 sigma_k^2))."""
    out = np.zeros((h, w))
    if len(pixels) == 0:
        return out
    r = int(math.ceil(4 * sigma_k))  # beyond 4 sigma the kernel is < 4e-4
    for u, v in np.asarray(pixels):
        u0, u1 = max(0, u - r), min(w, u + r + 1)
        v0, v1 = max(0, v - r), min(h, v + r + 1)
        du = np.arange(u0, u1) - u
        dv = np.arange(v0, v1) - v
        d2 = dv[:, None] ** 2 + du[None, :] ** 2
        np.maximum(out[v0:v1, u0:u1], np.exp(-d2 / (2 * sigma_k**2)),
                   out=out[v0:v1, u0:u1])
    return out


def render_label_heatmap(pixels: np.ndarray, h: int, w: int,
                         sigma_k: float = 3.0, sigma_blur: float = 2.0) -> np.ndarray:
    """Kernel stage, Gaussian blur, then renormalize the max to 1."""
    if sigma_k <= 0 or sigma_blur <= 0:
        raise ValueError("sigma_k and sigma_blur must be > 0")
    heat = paint_kernels(pixels, h, w, sigma_k)
    heat = ndimage.gaussian_filter(heat, sigma=sigma_blur, mode="constant")
    peak = heat.max()
    if peak > 0:
        heat = heat / peak
    return np.clip(heat, 0.0, 1.0)


def sample_label_centers(heatmap: np.ndarray, cell_px: int = 8, threshold: float = 0.2,
                         noise_frac: float = 0.1, rng_seed=0,
                         valid: np.ndarray | None = None) -> list[tuple[int, int]]:
    """Grid-sample centers: per cell the argmax pixel if it reaches threshold,
    plus (in a seeded noise_frac fraction of cells) one uniform valid pixel.

    Cells scan in row-major order and the rng is consumed in that fixed order,
    so results are deterministic per seed.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0,1)")
    if not 0.0 <= noise_frac < 1.0:
        raise ValueError("noise_frac must be in [0,1)")
    h, w = heatmap.shape
    if valid is None:
        valid = np.ones((h, w), dtype=bool)
    rng = np.random.default_rng(rng_seed)
    centers: list[tuple[int, int]] = []
    seen = set()

    def emit(u, v):
        if (u, v) not in seen:
            seen.add((u, v))
            centers.append((u, v))

    for v0 in range(0, h, cell_px):
        for u0 in range(0, w, cell_px):
            cell = heatmap[v0:v0 + cell_px, u0:u0 + cell_px]
            ok = valid[v0:v0 + cell_px, u0:u0 + cell_px]
            masked = np.where(ok, cell, -np.inf)
            want_noise = rng.random() < noise_frac
            if ok.any():
                flat = int(np.argmax(masked))
                dv, du = divmod(flat, cell.shape[1])
                if masked[dv, du] >= threshold:
                    emit(u0 + du, v0 + dv)
                if want_noise:
                    choices = np.flatnonzero(ok)
                    pick = int(choices[rng.integers(len(choices))])
                    dv, du = divmod(pick, cell.shape[1])
                    emit(u0 + du, v0 + dv)
    return centers


# ---------------------------------------------------------------------------
# scene synthesis


def _place_objects(rng: np.random.Generator, object_count: int) -> list[SceneObject]:
    """Random primitives resting on the table, pairwise separated bounding
    spheres, fully inside the camera frustum."""
    kinds = ("box", "cylinder", "sphere")
    placed: list[SceneObject] = []
    for _ in range(object_count):
        for _attempt in range(MAX_PLACEMENT_TRIES):
            kind = kinds[int(rng.integers(len(kinds)))]
            if kind == "box":
                dims = tuple(rng.uniform(0.02, 0.08, size=3))
                height = dims[2]
            elif kind == "cylinder":
                radius = rng.uniform(0.01, 0.04)
                height = rng.uniform(0.02, 0.08)
                dims = (radius, height)
            else:
                radius = rng.uniform(0.01, 0.04)
                dims = (radius,)
                height = 2 * radius
            yaw = rng.uniform(-math.pi, math.pi)
            c, s = math.cos(yaw), math.sin(yaw)
            rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
            obj = SceneObject(kind=kind, dims=dims, rotation=rot,
                              position=np.zeros(3))
            rb = obj.bounding_radius()
            z = TABLE_Z - height / 2
            x_lim = max(0.02, 0.24 - rb)
            y_lim = max(0.02, 0.16 - rb)
            pos = np.array([rng.uniform(-x_lim, x_lim), rng.uniform(-y_lim, y_lim), z])
            if all(np.linalg.norm(pos - q.position) >= rb + q.bounding_radius() + PLACEMENT_GAP
                   for q in placed):
                obj.position = pos
                placed.append(obj)
                break
        else:
            raise PlacementFailure(f"object {len(placed)} found no free pose in "
                                   f"{MAX_PLACEMENT_TRIES} tries")
    return placed


def _render_depth(objects: list[SceneObject], intr: Intrinsics,
                  table_z: float) -> tuple[np.ndarray, np.ndarray]:
    """Ray-cast per-pixel depth; rays use direction ((u-cx)/fx, (v-cy)/fy, 1)
    so the ray parameter equals depth z. Returns (depth_mm u16, mask int32)."""
    h, w = intr.height, intr.width
    uu, vv = np.meshgrid(np.arange(w), np.arange(h))
    dirs = np.stack([(uu.ravel() - intr.cx) / intr.fx,
                     (vv.ravel() - intr.cy) / intr.fy,
                     np.ones(h * w)], axis=1)
    origins = np.zeros_like(dirs)
    depth = np.full(h * w, table_z)
    mask = np.zeros(h * w, dtype=np.int32)
    for i, obj in enumerate(objects):
        tmin, _tmax, hit = ray_intersect(obj, origins, dirs)
        closer = hit & (tmin > 0) & (tmin < depth)
        depth[closer] = tmin[closer]
        mask[closer] = i + 1
    depth_mm = np.round(depth / intr.depth_scale).astype(np.uint16)
    return depth_mm.reshape(h, w), mask.reshape(h, w)


def _rotate_away(n: np.ndarray, angle: float, rng: np.random.Generator) -> np.ndarray:
    """Unit vector at the given angle from -n, azimuth uniform."""
    base = -n
    helper = np.array([1.0, 0.0, 0.0])
    if abs(base[0]) > 0.9:
        helper = np.array([0.0, 1.0, 0.0])
    e1 = np.cross(base, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(base, e1)
    phi = rng.uniform(0.0, 2 * math.pi)
    perp = math.cos(phi) * e1 + math.sin(phi) * e2
    return math.cos(angle) * base + math.sin(angle) * perp


def _mu_min_for(cone_angle: float, grades=DEFAULT_GRADES) -> float | None:
    for mu in grades:
        if cone_angle <= math.atan(mu) + 1e-12:
            return mu
    return None


def _oracle_pairs(obj: SceneObject, rng: np.random.Generator, count: int,
                  w_max: float) -> list[tuple]:
    """Antipodal contact pairs: half cast straight through along -n1 (exactly
    antipodal on these primitives), half at a jittered angle so higher
    friction grades appear. Returns (p1, n1, p2, n2, mu_min) tuples."""
    cone_limit = math.atan(MU_LABEL)
    want_exact = (count + 1) // 2
    pairs: list[tuple] = []
    n_exact = 0
    for _round in range(60):
        if len(pairs) >= count:
            break
        batch = 32
        pts, nrms = sample_surface(obj, batch, rng)
        angles = rng.uniform(math.radians(5), math.radians(21), size=batch)
        for p1, n1, ang in zip(pts, nrms, angles):
            if len(pairs) >= count:
                break
            exact = n_exact < want_exact
            d = -n1 if exact else _rotate_away(n1, ang, rng)
            tmin, tmax, hit = ray_intersect(obj, p1[None, :], d[None, :])
            if not hit[0] or tmax[0] <= 1e-6:
                continue
            p2 = p1 + d * tmax[0]
            n2 = surface_normals(obj, p2[None, :])[0]
            axis = p2 - p1
            sep = np.linalg.norm(axis)
            if not 0.005 <= sep <= w_max:
                continue
            axis = axis / sep
            a1 = math.acos(min(1.0, max(-1.0, float(-axis @ n1))))
            a2 = math.acos(min(1.0, max(-1.0, float(axis @ n2))))
            worst = max(a1, a2)
            if worst > cone_limit + 1e-12:
                continue
            mu_min = _mu_min_for(worst)
            if mu_min is None:
                continue
            pairs.append((p1, n1, p2, n2, mu_min))
            if exact:
                n_exact += 1
    return pairs


def synthesize_scene(rng_seed, object_count: int = 4, labels_per_object: int = 40,
                     intr: Intrinsics = DEFAULT_INTRINSICS,
                     w_max: float = 0.10) -> tuple[Scene, SceneLabels]:
    """Deterministic synthetic scene plus antipodal-oracle labels."""
    if not 1 <= object_count <= 12:
        raise ValueError("object_count must be in [1, 12]")
    rng = np.random.default_rng(rng_seed)
    objects = _place_objects(rng, object_count)
    depth_mm, mask = _render_depth(objects, intr, TABLE_Z)
    scene = Scene(depth_mm=depth_mm, intrinsics=intr, objects=objects)

    grasps, obj_ids, mu_mins, cpoints, cnormals = [], [], [], [], []
    for i, obj in enumerate(objects):
        for p1, n1, p2, n2, mu_min in _oracle_pairs(obj, rng, labels_per_object, w_max):
            t = (p1 + p2) / 2
            u = intr.fx * t[0] / t[2] + intr.cx
            v = intr.fy * t[1] / t[2] + intr.cy
            if not (0 <= round(u) < intr.width and 0 <= round(v) < intr.height):
                continue
            theta, beta = axis_to_angles(p2 - p1)
            gamma = rng.uniform(-1.0, 1.0)
            score = min(1.0, max(0.0, 1.1 - mu_min))
            grasps.append(Grasp(t=t, theta=theta, gamma=gamma, beta=beta,
                                width=float(np.linalg.norm(p2 - p1)), score=score,
                                max_width=w_max))
            obj_ids.append(i)
            mu_mins.append(mu_min)
            cpoints.append([p1, p2])
            cnormals.append([n1, n2])
    labels = SceneLabels(grasps=grasps, object_ids=np.array(obj_ids, dtype=np.int32),
                         mask=mask, mu_min=np.array(mu_mins),
                         contact_points=np.array(cpoints).reshape(-1, 2, 3),
                         contact_normals=np.array(cnormals).reshape(-1, 2, 3))
    return scene, labels


# ---------------------------------------------------------------------------
# region samples


def _f32_angle(x: float) -> float:
    """Nearest f32 no farther from zero than pi/2: f32(pi/2) itself rounds
    slightly above the bound, which the grasp types reject."""
    q = np.float32(x)
    limit = math.pi / 2
    while abs(float(q)) > limit:
        q = np.nextafter(q, np.float32(0.0))
    return float(q)


def make_region_sample(cloud: PointCloud, labels: SceneLabels, frame: RegionFrame,
                       radius: float = DEFAULT_REGION_RADIUS,
                       n_points: int = DEFAULT_REGION_POINTS) -> RegionSample:
    """Crop the ball around the frame center and keep labels within 2 cm.

    Stored coordinates are f32-quantized; the 2 cm bound is enforced on the
    quantized dt so the invariant survives serialization.
    """
    if not 0.06 <= radius <= 0.12:
        raise ValueError("radius must be within [0.06, 0.12] m")
    try:
        idx = ball_query(cloud.points, frame.center, radius, cap=n_points)
    except NoNeighbors as e:
        raise EmptyRegion(str(e)) from e
    if len(idx) < MIN_REGION_POINTS:
        raise EmptyRegion(f"region has {len(idx)} points; need {MIN_REGION_POINTS}")
    points = (cloud.points[idx] - frame.center).astype(np.float32).astype(np.float64)

    kept: list[RegionalGrasp] = []
    for g in labels.grasps:
        dt = (g.t - frame.center).astype(np.float32)
        if float(np.linalg.norm(dt.astype(np.float64))) > LABEL_RADIUS:
            continue
        kept.append(RegionalGrasp(
            dt=dt.astype(np.float64),
            theta=_f32_angle(g.theta), gamma=_f32_angle(g.gamma),
            beta=_f32_angle(g.beta), width=float(np.float32(g.width)),
            score=float(np.float32(g.score)),
        ))
    return RegionSample(frame=frame, points=points, labels=kept)


# ---------------------------------------------------------------------------
# binary records


def encode_record(sample: RegionSample) -> bytes:
    k = len(sample.points)
    m = len(sample.labels)
    parts = [struct.pack("<3d", *sample.frame.center), struct.pack("<H", k),
             sample.points.astype("<f4").tobytes(), struct.pack("<H", m)]
    for g in sample.labels:
        parts.append(struct.pack("<8f", *g.dt, g.theta, g.gamma, g.beta,
                                 g.width, g.score))
    return b"".join(parts)


def decode_record(data: bytes, offset: int = 0) -> tuple[RegionSample, int]:
    """Parse one record starting at offset; returns (sample, next offset)."""
    def take(n):
        nonlocal offset
        if offset + n > len(data):
            raise CorruptRecord("truncated record")
        chunk = data[offset:offset + n]
        offset += n
        return chunk

    center = np.frombuffer(take(24), dtype="<f8").astype(np.float64)
    (k,) = struct.unpack("<H", take(2))
    points = np.frombuffer(take(12 * k), dtype="<f4").astype(np.float64).reshape(k, 3)
    (m,) = struct.unpack("<H", take(2))
    raw = np.frombuffer(take(32 * m), dtype="<f4").astype(np.float64).reshape(m, 8)
    if not (np.isfinite(center).all() and np.isfinite(points).all()
            and np.isfinite(raw).all()):
        raise CorruptRecord("non-finite values in record")
    labels = [RegionalGrasp(dt=row[:3], theta=row[3], gamma=row[4], beta=row[5],
                            width=row[6], score=row[7]) for row in raw]
    frame = RegionFrame(center=center)
    return RegionSample(frame=frame, points=points, labels=labels), offset


def write_dataset(samples: list[RegionSample], path) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", VERSION, len(samples)))
        for s in samples:
            f.write(encode_record(s))


def read_dataset(path) -> list[RegionSample]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise CorruptRecord(f"bad magic {data[:4]!r}")
    if len(data) < 10:
        raise CorruptRecord("truncated header")
    version, count = struct.unpack("<HI", data[4:10])
    if version != VERSION:
        raise CorruptRecord(f"unsupported version {version}")
    samples = []
    offset = 10
    for _ in range(count):
        sample, offset = decode_record(data, offset)
        samples.append(sample)
    if offset != len(data):
        raise CorruptRecord("trailing bytes after final record")
    return samples


# ---------------------------------------------------------------------------
# end-to-end generation


def _pixel_index(cloud: PointCloud, h: int, w: int) -> np.ndarray:
    """(h, w) map from pixel to cloud row, -1 where no point."""
    idx = np.full((h, w), -1, dtype=np.int64)
    idx[cloud.pixel_of[:, 1], cloud.pixel_of[:, 0]] = np.arange(len(cloud))
    return idx


def scene_region_samples(scene: Scene, labels: SceneLabels, config: DatagenConfig,
                         rng_seed) -> list[RegionSample]:
    """Heatmap -> grid centers -> region crops for one scene."""
    intr = scene.intrinsics
    cloud = scene.cloud()
    pixels = project_to_planar(labels, intr, min_score=config.min_label_score)
    heat = render_label_heatmap(pixels, intr.height, intr.width,
                                sigma_k=config.sigma_k, sigma_blur=config.sigma_blur)
    valid = scene.depth_mm > 0
    centers = sample_label_centers(heat, cell_px=config.cell_px,
                                   threshold=config.threshold,
                                   noise_frac=config.noise_frac,
                                   rng_seed=rng_seed, valid=valid)
    lookup = _pixel_index(cloud, intr.height, intr.width)
    samples = []
    for u, v in centers:
        row = lookup[v, u]
        if row < 0:
            continue
        frame = RegionFrame(center=cloud.points[row], source_pixel=(u, v))
        try:
            samples.append(make_region_sample(cloud, labels, frame,
                                              radius=config.region_radius,
                                              n_points=config.region_points))
        except EmptyRegion:
            continue
    return samples


def generate_dataset(config: DatagenConfig) -> tuple[list[RegionSample], DatasetStats]:
    """Synthesize scenes and emit all region samples, deterministically."""
    stats = DatasetStats()
    samples: list[RegionSample] = []
    for s in range(config.scene_count):
        scene, labels = synthesize_scene((config.seed, s), config.object_count,
                                         config.labels_per_object)
        scene_samples = scene_region_samples(scene, labels, config,
                                             rng_seed=(config.seed, s, 1))
        stats.scenes += 1
        stats.regions += len(scene_samples)
        stats.labeled_regions += sum(1 for r in scene_samples if r.labels)
        stats.labels += sum(len(r.labels) for r in scene_samples)
        samples.extend(scene_samples)
    return samples, stats
