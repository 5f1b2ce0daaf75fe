"""Force-closure grasp scoring and the AP / target-oriented AP protocols.

Contact search closes the gripper along the grasp's closing axis over
analytically sampled object surfaces: each finger sweeps a small slab and the
first surface point it would touch becomes the contact. Closure is the
two-finger antipodal criterion; the AP protocols rank detections, pad missing
ranks as failures, and average Precision@k over ranks and friction grades.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Grasp, euler_to_rotation
from .primitives import SceneObject, sample_surface

DEFAULT_GRADES = (0.2, 0.4, 0.6, 0.8, 1.0, 1.2)
SCENE_TOP_K = 50
TARGET_TOP_K = 10
TARGET_DISTANCE = 0.01  # m; a grasp center this close to the target counts as "on" it
FINGER_DEPTH = 0.02     # slab extent along the approach axis
FINGER_THICKNESS = 0.01  # slab extent along the lateral axis
SURFACE_POINTS_PER_OBJECT = 2000


class NoContact(ValueError):
    """Closing the gripper touches nothing, or the two fingers touch different objects."""


class UnknownTarget(KeyError):
    """Requested target object is not present in the scene."""


@dataclass(eq=False)
class EvalObject:
    """Sampled surface of one scene object: points with outward unit normals."""

    object_id: int
    points: np.ndarray   # (n, 3) camera frame
    normals: np.ndarray  # (n, 3) unit

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        norms = np.linalg.norm(self.normals, axis=1)
        if len(norms) and np.abs(norms - 1.0).max() > 1e-9:
            raise ValueError("normals must be unit length")


@dataclass
class FrictionGrades:
    grades: tuple[float, ...] = DEFAULT_GRADES

    def __post_init__(self):
        g = tuple(float(v) for v in self.grades)
        if any(v <= 0 for v in g) or any(b <= a for a, b in zip(g, g[1:])):
            raise ValueError("grades must be positive and strictly ascending")
        self.grades = g


@dataclass(eq=False)
class ContactPair:
    p1: np.ndarray
    p2: np.ndarray
    n1: np.ndarray
    n2: np.ndarray
    object_id: int


def build_eval_objects(objects: list[SceneObject], points_per_object: int = SURFACE_POINTS_PER_OBJECT,
                       seed: int = 0) -> list[EvalObject]:
    """Sample each primitive's closed-form surface; deterministic per seed."""
    out = []
    for i, obj in enumerate(objects):
        rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
        pts, nrm = sample_surface(obj, points_per_object, rng)
        out.append(EvalObject(object_id=i, points=pts, normals=nrm))
    return out


def find_contacts(grasp: Grasp, objects: list[EvalObject]) -> ContactPair:
    """Close the gripper and return the first surface point touched per side.

    Candidate points lie in a finger-swept slab around each finger: within
    FINGER_DEPTH along the approach axis and FINGER_THICKNESS laterally,
    between the finger and the grasp center along the closing axis. Per side
    the contact minimizes closing travel; both must be on the same object.
    """
    rot = euler_to_rotation(grasp.theta, grasp.gamma, grasp.beta)
    half_w = grasp.width / 2 + 1e-9
    best = {+1: None, -1: None}  # side -> (travel, object_id, point_idx)
    for obj in objects:
        q = (obj.points - grasp.t) @ rot  # gripper frame
        in_slab = (np.abs(q[:, 1]) <= FINGER_THICKNESS / 2) & (np.abs(q[:, 2]) <= FINGER_DEPTH / 2)
        for side in (+1, -1):
            x = side * q[:, 0]
            cand = np.flatnonzero(in_slab & (x >= 0) & (x <= half_w))
            if len(cand) == 0:
                continue
            j = cand[int(np.argmax(x[cand]))]
            travel = half_w - x[j]
            if best[side] is None or travel < best[side][0]:
                best[side] = (travel, obj.object_id, int(j))
    if best[+1] is None or best[-1] is None:
        raise NoContact("a finger slab is empty")
    if best[+1][1] != best[-1][1]:
        raise NoContact("fingers land on different objects")
    obj = next(o for o in objects if o.object_id == best[+1][1])
    i1, i2 = best[+1][2], best[-1][2]
    return ContactPair(
        p1=obj.points[i1], p2=obj.points[i2],
        n1=obj.normals[i1], n2=obj.normals[i2],
        object_id=obj.object_id,
    )


def force_closure(contacts: ContactPair, mu: float) -> bool:
    """Two-finger antipodal criterion: both contact normals lie inside the
    friction cone of the contact-connecting line at coefficient mu."""
    axis = contacts.p2 - contacts.p1
    sep = np.linalg.norm(axis)
    if sep < 1e-9:
        return False
    axis = axis / sep
    cone = math.atan(mu)
    for n in (contacts.n1, contacts.n2):
        cos = min(1.0, abs(float(np.dot(n, axis))))
        if math.acos(cos) > cone + 1e-12:
            return False
    return True


@dataclass
class APReport:
    ap: float
    per_grade: dict[float, float]
    success_matrix: np.ndarray = field(repr=False, default=None)  # (grades, ranks) bool

    def to_json(self) -> dict:
        return {"ap": self.ap, "per_grade": {f"{g:g}": v for g, v in self.per_grade.items()}}


def _precision_at_k_mean(success: np.ndarray, k_max: int) -> float:
    """Mean of Precision@k for k = 1..k_max, missing ranks padded as failures."""
    hits = np.zeros(k_max)
    n = min(len(success), k_max)
    hits[:n] = success[:n]
    cum = np.cumsum(hits)
    ranks = np.arange(1, k_max + 1)
    return float(np.mean(cum / ranks))


def average_precision(detections: list[Grasp], objects: list[EvalObject],
                      k_max: int = SCENE_TOP_K,
                      grades: FrictionGrades | None = None,
                      require_object: int | None = None) -> APReport:
    """AP over the top-k_max detections (already NMS'd, sorted by score
    descending): per grade, success(i) = force closure at that grade, with
    NoContact counting as failure; AP is the grade-mean of Precision@k means.
    """
    grades = grades if grades is not None else FrictionGrades()
    ranked = detections[:k_max]
    contacts: list[ContactPair | None] = []
    for g in ranked:
        try:
            c = find_contacts(g, objects)
        except NoContact:
            c = None
        if c is not None and require_object is not None and c.object_id != require_object:
            c = None
        contacts.append(c)
    success = np.zeros((len(grades.grades), len(ranked)), dtype=bool)
    for gi, mu in enumerate(grades.grades):
        success[gi] = [c is not None and force_closure(c, mu) for c in contacts]
    per_grade = {mu: _precision_at_k_mean(success[gi], k_max)
                 for gi, mu in enumerate(grades.grades)}
    ap = float(np.mean(list(per_grade.values()))) if per_grade else 0.0
    return APReport(ap=ap, per_grade=per_grade, success_matrix=success)


def target_oriented_ap(detections: list[Grasp], objects: list[EvalObject], target_id: int,
                       k_max: int = TARGET_TOP_K, tau_target: float = TARGET_DISTANCE,
                       grades: FrictionGrades | None = None) -> APReport:
    """AP restricted to the target: keep detections whose center is within
    tau_target of the target surface, then score with contacts required on
    the target object."""
    target = next((o for o in objects if o.object_id == target_id), None)
    if target is None:
        raise UnknownTarget(f"no object with id {target_id}")
    kept = []
    for g in detections:
        d = np.linalg.norm(target.points - g.t, axis=1).min()
        if d <= tau_target:
            kept.append(g)
    return average_precision(kept, objects, k_max=k_max, grades=grades,
                             require_object=target_id)
