"""Grasp representations and frame transforms.

Coordinate conventions (fixed here, imported everywhere else):
  camera frame : x right, y down, z forward (positive depth).
  region frame : axes parallel to the camera frame, origin translated to the
                 region center. Cropping never rotates.
  gripper pose : R = Rz(theta) @ Ry(beta) @ Rx(gamma).
                 theta is the in-plane rotation (about the view axis) and is
                 the first-predicted angle; gamma spins the gripper about its
                 own closing axis.
  closing axis : first column of R. For beta = 0 it is (cos t, sin t, 0),
                 i.e. a pure image-plane rotation.
  approach axis: third column of R (points roughly along +z for small angles).

All angles are radians in [-pi/2, pi/2]; widths and positions are meters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ANGLE_LIMIT = math.pi / 2
DEFAULT_MAX_WIDTH = 0.10
LABEL_RADIUS = 0.02  # grasp labels live within this distance of a region center


class GimbalDegenerate(ValueError):
    """Rotation has |beta| at the pi/2 singularity; euler angles are not unique."""


def _check_angle(name: str, value: float) -> float:
    value = float(value)
    if not math.isfinite(value) or abs(value) > ANGLE_LIMIT + 1e-9:
        raise ValueError(f"{name}={value!r} outside [-pi/2, pi/2]")
    return value


@dataclass(eq=False)
class Grasp:
    """A camera-frame parallel-jaw grasp: position, euler angles, width, score."""

    t: np.ndarray
    theta: float
    gamma: float
    beta: float
    width: float
    score: float = 0.0
    max_width: float = DEFAULT_MAX_WIDTH

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.theta = _check_angle("theta", self.theta)
        self.gamma = _check_angle("gamma", self.gamma)
        self.beta = _check_angle("beta", self.beta)
        self.width = float(self.width)
        self.score = float(self.score)
        if not 0.0 <= self.width <= self.max_width + 1e-9:
            raise ValueError(f"width={self.width!r} outside [0, {self.max_width}]")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score={self.score!r} outside [0, 1]")

    def rotation(self) -> np.ndarray:
        return euler_to_rotation(self.theta, self.gamma, self.beta)

    def to_json(self) -> dict:
        return {
            "t": [float(v) for v in self.t],
            "euler": [self.theta, self.gamma, self.beta],
            "width": self.width,
            "score": self.score,
        }

    @classmethod
    def from_json(cls, rec: dict, max_width: float = DEFAULT_MAX_WIDTH) -> "Grasp":
        theta, gamma, beta = (float(a) for a in rec["euler"])
        return cls(
            t=np.asarray(rec["t"], dtype=np.float64),
            theta=theta,
            gamma=gamma,
            beta=beta,
            width=float(rec["width"]),
            score=float(rec.get("score", 0.0)),
            max_width=max_width,
        )


@dataclass(eq=False)
class RegionalGrasp:
    """A grasp expressed relative to its region center (dt = grasp t - center)."""

    dt: np.ndarray
    theta: float
    gamma: float
    beta: float
    width: float
    score: float = 0.0

    def __post_init__(self):
        self.dt = np.asarray(self.dt, dtype=np.float64).reshape(3)
        self.theta = _check_angle("theta", self.theta)
        self.gamma = _check_angle("gamma", self.gamma)
        self.beta = _check_angle("beta", self.beta)
        self.width = float(self.width)
        self.score = float(self.score)


@dataclass(eq=False)
class RegionFrame:
    """A region center in the camera frame, optionally traceable to a pixel."""

    center: np.ndarray
    source_pixel: tuple[int, int] | None = field(default=None)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        if not self.center[2] > 0:
            raise ValueError(f"region center must have positive depth, got z={self.center[2]!r}")
        if self.source_pixel is not None:
            u, v = self.source_pixel
            self.source_pixel = (int(u), int(v))


def euler_to_rotation(theta: float, gamma: float, beta: float) -> np.ndarray:
    """Rotation matrix Rz(theta) @ Ry(beta) @ Rx(gamma). Total function."""
    ct, st = math.cos(theta), math.sin(theta)
    cb, sb = math.cos(beta), math.sin(beta)
    cg, sg = math.cos(gamma), math.sin(gamma)
    return np.array(
        [
            [ct * cb, -st * cg + ct * sb * sg, st * sg + ct * sb * cg],
            [st * cb, ct * cg + st * sb * sg, -ct * sg + st * sb * cg],
            [-sb, cb * sg, cb * cg],
        ]
    )


def rotation_to_euler(rotation: np.ndarray, atol: float = 1e-9) -> tuple[float, float, float]:
    """Invert euler_to_rotation. Returns (theta, gamma, beta).

    Raises GimbalDegenerate when |beta| is within tolerance of pi/2, where
    theta and gamma are no longer separable.
    """
    rotation = np.asarray(rotation, dtype=np.float64)
    sb = -float(rotation[2, 0])
    if abs(sb) >= 1.0 - atol:
        raise GimbalDegenerate(f"|beta| at pi/2 within {atol}: sin(beta)={sb}")
    beta = math.asin(sb)
    theta = math.atan2(rotation[1, 0], rotation[0, 0])
    gamma = math.atan2(rotation[2, 1], rotation[2, 2])
    return theta, gamma, beta


def closing_axis(theta: float, beta: float) -> np.ndarray:
    """Direction the fingers close along: first column of the grasp rotation."""
    return np.array(
        [math.cos(theta) * math.cos(beta), math.sin(theta) * math.cos(beta), -math.sin(beta)]
    )


def axis_to_angles(axis: np.ndarray) -> tuple[float, float]:
    """(theta, beta) whose closing axis is +-axis, with theta in [-pi/2, pi/2].

    The closing axis has no preferred sign, so the axis is flipped when needed
    to keep theta representable.
    """
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    if a[0] < 0 or (a[0] == 0 and a[1] < 0):
        a = -a
    beta = -math.asin(max(-1.0, min(1.0, a[2])))
    theta = math.atan2(a[1], a[0])
    theta = max(-ANGLE_LIMIT, min(ANGLE_LIMIT, theta))
    return theta, beta


def to_local_frame(points: np.ndarray, frame: RegionFrame) -> np.ndarray:
    """Translate camera-frame points into the region frame (axes unchanged)."""
    return np.asarray(points, dtype=np.float64).reshape(-1, 3) - frame.center


def to_camera_frame(points: np.ndarray, frame: RegionFrame) -> np.ndarray:
    """Inverse of to_local_frame."""
    return np.asarray(points, dtype=np.float64).reshape(-1, 3) + frame.center


def compose_final_grasp(gp: RegionalGrasp, frame: RegionFrame, score: float | None = None,
                        max_width: float = DEFAULT_MAX_WIDTH) -> Grasp:
    """Lift a regional grasp into the camera frame: t = center + dt."""
    return Grasp(
        t=frame.center + gp.dt,
        theta=gp.theta,
        gamma=gp.gamma,
        beta=gp.beta,
        width=gp.width,
        score=gp.score if score is None else score,
        max_width=max_width,
    )


def rotation_angle_between(r1: np.ndarray, r2: np.ndarray) -> float:
    """Geodesic angle of r1^T r2 in [0, pi]."""
    cos = (np.trace(r1.T @ r2) - 1.0) / 2.0
    return math.acos(max(-1.0, min(1.0, cos)))
