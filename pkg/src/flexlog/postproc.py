"""Decode head outputs into world-frame grasps, deduplicate, and build heatmaps.

Decoding picks the best yaw bin (center plus predicted residual), then crosses
every approach/rotation anchor pair into a candidate grasp whose score is the
product of the three classification confidences. Non-maximum suppression is
greedy by score: a candidate is dropped when a kept grasp is both closer than
the translation threshold and within the geodesic rotation threshold. Region
scores splice back into image space by painting each region's best score over
a small square at its source pixel, composing overlaps with max.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import ANGLE_LIMIT, Grasp, RegionFrame, euler_to_rotation
from .model import OFFSET_SCALE, AnchorSet, ModelConfig, RegionPrediction

DEFAULT_NMS_TRANSLATION = 0.03  # m
DEFAULT_NMS_ROTATION = math.radians(30.0)


class MissingPixelProvenance(ValueError):
    """A region frame lacks the source pixel needed to paint it into an image."""


@dataclass(eq=False)
class DecodedGrasp:
    """One decoded candidate: the grasp, its region, and the chosen bins."""

    grasp: Grasp
    region_index: int
    combo: tuple[int, int, int]  # (theta bin, beta anchor, gamma anchor)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def decode_region(pred: RegionPrediction, frame: RegionFrame, anchors: AnchorSet,
                  config: ModelConfig, top_k_per_region: int,
                  region_index: int = 0) -> list[DecodedGrasp]:
    """Cross the best yaw against every anchor pair and keep the top scorers.

    Yaw is the argmax bin's center plus its residual (half-bin units), clamped
    to the representable range. Width comes from the anchor-pair slot of the
    width grid, scaled by w_max and clamped. Position is the region center
    plus the offset head scaled to meters. Output is sorted by descending
    score; ties resolve by flat combo index.
    """
    if top_k_per_region < 1:
        raise ValueError("top_k_per_region must be >= 1")
    fields = (pred.theta_logits, pred.theta_residual, pred.beta_logits,
              pred.gamma_logits, pred.width_raw, pred.offset)
    if not all(np.isfinite(f).all() for f in fields):
        raise ValueError("prediction contains non-finite values")

    k = config.k_theta
    theta_probs = np.exp(pred.theta_logits - pred.theta_logits.max())
    theta_probs /= theta_probs.sum()
    bin_idx = int(np.argmax(pred.theta_logits))
    bin_center = -ANGLE_LIMIT + (bin_idx + 0.5) * math.pi / k
    theta = bin_center + float(pred.theta_residual[bin_idx]) * math.pi / (2 * k)
    theta = min(max(theta, -ANGLE_LIMIT), ANGLE_LIMIT)

    na = config.n_anchor
    p_beta = _sigmoid(pred.beta_logits)
    p_gamma = _sigmoid(pred.gamma_logits)
    scores = theta_probs[bin_idx] * p_beta[:, None] * p_gamma[None, :]
    widths = np.clip(pred.width_raw.reshape(na, na) * config.w_max,
                     0.0, config.w_max)
    position = frame.center + pred.offset * OFFSET_SCALE

    flat = scores.ravel()
    order = sorted(range(na * na), key=lambda q: (-flat[q], q))
    out = []
    for q in order[:top_k_per_region]:
        i, j = divmod(q, na)
        out.append(DecodedGrasp(
            grasp=Grasp(t=position, theta=theta,
                        gamma=float(anchors.gamma_anchors[j]),
                        beta=float(anchors.beta_anchors[i]),
                        width=float(widths[i, j]), score=float(flat[q]),
                        max_width=config.w_max),
            region_index=region_index,
            combo=(bin_idx, i, j)))
    return out


def rotation_geodesic(r1: np.ndarray, r2: np.ndarray) -> float:
    """Angle of the relative rotation r1^T r2, in radians."""
    cosang = (float(np.sum(r1 * r2)) - 1.0) / 2.0
    return math.acos(min(1.0, max(-1.0, cosang)))


def grasp_nms(grasps: list[DecodedGrasp],
              t_thresh: float = DEFAULT_NMS_TRANSLATION,
              r_thresh: float = DEFAULT_NMS_ROTATION) -> list[DecodedGrasp]:
    """Greedy suppression by descending score; ties keep input order.

    A candidate is suppressed when some already-kept grasp lies closer than
    t_thresh in translation AND closer than r_thresh in geodesic rotation.
    """
    if t_thresh <= 0 or r_thresh <= 0:
        raise ValueError("NMS thresholds must be positive")
    if not grasps:
        return []
    order = sorted(range(len(grasps)), key=lambda i: (-grasps[i].grasp.score, i))
    centers = np.array([g.grasp.t for g in grasps])
    rots = np.array([g.grasp.rotation() for g in grasps])
    cos_keep = math.cos(min(r_thresh, math.pi))  # angle < r  <=>  cos > cos(r)
    all_rotations_close = r_thresh > math.pi  # geodesic never exceeds pi
    kept: list[int] = []
    for i in order:
        if kept:
            d2 = np.einsum("kc,kc->k", centers[kept] - centers[i],
                           centers[kept] - centers[i])
            close = d2 < t_thresh * t_thresh
            if not all_rotations_close:
                costr = (np.einsum("kab,ab->k", rots[kept], rots[i]) - 1.0) / 2.0
                close &= np.clip(costr, -1.0, 1.0) > cos_keep
            if bool(np.any(close)):
                continue
        kept.append(i)
    return [grasps[i] for i in kept]


def splice_heatmap(regions: list[tuple[RegionFrame, float]], height: int,
                   width: int, cell_radius: int = 2) -> np.ndarray:
    """Paint each region's best score at its source pixel, max on overlap.

    Each region paints a (2*cell_radius+1)-square centered on its source
    pixel, clipped to the image; unpainted pixels stay 0.
    """
    if height < 1 or width < 1:
        raise ValueError("image must have positive dimensions")
    if cell_radius < 0:
        raise ValueError("cell_radius must be >= 0")
    out = np.zeros((height, width), dtype=np.float64)
    for frame, score in regions:
        if frame.source_pixel is None:
            raise MissingPixelProvenance(
                f"region at {frame.center} has no source pixel")
        u, v = frame.source_pixel
        s = min(max(float(score), 0.0), 1.0)
        u0, u1 = max(u - cell_radius, 0), min(u + cell_radius + 1, width)
        v0, v1 = max(v - cell_radius, 0), min(v + cell_radius + 1, height)
        if u0 < u1 and v0 < v1:
            np.maximum(out[v0:v1, u0:u1], s, out=out[v0:v1, u0:u1])
    return out
