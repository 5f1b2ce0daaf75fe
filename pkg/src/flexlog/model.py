"""The local grasp model: a light PointMLP-style point encoder with
collision / orientation / offset heads, explicit analytic gradients, and a
small Adam training loop.

Everything runs on flat float64 parameter vectors with a named layout, so the
whole network is a pure function of (points, params) and its gradient can be
checked against central finite differences parameter-by-parameter. All
activations are tanh (smooth everywhere, so the finite-difference oracle is
meaningful); pooling is max/mean.

Encoder data flow, per stage: farthest-point-sampled centers over the current
point set, ball grouping capped at group_size (members ordered by distance
then lex rank), geometric-affine normalization of grouped features (per-group
scalar scale, learned per-channel alpha/beta), concatenation of relative
offsets, a shared lifted MLP + residual block per member, masked max-pool to
the center, and a residual block on the pooled vector. The final point
features are max- and mean-pooled globally and concatenated.

Input points are deduplicated (exact row matches) and lexicographically
sorted on entry: the feature is then exactly permutation- and
duplication-invariant rather than merely close.

Heads: the collision head maps the feature to one raw width per
(beta, gamma) anchor combination; the width vector conditions everything
downstream. The theta head consumes feature + widths and emits bin logits and
per-bin residuals; the beta/gamma head additionally sees softmax(theta); the
offset head consumes feature + widths.

Checkpoint layout (little-endian): magic "FLXP", version u16 = 1, config JSON
length u32 + bytes, parameter count u64, params f64, beta anchors then gamma
anchors (n_anchor f64 each).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .cloud import farthest_point_sample
from .datagen import RegionSample
from .geometry import ANGLE_LIMIT, RegionalGrasp
from .guidance import EmptyRegion

OFFSET_SCALE = 0.02  # m; offsets are regressed as fractions of the label radius
AFFINE_EPS = 1e-5
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
CHECKPOINT_MAGIC = b"FLXP"
CHECKPOINT_VERSION = 1


class NonFiniteLoss(RuntimeError):
    """Loss or gradient went NaN/Inf."""


class DegenerateLabels(ValueError):
    """Anchor fitting got a constant angle set."""


class CorruptCheckpoint(ValueError):
    """Checkpoint bytes fail validation."""


@dataclass
class ModelConfig:
    n_points: int = 512
    k_theta: int = 6
    n_anchor: int = 7
    embed_dim: int = 64
    stage_count: int = 2
    group_size: int = 32
    base_radius: float = 0.08  # grouping radius at the last stage; halves per stage up
    w_max: float = 0.10
    loss_a: float = 1.0
    loss_b: float = 10.0
    loss_c: float = 5.0
    loss_d: float = 1.0
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 30
    delta_min: float = math.radians(2.0)

    def __post_init__(self):
        if self.k_theta < 2 or self.n_anchor < 2:
            raise ValueError("k_theta and n_anchor must be >= 2")
        if self.embed_dim % (2 ** self.stage_count) != 0:
            raise ValueError("embed_dim must divide by 2**stage_count")
        if self.n_points < 1 or self.group_size < 2:
            raise ValueError("n_points and group_size must be positive")

    @property
    def n_combo(self) -> int:
        return self.n_anchor * self.n_anchor

    @property
    def feature_dim(self) -> int:
        return 2 * self.embed_dim

    @classmethod
    def small(cls, **kw) -> "ModelConfig":
        """Desk-scale training size: same heads, half-width encoder."""
        base = dict(embed_dim=32, epochs=10)
        base.update(kw)
        return cls(**base)

    @classmethod
    def tiny(cls, **kw) -> "ModelConfig":
        """Finite-difference-check size."""
        base = dict(n_points=16, embed_dim=8, stage_count=1, group_size=8,
                    batch_size=2, epochs=1)
        base.update(kw)
        return cls(**base)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, rec: dict) -> "ModelConfig":
        return cls(**rec)


@dataclass(eq=False)
class AnchorSet:
    """Sorted anchor angles for beta and gamma, minimum separation enforced."""

    beta_anchors: np.ndarray
    gamma_anchors: np.ndarray
    delta_min: float = math.radians(2.0)

    def __post_init__(self):
        self.beta_anchors = np.asarray(self.beta_anchors, dtype=np.float64).ravel()
        self.gamma_anchors = np.asarray(self.gamma_anchors, dtype=np.float64).ravel()
        for name, a in (("beta", self.beta_anchors), ("gamma", self.gamma_anchors)):
            if np.abs(a).max(initial=0.0) > ANGLE_LIMIT + 1e-12:
                raise ValueError(f"{name} anchors outside [-pi/2, pi/2]")
            if len(a) > 1 and np.diff(a).min() < self.delta_min - 1e-12:
                raise ValueError(f"{name} anchors closer than delta_min")


@dataclass(eq=False)
class RegionPrediction:
    theta_logits: np.ndarray    # (k_theta,)
    theta_residual: np.ndarray  # (k_theta,) in half-bin units
    beta_logits: np.ndarray     # (n_anchor,)
    gamma_logits: np.ndarray    # (n_anchor,)
    width_raw: np.ndarray       # (n_anchor**2,) normalized by w_max
    offset: np.ndarray          # (3,) in units of OFFSET_SCALE


@dataclass(eq=False)
class TrainTargets:
    theta_bin: int = 0
    theta_res: float = 0.0
    beta_multi: np.ndarray = None
    gamma_multi: np.ndarray = None
    width_norm: np.ndarray = None  # (n_anchor, n_anchor)
    width_mask: np.ndarray = None  # (n_anchor, n_anchor) bool
    offset_norm: np.ndarray = None  # (3,)
    valid: bool = False


@dataclass
class LossBreakdown:
    total: float = 0.0
    theta_cls: float = 0.0
    theta_reg: float = 0.0
    width: float = 0.0
    offset: float = 0.0
    anchor: float = 0.0

    def scaled_sum(self, config: ModelConfig) -> float:
        return (config.loss_a * (self.theta_cls + self.theta_reg)
                + config.loss_b * self.width + config.loss_c * self.offset
                + config.loss_d * self.anchor)


# ---------------------------------------------------------------------------
# parameter layout


class ParamLayout:
    """Ordered (name, shape) slices into one flat parameter vector."""

    def __init__(self, config: ModelConfig):
        c0 = config.embed_dim // (2 ** config.stage_count)
        entries: list[tuple[str, tuple[int, ...]]] = [
            ("stem.W", (c0, 3)), ("stem.b", (c0,))]
        c_in = c0
        for s in range(config.stage_count):
            c_out = c_in * 2
            entries += [
                (f"s{s}.alpha", (c_in,)), (f"s{s}.abeta", (c_in,)),
                (f"s{s}.lift.W", (c_out, c_in + 3)), (f"s{s}.lift.b", (c_out,)),
                (f"s{s}.pre.W1", (c_out, c_out)), (f"s{s}.pre.b1", (c_out,)),
                (f"s{s}.pre.W2", (c_out, c_out)), (f"s{s}.pre.b2", (c_out,)),
                (f"s{s}.post.W1", (c_out, c_out)), (f"s{s}.post.b1", (c_out,)),
                (f"s{s}.post.W2", (c_out, c_out)), (f"s{s}.post.b2", (c_out,)),
            ]
            c_in = c_out
        d = config.feature_dim
        h = config.embed_dim
        na, nc, kt = config.n_anchor, config.n_combo, config.k_theta
        entries += [
            ("width.W1", (h, d)), ("width.b1", (h,)),
            ("width.W2", (nc, h)), ("width.b2", (nc,)),
            ("theta.W1", (h, d + nc)), ("theta.b1", (h,)),
            ("theta.W2", (2 * kt, h)), ("theta.b2", (2 * kt,)),
            ("bg.W1", (h, d + nc + kt)), ("bg.b1", (h,)),
            ("bg.W2", (2 * na, h)), ("bg.b2", (2 * na,)),
            ("offset.W1", (h, d + nc)), ("offset.b1", (h,)),
            ("offset.W2", (3, h)), ("offset.b2", (3,)),
        ]
        self.entries = entries
        self.slices: dict[str, slice] = {}
        self.shapes: dict[str, tuple[int, ...]] = {}
        off = 0
        for name, shape in entries:
            n = int(np.prod(shape))
            self.slices[name] = slice(off, off + n)
            self.shapes[name] = shape
            off += n
        self.size = off

    def views(self, params: np.ndarray) -> dict[str, np.ndarray]:
        """Reshaped views sharing params' memory (writes propagate)."""
        return {name: params[self.slices[name]].reshape(self.shapes[name])
                for name, _ in self.entries}


def init_params(config: ModelConfig, rng_seed=0) -> np.ndarray:
    """Fan-in-scaled uniform weights, zero biases, identity affine."""
    layout = ParamLayout(config)
    rng = np.random.default_rng(rng_seed)
    params = np.zeros(layout.size)
    views = layout.views(params)
    for name, shape in layout.entries:
        if name.endswith(".W") or name.endswith("W1") or name.endswith("W2"):
            bound = math.sqrt(3.0 / shape[-1])
            views[name][...] = rng.uniform(-bound, bound, size=shape)
        elif name.endswith("alpha"):
            views[name][...] = 1.0
    return params


# ---------------------------------------------------------------------------
# encoder


def _stage_plan(config: ModelConfig, s: int, n_now: int) -> tuple[int, float]:
    m = max(1, config.n_points // (4 ** (s + 1)))
    m = min(m, n_now)
    radius = config.base_radius / (2 ** (config.stage_count - 1 - s))
    return m, radius


def _group_indices(positions: np.ndarray, center_idx: np.ndarray, radius: float,
                   group_size: int) -> tuple[np.ndarray, np.ndarray]:
    """(m, G) member indices and validity mask: nearest points inside the
    radius, ordered by (distance, lex rank); slack slots repeat the center.

    The candidate set is preselected with argpartition, so an exact distance
    tie straddling the cutoff resolves by partition order rather than lex
    rank. That is still deterministic for a fixed input, which is all the
    rest of the encoder relies on.
    """
    diff = positions[center_idx][:, None, :] - positions[None, :, :]
    d2 = np.einsum("mnc,mnc->mn", diff, diff)
    g = min(group_size, positions.shape[0])
    if g < positions.shape[0]:
        cand = np.argpartition(d2, g - 1, axis=1)[:, :g]
        cd2 = np.take_along_axis(d2, cand, axis=1)
        order = np.lexsort((cand, cd2), axis=1)
        take = np.take_along_axis(cand, order, axis=1)
        near2 = np.take_along_axis(cd2, order, axis=1)
    else:
        take = np.argsort(d2, axis=1, kind="stable")
        near2 = np.take_along_axis(d2, take, axis=1)
    dist_ok = near2 <= radius * radius + 1e-12
    idx = np.where(dist_ok, take, center_idx[:, None])
    return idx, dist_ok


def _encoder_forward(points: np.ndarray, views: dict, config: ModelConfig) -> tuple:
    """Returns (feature, cache) with every intermediate needed for backward."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyRegion("encoder got an empty region")
    pts = np.unique(pts, axis=0)  # canonical order: exact invariance

    pre = pts @ views["stem.W"].T + views["stem.b"]
    feats = np.tanh(pre)
    cache = {"pts": pts, "stem_out": feats, "stages": []}
    positions = pts
    for s in range(config.stage_count):
        m, radius = _stage_plan(config, s, len(positions))
        center_idx = farthest_point_sample(positions, m, seed_index=0)
        group_idx, mask = _group_indices(positions, center_idx, radius,
                                         config.group_size)
        fgrp = feats[group_idx]                      # (m, G, C)
        fctr = feats[center_idx]                     # (m, C)
        delta = np.where(mask[..., None], fgrp - fctr[:, None, :], 0.0)
        count = mask.sum(axis=1) * feats.shape[1]    # valid members x channels
        s2 = np.einsum("mgc,mgc->m", delta, delta) / count
        sigma = np.sqrt(s2 + AFFINE_EPS)
        alpha, abeta = views[f"s{s}.alpha"], views[f"s{s}.abeta"]
        normed = alpha * delta / sigma[:, None, None] + abeta
        dpos = (positions[group_idx] - positions[center_idx][:, None, :]) / radius
        dpos = np.where(mask[..., None], dpos, 0.0)
        x = np.concatenate([normed, dpos], axis=2)   # (m, G, C+3)

        z_pre = x @ views[f"s{s}.lift.W"].T + views[f"s{s}.lift.b"]
        z = np.tanh(z_pre)
        h1 = np.tanh(z @ views[f"s{s}.pre.W1"].T + views[f"s{s}.pre.b1"])
        u = z + h1 @ views[f"s{s}.pre.W2"].T + views[f"s{s}.pre.b2"]

        masked_u = np.where(mask[..., None], u, -np.inf)
        arg = np.argmax(masked_u, axis=1)            # (m, C_out)
        pooled = np.take_along_axis(u, arg[:, None, :], axis=1)[:, 0, :]

        h2 = np.tanh(pooled @ views[f"s{s}.post.W1"].T + views[f"s{s}.post.b1"])
        v = pooled + h2 @ views[f"s{s}.post.W2"].T + views[f"s{s}.post.b2"]

        cache["stages"].append({
            "center_idx": center_idx, "group_idx": group_idx, "mask": mask,
            "delta": delta, "sigma": sigma, "count": count, "x": x, "z": z,
            "h1": h1, "u": u, "arg": arg, "pooled": pooled, "h2": h2,
            "feats_in": feats, "radius": radius, "dpos": dpos,
        })
        feats = v
        positions = positions[center_idx]

    gmax_arg = np.argmax(feats, axis=0)              # (C,)
    gmax = feats[gmax_arg, np.arange(feats.shape[1])]
    gmean = feats.mean(axis=0)
    feature = np.concatenate([gmax, gmean])
    cache["final_feats"] = feats
    cache["gmax_arg"] = gmax_arg
    return feature, cache


def _encoder_backward(dfeature: np.ndarray, cache: dict, views: dict,
                      grads: dict, config: ModelConfig) -> None:
    feats = cache["final_feats"]
    n, c = feats.shape
    dmax = dfeature[:c]
    dmean = dfeature[c:]
    dfeats = np.tile(dmean / n, (n, 1))
    dfeats[cache["gmax_arg"], np.arange(c)] += dmax

    for s in reversed(range(config.stage_count)):
        st = cache["stages"][s]
        alpha = views[f"s{s}.alpha"]
        # post residual block
        dv = dfeats
        grads[f"s{s}.post.b2"] += dv.sum(axis=0)
        grads[f"s{s}.post.W2"] += dv.T @ st["h2"]
        dh2 = (dv @ views[f"s{s}.post.W2"]) * (1 - st["h2"] ** 2)
        grads[f"s{s}.post.b1"] += dh2.sum(axis=0)
        grads[f"s{s}.post.W1"] += dh2.T @ st["pooled"]
        dpooled = dv + dh2 @ views[f"s{s}.post.W1"]
        # max-pool: route to argmax members
        du = np.zeros_like(st["u"])
        m_idx = np.arange(dpooled.shape[0])[:, None]
        c_idx = np.arange(dpooled.shape[1])[None, :]
        du[m_idx, st["arg"], c_idx] = dpooled
        # pre residual block (per member)
        grads[f"s{s}.pre.b2"] += du.sum(axis=(0, 1))
        grads[f"s{s}.pre.W2"] += np.einsum("mgo,mgh->oh", du, st["h1"])
        dh1 = np.einsum("mgo,oh->mgh", du, views[f"s{s}.pre.W2"]) * (1 - st["h1"] ** 2)
        grads[f"s{s}.pre.b1"] += dh1.sum(axis=(0, 1))
        grads[f"s{s}.pre.W1"] += np.einsum("mgo,mgh->oh", dh1, st["z"])
        dz = du + np.einsum("mgo,oh->mgh", dh1, views[f"s{s}.pre.W1"])
        dz_pre = dz * (1 - st["z"] ** 2)
        grads[f"s{s}.lift.b"] += dz_pre.sum(axis=(0, 1))
        grads[f"s{s}.lift.W"] += np.einsum("mgo,mgi->oi", dz_pre, st["x"])
        dx = np.einsum("mgo,oi->mgi", dz_pre, views[f"s{s}.lift.W"])
        c_in = st["delta"].shape[2]
        dnormed = dx[:, :, :c_in]
        dnormed = np.where(st["mask"][..., None], dnormed, 0.0)
        # geometric affine: normed = alpha*delta/sigma + abeta, sigma per group
        grads[f"s{s}.abeta"] += dnormed.sum(axis=(0, 1))
        grads[f"s{s}.alpha"] += np.einsum(
            "mgc,mgc->c", dnormed, st["delta"] / st["sigma"][:, None, None])
        t_scalar = np.einsum("mgc,c,mgc->m", dnormed, alpha, st["delta"])
        ddelta = (alpha * dnormed / st["sigma"][:, None, None]
                  - st["delta"] * (t_scalar / (st["sigma"] ** 3 * st["count"]))[:, None, None])
        ddelta = np.where(st["mask"][..., None], ddelta, 0.0)
        # delta = fgrp - fctr
        dprev = np.zeros_like(st["feats_in"])
        np.add.at(dprev, st["group_idx"].ravel(),
                  ddelta.reshape(-1, ddelta.shape[2]))
        np.add.at(dprev, st["center_idx"], -ddelta.sum(axis=1))
        dfeats = dprev

    dstem = dfeats * (1 - cache["stem_out"] ** 2)
    grads["stem.b"] += dstem.sum(axis=0)
    grads["stem.W"] += dstem.T @ cache["pts"]


def encoder_forward(points: np.ndarray, params: np.ndarray,
                    config: ModelConfig) -> np.ndarray:
    layout = ParamLayout(config)
    feature, _ = _encoder_forward(points, layout.views(params), config)
    return feature


# ---------------------------------------------------------------------------
# heads


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def _mlp2_forward(x, views, prefix):
    h = np.tanh(views[f"{prefix}.W1"] @ x + views[f"{prefix}.b1"])
    y = views[f"{prefix}.W2"] @ h + views[f"{prefix}.b2"]
    return y, h


def _mlp2_backward(dy, x, h, views, grads, prefix):
    grads[f"{prefix}.b2"] += dy
    grads[f"{prefix}.W2"] += np.outer(dy, h)
    dh = (views[f"{prefix}.W2"].T @ dy) * (1 - h ** 2)
    grads[f"{prefix}.b1"] += dh
    grads[f"{prefix}.W1"] += np.outer(dh, x)
    return views[f"{prefix}.W1"].T @ dh


def _heads_forward(feature: np.ndarray, views: dict, config: ModelConfig) -> tuple:
    kt = config.k_theta
    width_raw, h_w = _mlp2_forward(feature, views, "width")
    x_t = np.concatenate([feature, width_raw])
    t_out, h_t = _mlp2_forward(x_t, views, "theta")
    theta_logits, theta_residual = t_out[:kt], t_out[kt:]
    p_theta = _softmax(theta_logits)
    x_bg = np.concatenate([feature, width_raw, p_theta])
    bg_out, h_bg = _mlp2_forward(x_bg, views, "bg")
    beta_logits, gamma_logits = bg_out[:config.n_anchor], bg_out[config.n_anchor:]
    x_o = np.concatenate([feature, width_raw])
    offset, h_o = _mlp2_forward(x_o, views, "offset")
    pred = RegionPrediction(theta_logits=theta_logits, theta_residual=theta_residual,
                            beta_logits=beta_logits, gamma_logits=gamma_logits,
                            width_raw=width_raw, offset=offset)
    cache = {"feature": feature, "width_raw": width_raw, "h_w": h_w,
             "x_t": x_t, "h_t": h_t, "p_theta": p_theta,
             "x_bg": x_bg, "h_bg": h_bg, "x_o": x_o, "h_o": h_o}
    return pred, cache


def _heads_backward(dpred: dict, cache: dict, views: dict, grads: dict,
                    config: ModelConfig) -> np.ndarray:
    """dpred holds gradients on the six prediction arrays; returns dfeature."""
    d = config.feature_dim
    nc = config.n_combo
    kt = config.k_theta
    dfeature = np.zeros(d)
    dwidth = dpred["width_raw"].copy()
    dtheta_logits = dpred["theta_logits"].copy()

    # offset head
    dx_o = _mlp2_backward(dpred["offset"], cache["x_o"], cache["h_o"], views,
                          grads, "offset")
    dfeature += dx_o[:d]
    dwidth += dx_o[d:]

    # beta/gamma head, chaining through softmax(theta)
    dbg = np.concatenate([dpred["beta_logits"], dpred["gamma_logits"]])
    dx_bg = _mlp2_backward(dbg, cache["x_bg"], cache["h_bg"], views, grads, "bg")
    dfeature += dx_bg[:d]
    dwidth += dx_bg[d:d + nc]
    dp = dx_bg[d + nc:]
    p = cache["p_theta"]
    dtheta_logits += p * (dp - float(dp @ p))

    # theta head
    dt_out = np.concatenate([dtheta_logits, dpred["theta_residual"]])
    dx_t = _mlp2_backward(dt_out, cache["x_t"], cache["h_t"], views, grads, "theta")
    dfeature += dx_t[:d]
    dwidth += dx_t[d:]

    # width head last: collects every conditioning path
    dfeature += _mlp2_backward(dwidth, cache["feature"], cache["h_w"], views,
                               grads, "width")
    return dfeature


def heads_forward(feature: np.ndarray, params: np.ndarray,
                  config: ModelConfig) -> RegionPrediction:
    layout = ParamLayout(config)
    pred, _ = _heads_forward(np.asarray(feature, dtype=np.float64),
                             layout.views(params), config)
    return pred


def forward(points: np.ndarray, params: np.ndarray,
            config: ModelConfig) -> RegionPrediction:
    layout = ParamLayout(config)
    views = layout.views(params)
    feature, _ = _encoder_forward(points, views, config)
    pred, _ = _heads_forward(feature, views, config)
    return pred


# ---------------------------------------------------------------------------
# targets and loss


def theta_bin_center(bin_index: int, k_theta: int) -> float:
    return -ANGLE_LIMIT + (bin_index + 0.5) * math.pi / k_theta


def assign_targets(sample: RegionSample, anchors: AnchorSet,
                   config: ModelConfig) -> TrainTargets:
    """Primary (highest-score) label supervises theta/offset; every label
    marks its nearest beta and gamma anchors and stakes a width at that
    combination (first come by descending score)."""
    na = config.n_anchor
    t = TrainTargets(beta_multi=np.zeros(na, dtype=bool),
                     gamma_multi=np.zeros(na, dtype=bool),
                     width_norm=np.zeros((na, na)),
                     width_mask=np.zeros((na, na), dtype=bool),
                     offset_norm=np.zeros(3), valid=False)
    if not sample.labels:
        return t
    order = sorted(range(len(sample.labels)),
                   key=lambda i: (-sample.labels[i].score, i))
    primary = sample.labels[order[0]]

    kt = config.k_theta
    bin_width = math.pi / kt
    raw_bin = int(math.floor((primary.theta + ANGLE_LIMIT) / bin_width))
    t.theta_bin = min(max(raw_bin, 0), kt - 1)
    t.theta_res = (primary.theta - theta_bin_center(t.theta_bin, kt)) / (bin_width / 2)
    t.offset_norm = primary.dt / OFFSET_SCALE
    for i in order:
        g: RegionalGrasp = sample.labels[i]
        bi = int(np.argmin(np.abs(anchors.beta_anchors - g.beta)))
        gi = int(np.argmin(np.abs(anchors.gamma_anchors - g.gamma)))
        t.beta_multi[bi] = True
        t.gamma_multi[gi] = True
        if not t.width_mask[bi, gi]:
            t.width_mask[bi, gi] = True
            t.width_norm[bi, gi] = min(max(g.width / config.w_max, 0.0), 1.0)
    t.valid = True
    return t


def _smooth_l1(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def _smooth_l1_grad(x: np.ndarray) -> np.ndarray:
    return np.clip(x, -1.0, 1.0)


def focal_terms(p: np.ndarray, y: np.ndarray,
                alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> np.ndarray:
    """Elementwise focal loss on probabilities against binary targets;
    p exactly equal to the target contributes exactly zero (0 * log 1)."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=bool)
    with np.errstate(divide="ignore"):
        pos = -alpha * (1 - p) ** gamma * np.log(p)
        neg = -(1 - alpha) * p ** gamma * np.log1p(-p)
    return np.where(y, pos, neg)


def _focal_grad_wrt_logit(x: np.ndarray, y: np.ndarray,
                          alpha: float = FOCAL_ALPHA,
                          gamma: float = FOCAL_GAMMA) -> np.ndarray:
    # (dL/dp) * p(1-p), algebraically folded so saturated sigmoids stay finite:
    #   y=1: alpha (1-p)^g (g p log p - (1-p));  y=0: (1-a) p^g (p - g (1-p) log(1-p))
    p = 1.0 / (1.0 + np.exp(-x))
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
        qlogq = np.where(p < 1, (1 - p) * np.log1p(np.where(p < 1, -p, 0.0)), 0.0)
    pos = alpha * (1 - p) ** gamma * (gamma * plogp - (1 - p))
    neg = (1 - alpha) * p ** gamma * (p - gamma * qlogq)
    return np.where(y, pos, neg)


def loss(pred: RegionPrediction, targets: TrainTargets,
         config: ModelConfig) -> LossBreakdown:
    """L = a(L_theta_cls + L_theta_reg) + b L_w + c L_off + d L_anchor.

    Conventions: theta residual supervised at the target bin only; width
    averaged over positive combinations; offset averaged over 3 components;
    focal term summed over both anchor vectors. Invalid targets zero out
    every term.
    """
    out = LossBreakdown()
    if not targets.valid:
        return out
    p = _softmax(pred.theta_logits)
    out.theta_cls = float(-np.log(p[targets.theta_bin]))
    out.theta_reg = float(_smooth_l1(
        np.array(pred.theta_residual[targets.theta_bin] - targets.theta_res)))
    na = config.n_anchor
    wgrid = pred.width_raw.reshape(na, na)
    if targets.width_mask.any():
        diffs = wgrid[targets.width_mask] - targets.width_norm[targets.width_mask]
        out.width = float(np.mean(_smooth_l1(diffs)))
    out.offset = float(np.mean(_smooth_l1(pred.offset - targets.offset_norm)))
    pb = 1.0 / (1.0 + np.exp(-pred.beta_logits))
    pg = 1.0 / (1.0 + np.exp(-pred.gamma_logits))
    out.anchor = float(focal_terms(pb, targets.beta_multi).sum()
                       + focal_terms(pg, targets.gamma_multi).sum())
    out.total = out.scaled_sum(config)
    return out


def _loss_backward(pred: RegionPrediction, targets: TrainTargets,
                   config: ModelConfig) -> dict:
    """Gradients of the weighted total loss with respect to each prediction."""
    kt, na = config.k_theta, config.n_anchor
    d = {
        "theta_logits": np.zeros(kt), "theta_residual": np.zeros(kt),
        "beta_logits": np.zeros(na), "gamma_logits": np.zeros(na),
        "width_raw": np.zeros(config.n_combo), "offset": np.zeros(3),
    }
    if not targets.valid:
        return d
    a, b, c, dd = config.loss_a, config.loss_b, config.loss_c, config.loss_d
    p = _softmax(pred.theta_logits)
    one_hot = np.zeros(kt)
    one_hot[targets.theta_bin] = 1.0
    d["theta_logits"] = a * (p - one_hot)
    d["theta_residual"][targets.theta_bin] = a * float(
        _smooth_l1_grad(np.array(pred.theta_residual[targets.theta_bin]
                                 - targets.theta_res)))
    if targets.width_mask.any():
        n_pos = int(targets.width_mask.sum())
        wgrid = pred.width_raw.reshape(na, na)
        gw = np.zeros((na, na))
        gw[targets.width_mask] = b * _smooth_l1_grad(
            wgrid[targets.width_mask] - targets.width_norm[targets.width_mask]) / n_pos
        d["width_raw"] = gw.ravel()
    d["offset"] = c * _smooth_l1_grad(pred.offset - targets.offset_norm) / 3.0
    d["beta_logits"] = dd * _focal_grad_wrt_logit(pred.beta_logits, targets.beta_multi)
    d["gamma_logits"] = dd * _focal_grad_wrt_logit(pred.gamma_logits, targets.gamma_multi)
    return d


def gradient(params: np.ndarray, batch: list[tuple[np.ndarray, TrainTargets]],
             config: ModelConfig) -> tuple[np.ndarray, LossBreakdown]:
    """Analytic gradient of the mean batch loss; matches central differences."""
    if not batch:
        raise ValueError("empty batch")
    layout = ParamLayout(config)
    views = layout.views(params)
    gvec = np.zeros(layout.size)
    grads = layout.views(gvec)
    mean = LossBreakdown()
    for points, targets in batch:
        feature, enc_cache = _encoder_forward(points, views, config)
        pred, head_cache = _heads_forward(feature, views, config)
        term = loss(pred, targets, config)
        for name in ("total", "theta_cls", "theta_reg", "width", "offset", "anchor"):
            setattr(mean, name, getattr(mean, name) + getattr(term, name))
        dpred = _loss_backward(pred, targets, config)
        dfeature = _heads_backward(dpred, head_cache, views, grads, config)
        _encoder_backward(dfeature, enc_cache, views, grads, config)
    gvec /= len(batch)
    for name in ("total", "theta_cls", "theta_reg", "width", "offset", "anchor"):
        setattr(mean, name, getattr(mean, name) / len(batch))
    if not (np.isfinite(gvec).all() and math.isfinite(mean.total)):
        raise NonFiniteLoss("non-finite loss or gradient")
    return gvec, mean


# ---------------------------------------------------------------------------
# anchors


def _fit_anchors_1d(values: np.ndarray, n: int, delta_min: float,
                    init: np.ndarray | None = None) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64).ravel()
    if len(values) == 0 or np.ptp(values) == 0.0:
        raise DegenerateLabels("cannot fit anchors to a constant angle set")
    if n == 1:
        return np.array([float(values.mean())])
    if init is None:
        q = (np.arange(n) + 0.5) / n
        anchors = np.quantile(values, q)
    else:
        anchors = np.sort(np.asarray(init, dtype=np.float64).ravel())
    for _ in range(1000):
        assign = np.argmin(np.abs(values[:, None] - anchors[None, :]), axis=1)
        new = anchors.copy()
        for i in range(n):
            sel = values[assign == i]
            if len(sel):
                new[i] = sel.mean()
        move = np.abs(new - anchors).max()
        anchors = new
        if move < 1e-4:
            break
    anchors = np.sort(anchors)
    # enforce separation: push up, then slide back inside the angle range
    for i in range(1, n):
        if anchors[i] - anchors[i - 1] < delta_min:
            anchors[i] = anchors[i - 1] + delta_min
    if anchors[-1] > ANGLE_LIMIT:
        anchors -= anchors[-1] - ANGLE_LIMIT
    anchors = np.clip(anchors, -ANGLE_LIMIT, ANGLE_LIMIT)
    return anchors


def refit_anchors(betas, gammas, n_anchor: int,
                  delta_min: float = math.radians(2.0),
                  init: AnchorSet | None = None) -> AnchorSet:
    """Quantile init (or the previous anchors), 1-D Lloyd to a fixed point,
    then minimum-separation respacing."""
    return AnchorSet(
        beta_anchors=_fit_anchors_1d(betas, n_anchor, delta_min,
                                     None if init is None else init.beta_anchors),
        gamma_anchors=_fit_anchors_1d(gammas, n_anchor, delta_min,
                                      None if init is None else init.gamma_anchors),
        delta_min=delta_min,
    )


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    params: np.ndarray
    anchors: AnchorSet
    history: list[dict] = field(default_factory=list)


def train(dataset: list[RegionSample], config: ModelConfig,
          rng_seed=0) -> TrainResult:
    """Adam with bias correction and cosine-decayed steps; anchors refit each
    epoch and targets reassigned against them. Unlabeled regions carry no
    gradient, so only labeled ones are batched."""
    labeled = [s for s in dataset if s.labels]
    if not labeled:
        raise ValueError("dataset has no labeled regions")
    betas = [g.beta for s in labeled for g in s.labels]
    gammas = [g.gamma for s in labeled for g in s.labels]
    anchors = refit_anchors(betas, gammas, config.n_anchor, config.delta_min)

    params = init_params(config, rng_seed)
    rng = np.random.default_rng(np.random.SeedSequence((0xF1E, rng_seed)))
    m = np.zeros_like(params)
    v = np.zeros_like(params)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    steps_per_epoch = max(1, math.ceil(len(labeled) / config.batch_size))
    total_steps = config.epochs * steps_per_epoch
    history: list[dict] = []
    step = 0
    for epoch in range(config.epochs):
        if epoch > 0:
            anchors = refit_anchors(betas, gammas, config.n_anchor,
                                    config.delta_min, init=anchors)
        targets = [assign_targets(s, anchors, config) for s in labeled]
        order = rng.permutation(len(labeled))
        sums = LossBreakdown()
        hits = 0
        last_good = params.copy()
        try:
            for lo in range(0, len(order), config.batch_size):
                sel = order[lo:lo + config.batch_size]
                batch = [(labeled[i].points, targets[i]) for i in sel]
                gvec, bl = gradient(params, batch, config)
                for name in ("total", "theta_cls", "theta_reg", "width",
                             "offset", "anchor"):
                    setattr(sums, name,
                            getattr(sums, name) + getattr(bl, name) * len(sel))
                lr = config.lr * 0.5 * (1 + math.cos(math.pi * step / total_steps))
                step += 1
                m = beta1 * m + (1 - beta1) * gvec
                v = beta2 * v + (1 - beta2) * gvec * gvec
                mh = m / (1 - beta1 ** step)
                vh = v / (1 - beta2 ** step)
                params = params - lr * mh / (np.sqrt(vh) + eps)
        except NonFiniteLoss:
            history.append({"epoch": epoch, "aborted": True})
            return TrainResult(params=last_good, anchors=anchors, history=history)
        layout = ParamLayout(config)
        views = layout.views(params)
        for i in order:
            feature, _ = _encoder_forward(labeled[i].points, views, config)
            pred, _ = _heads_forward(feature, views, config)
            if int(np.argmax(pred.theta_logits)) == targets[i].theta_bin:
                hits += 1
        rec = {"epoch": epoch, "theta_acc": hits / len(labeled),
               "lr": config.lr * 0.5 * (1 + math.cos(math.pi * step / total_steps))}
        for name in ("total", "theta_cls", "theta_reg", "width", "offset", "anchor"):
            rec[name] = getattr(sums, name) / len(labeled)
        history.append(rec)
    return TrainResult(params=params, anchors=anchors, history=history)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: np.ndarray, anchors: AnchorSet,
                    config: ModelConfig) -> None:
    blob = json.dumps(config.to_json()).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<H", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<Q", len(params)))
        f.write(np.asarray(params, dtype="<f8").tobytes())
        f.write(np.asarray(anchors.beta_anchors, dtype="<f8").tobytes())
        f.write(np.asarray(anchors.gamma_anchors, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[np.ndarray, AnchorSet, ModelConfig]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint(f"bad magic {data[:4]!r}")
    try:
        (version,) = struct.unpack_from("<H", data, 4)
        if version != CHECKPOINT_VERSION:
            raise CorruptCheckpoint(f"unsupported version {version}")
        (blob_len,) = struct.unpack_from("<I", data, 6)
        config = ModelConfig.from_json(json.loads(data[10:10 + blob_len].decode()))
        off = 10 + blob_len
        (count,) = struct.unpack_from("<Q", data, off)
        off += 8
        params = np.frombuffer(data, dtype="<f8", count=count, offset=off).copy()
        off += 8 * count
        na = config.n_anchor
        beta = np.frombuffer(data, dtype="<f8", count=na, offset=off).copy()
        gamma = np.frombuffer(data, dtype="<f8", count=na, offset=off + 8 * na).copy()
    except (struct.error, ValueError, json.JSONDecodeError) as e:
        raise CorruptCheckpoint(str(e)) from e
    if ParamLayout(config).size != count:
        raise CorruptCheckpoint("parameter count does not match config layout")
    if not np.isfinite(params).all():
        raise CorruptCheckpoint("non-finite parameters")
    anchors = AnchorSet(beta_anchors=beta, gamma_anchors=gamma,
                        delta_min=config.delta_min)
    return params, anchors, config
