"""Grasp decoding, non-maximum suppression, and heatmap splicing."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexlog.datagen import RegionSample
from flexlog.geometry import (
    ANGLE_LIMIT,
    Grasp,
    RegionFrame,
    RegionalGrasp,
    euler_to_rotation,
    rotation_angle_between,
)
from flexlog.model import (
    AnchorSet,
    ModelConfig,
    RegionPrediction,
    assign_targets,
    theta_bin_center,
)
from flexlog.postproc import (
    DEFAULT_NMS_ROTATION,
    DEFAULT_NMS_TRANSLATION,
    DecodedGrasp,
    MissingPixelProvenance,
    decode_region,
    grasp_nms,
    splice_heatmap,
)

CFG = ModelConfig()


def anchors7():
    grid = np.linspace(-1.2, 1.2, 7)
    return AnchorSet(beta_anchors=grid, gamma_anchors=grid.copy())


def one_hot_pred(theta_bin=3, beta_i=2, gamma_j=4, residual=0.0,
                 width_norm=0.6, offset=(0.0, 0.0, 0.0)):
    big = 50.0
    theta_logits = np.full(CFG.k_theta, -big)
    theta_logits[theta_bin] = big
    res = np.zeros(CFG.k_theta)
    res[theta_bin] = residual
    beta_logits = np.full(CFG.n_anchor, -big)
    beta_logits[beta_i] = big
    gamma_logits = np.full(CFG.n_anchor, -big)
    gamma_logits[gamma_j] = big
    width = np.zeros(CFG.n_combo)
    width[beta_i * CFG.n_anchor + gamma_j] = width_norm
    return RegionPrediction(theta_logits=theta_logits, theta_residual=res,
                            beta_logits=beta_logits, gamma_logits=gamma_logits,
                            width_raw=width, offset=np.array(offset))


def frame_at(center=(0.1, -0.05, 0.6), pixel=(30, 40)):
    return RegionFrame(center=center, source_pixel=pixel)


def grasp_at(x, score, theta=0.0):
    g = Grasp(t=[x, 0.0, 0.5], theta=theta, gamma=0.0, beta=0.0,
              width=0.05, score=score)
    return DecodedGrasp(grasp=g, region_index=0, combo=(0, 0, 0))


def nms_oracle(grasps, t_thresh, r_thresh):
    """Quadratic reference: greedy keep by (-score, input order)."""
    order = sorted(range(len(grasps)), key=lambda i: (-grasps[i].grasp.score, i))
    kept = []
    for i in order:
        gi = grasps[i].grasp
        ri = gi.rotation()
        ok = True
        for j in kept:
            gj = grasps[j].grasp
            if (np.linalg.norm(gi.t - gj.t) < t_thresh
                    and rotation_angle_between(ri, gj.rotation()) < r_thresh):
                ok = False
                break
        if ok:
            kept.append(i)
    return [grasps[i] for i in kept]


def random_grasps(rng, n):
    out = []
    for k in range(n):
        g = Grasp(t=rng.uniform(-0.1, 0.1, 3) + [0, 0, 0.6],
                  theta=rng.uniform(-1.5, 1.5), gamma=rng.uniform(-1.5, 1.5),
                  beta=rng.uniform(-1.5, 1.5), width=rng.uniform(0, 0.1),
                  score=float(rng.choice([0.25, 0.5, 0.75, 1.0])))
        out.append(DecodedGrasp(grasp=g, region_index=k, combo=(0, 0, 0)))
    return out


def test_decode_one_hot_angles_exact():
    anchors = anchors7()
    (d,) = decode_region(one_hot_pred(), frame_at(), anchors, CFG, top_k_per_region=1)
    assert d.grasp.theta == pytest.approx(theta_bin_center(3, 6))
    assert theta_bin_center(3, 6) == pytest.approx(math.radians(15))
    assert d.grasp.beta == float(anchors.beta_anchors[2])
    assert d.grasp.gamma == float(anchors.gamma_anchors[4])
    assert d.combo == (3, 2, 4)
    assert d.grasp.width == pytest.approx(0.6 * CFG.w_max)
    assert d.grasp.score == pytest.approx(1.0)


def test_decode_zero_offset_sits_at_frame_center():
    frame = frame_at()
    (d,) = decode_region(one_hot_pred(offset=(0, 0, 0)), frame, anchors7(), CFG, 1)
    np.testing.assert_array_equal(d.grasp.t, frame.center)
    (d2,) = decode_region(one_hot_pred(offset=(1.0, -0.5, 0.25)), frame,
                          anchors7(), CFG, 1)
    np.testing.assert_allclose(d2.grasp.t - frame.center, [0.02, -0.01, 0.005],
                               atol=1e-15)


def test_decode_residual_shifts_theta():
    (d,) = decode_region(one_hot_pred(theta_bin=3, residual=1 / 3),
                         frame_at(), anchors7(), CFG, 1)
    assert d.grasp.theta == pytest.approx(math.radians(20))


def test_decode_top_k_ordering():
    rng = np.random.default_rng(0)
    pred = RegionPrediction(theta_logits=rng.normal(size=6),
                            theta_residual=rng.uniform(-1, 1, 6),
                            beta_logits=rng.normal(size=7),
                            gamma_logits=rng.normal(size=7),
                            width_raw=rng.uniform(0, 1, 49),
                            offset=rng.uniform(-1, 1, 3))
    out = decode_region(pred, frame_at(), anchors7(), CFG, top_k_per_region=5)
    assert len(out) == 5
    scores = [d.grasp.score for d in out]
    assert scores == sorted(scores, reverse=True)
    for d in out:
        assert 0.0 <= d.grasp.score <= 1.0
        assert 0.0 <= d.grasp.width <= CFG.w_max
        for a in (d.grasp.theta, d.grasp.gamma, d.grasp.beta):
            assert -ANGLE_LIMIT <= a <= ANGLE_LIMIT


def test_decode_rejects_non_finite():
    pred = one_hot_pred()
    pred.offset = np.array([np.nan, 0.0, 0.0])
    with pytest.raises(ValueError):
        decode_region(pred, frame_at(), anchors7(), CFG, 1)


def test_nms_identical_pair():
    kept = grasp_nms([grasp_at(0.0, 0.9), grasp_at(0.0, 0.9)])
    assert len(kept) == 1
    assert kept[0].region_index == 0  # tie resolves to input order


def test_nms_distant_pair_survives():
    kept = grasp_nms([grasp_at(0.0, 0.9), grasp_at(0.10, 0.8)])
    assert len(kept) == 2


def test_nms_needs_both_conditions():
    near_rotated = [grasp_at(0.0, 0.9, theta=0.0), grasp_at(0.001, 0.8, theta=1.2)]
    assert len(grasp_nms(near_rotated)) == 2  # close centers, far rotations
    assert len(grasp_nms(near_rotated, r_thresh=2.8)) == 1


def test_nms_matches_oracle_on_random_sets():
    rng = np.random.default_rng(12)
    for _ in range(25):
        grasps = random_grasps(rng, int(rng.integers(1, 200)))
        got = grasp_nms(grasps)
        want = nms_oracle(grasps, DEFAULT_NMS_TRANSLATION, DEFAULT_NMS_ROTATION)
        assert [g.region_index for g in got] == [g.region_index for g in want]


@given(st.integers(0, 300))
@settings(deadline=None, max_examples=30)
def test_nms_permutation_insensitive(seed):
    rng = np.random.default_rng(seed)
    grasps = random_grasps(rng, 40)
    # distinct scores make greedy order permutation-independent
    for k, d in enumerate(grasps):
        object.__setattr__(d.grasp, "score", (k + 1) / 41)
    base = {id(g) for g in grasp_nms(grasps)}
    perm = [grasps[i] for i in rng.permutation(40)]
    assert {id(g) for g in grasp_nms(perm)} == base


def test_splice_single_region():
    heat = splice_heatmap([(frame_at(pixel=(10, 12)), 0.7)], 32, 32, cell_radius=0)
    assert heat[12, 10] == 0.7
    assert np.count_nonzero(heat) == 1


def test_splice_max_composition():
    frames = [(frame_at(pixel=(10, 12)), 0.4), (frame_at(pixel=(11, 12)), 0.9)]
    heat = splice_heatmap(frames, 32, 32, cell_radius=2)
    assert heat[12, 10] == 0.9  # overlap takes the max
    assert heat[12, 14] == 0.4 or heat[12, 14] == 0.0


def test_splice_painted_cells_grow_with_k():
    rng = np.random.default_rng(3)
    pix = rng.integers(4, 60, (64, 2))
    prev = 0
    for k in (4, 8, 16, 32, 64):
        frames = [(frame_at(pixel=(int(u), int(v))), 0.5) for u, v in pix[:k]]
        painted = int(np.count_nonzero(splice_heatmap(frames, 64, 64)))
        assert painted >= prev
        prev = painted


def test_splice_requires_provenance():
    with pytest.raises(MissingPixelProvenance):
        splice_heatmap([(RegionFrame(center=[0, 0, 0.5]), 0.5)], 16, 16)


def test_splice_clips_at_image_border():
    heat = splice_heatmap([(frame_at(pixel=(0, 0)), 1.0)], 16, 16, cell_radius=3)
    assert heat.shape == (16, 16)
    assert heat[0, 0] == 1.0
    assert np.count_nonzero(heat) == 16  # quarter of the 7x7 square fits


def test_assign_then_ideal_decode_recovers_label():
    cfg = ModelConfig()
    anchors = anchors7()
    rng = np.random.default_rng(8)
    for _ in range(25):
        lab = RegionalGrasp(dt=rng.uniform(-0.011, 0.011, 3),
                            theta=float(rng.uniform(-ANGLE_LIMIT, ANGLE_LIMIT)),
                            gamma=float(rng.uniform(-1.2, 1.2)),
                            beta=float(rng.uniform(-1.2, 1.2)),
                            width=float(rng.uniform(0.0, cfg.w_max)), score=0.9)
        sample = RegionSample(frame=frame_at(), points=np.zeros((4, 3)),
                              labels=[lab])
        t = assign_targets(sample, anchors, cfg)
        pred = one_hot_pred(theta_bin=t.theta_bin,
                            beta_i=int(np.argmax(t.beta_multi)),
                            gamma_j=int(np.argmax(t.gamma_multi)),
                            residual=t.theta_res,
                            width_norm=t.width_norm[np.argmax(t.beta_multi),
                                                    np.argmax(t.gamma_multi)],
                            offset=t.offset_norm)
        (d,) = decode_region(pred, sample.frame, anchors, cfg, 1)
        assert abs(d.grasp.theta - lab.theta) <= math.pi / (2 * cfg.k_theta) + 1e-9
        beta_gap = np.abs(anchors.beta_anchors - lab.beta).min()
        gamma_gap = np.abs(anchors.gamma_anchors - lab.gamma).min()
        assert abs(d.grasp.beta - lab.beta) <= beta_gap + 1e-12
        assert abs(d.grasp.gamma - lab.gamma) <= gamma_gap + 1e-12
        assert d.grasp.width == pytest.approx(lab.width, abs=1e-12)
        np.testing.assert_allclose(d.grasp.t - sample.frame.center, lab.dt,
                                   atol=1e-15)
