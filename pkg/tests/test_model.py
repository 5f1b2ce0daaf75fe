"""Encoder, heads, target assignment, loss, gradients, anchors, training."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexlog.datagen import RegionSample
from flexlog.geometry import ANGLE_LIMIT, RegionFrame, RegionalGrasp
from flexlog.guidance import EmptyRegion
from flexlog.model import (
    AnchorSet,
    CorruptCheckpoint,
    DegenerateLabels,
    LossBreakdown,
    ModelConfig,
    ParamLayout,
    RegionPrediction,
    TrainTargets,
    assign_targets,
    encoder_forward,
    forward,
    gradient,
    heads_forward,
    init_params,
    load_checkpoint,
    loss,
    refit_anchors,
    save_checkpoint,
    theta_bin_center,
    train,
)

TINY = ModelConfig.tiny()


def tiny_region(seed=42, k=16):
    rng = np.random.default_rng(seed)
    return rng.uniform(-0.05, 0.05, (k, 3))


def anchors7():
    grid = np.linspace(-1.2, 1.2, 7)
    return AnchorSet(beta_anchors=grid, gamma_anchors=grid.copy())


def make_sample(labels, seed=0):
    return RegionSample(frame=RegionFrame(center=[0, 0, 0.6]),
                        points=tiny_region(seed), labels=labels)


def label(theta=0.0, gamma=0.0, beta=0.0, width=0.05, score=0.9, dt=(0, 0, 0)):
    return RegionalGrasp(dt=np.array(dt, dtype=float), theta=theta, gamma=gamma,
                         beta=beta, width=width, score=score)


def overfit_set(n=64, seed=0):
    r = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        k = int(r.integers(12, 17))
        pts = r.uniform(-0.06, 0.06, (k, 3))
        pts = pts / np.maximum(1.0, np.linalg.norm(pts, axis=1, keepdims=True) / 0.08)
        labs = [label(theta=float(r.uniform(-1.5, 1.5)),
                      gamma=float(r.uniform(-1.2, 1.2)),
                      beta=float(r.uniform(-1.2, 1.2)),
                      width=float(r.uniform(0.02, 0.09)),
                      score=float(r.uniform(0.5, 1.0)),
                      dt=r.uniform(-0.011, 0.011, 3))
                for _ in range(int(r.integers(1, 4)))]
        out.append(RegionSample(frame=RegionFrame(center=[0, 0, 0.6]),
                                points=pts, labels=labs))
    return out


def finite_difference(params, batch, config, step=1e-5):
    from flexlog.model import loss as loss_fn, forward as fwd

    def batch_loss(p):
        tot = 0.0
        for pts, tgt in batch:
            tot += loss_fn(fwd(pts, p, config), tgt, config).total
        return tot / len(batch)

    fd = np.zeros_like(params)
    for i in range(len(params)):
        p = params.copy()
        p[i] += step
        hi = batch_loss(p)
        p[i] -= 2 * step
        lo = batch_loss(p)
        fd[i] = (hi - lo) / (2 * step)
    return fd


def test_init_params_deterministic_and_sized():
    a = init_params(ModelConfig(), rng_seed=3)
    b = init_params(ModelConfig(), rng_seed=3)
    c = init_params(ModelConfig(), rng_seed=4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert len(a) == ParamLayout(ModelConfig()).size == 71854
    assert ParamLayout(TINY).size == 2846


def test_encoder_permutation_invariance():
    pts = tiny_region()
    params = init_params(TINY, rng_seed=7)
    base = encoder_forward(pts, params, TINY)
    rng = np.random.default_rng(0)
    for _ in range(5):
        perm = rng.permutation(len(pts))
        feat = encoder_forward(pts[perm], params, TINY)
        assert np.linalg.norm(feat - base) <= 1e-12 * max(np.linalg.norm(base), 1.0)


def test_encoder_duplication_keeps_max_component():
    pts = tiny_region()
    params = init_params(TINY, rng_seed=7)
    base = encoder_forward(pts, params, TINY)
    dup = encoder_forward(np.concatenate([pts, pts]), params, TINY)
    e = TINY.embed_dim
    np.testing.assert_allclose(dup[:e], base[:e], atol=1e-12)


def test_encoder_golden_feature():
    feat = encoder_forward(tiny_region(), init_params(TINY, rng_seed=7), TINY)
    np.testing.assert_allclose(
        feat[:4],
        [1.1250951345340314, 0.523344390411196,
         1.0761668562222706, 1.9817636728079653],
        rtol=0, atol=1e-12)
    assert abs(float(np.linalg.norm(feat)) - 4.552930512542936) < 1e-12


def test_encoder_empty_region():
    with pytest.raises(EmptyRegion):
        encoder_forward(np.zeros((0, 3)), init_params(TINY), TINY)


def test_heads_output_shapes_at_defaults():
    cfg = ModelConfig()
    pred = heads_forward(np.zeros(cfg.feature_dim), init_params(cfg), cfg)
    assert pred.theta_logits.shape == (6,)
    assert pred.theta_residual.shape == (6,)
    assert pred.beta_logits.shape == (7,)
    assert pred.gamma_logits.shape == (7,)
    assert pred.width_raw.shape == (49,)
    assert pred.offset.shape == (3,)


def test_heads_zero_feature_passes_biases_through():
    """With a zero feature and zero hidden biases, each head whose input is
    all-zero emits exactly its final-layer bias. The beta/gamma head sees the
    theta softmax (never zero), so its conditioning is checked separately."""
    cfg = ModelConfig.tiny()
    params = init_params(cfg, rng_seed=1)
    views = ParamLayout(cfg).views(params)
    views["theta.b2"][...] = np.arange(2 * cfg.k_theta) * 0.1
    views["offset.b2"][...] = [0.3, -0.2, 0.5]
    pred = heads_forward(np.zeros(cfg.feature_dim), params, cfg)
    np.testing.assert_array_equal(pred.theta_logits, np.arange(cfg.k_theta) * 0.1)
    np.testing.assert_array_equal(pred.offset, [0.3, -0.2, 0.5])
    np.testing.assert_array_equal(pred.width_raw, np.zeros(cfg.n_combo))


def test_heads_width_conditions_orientation():
    cfg = ModelConfig.tiny()
    params = init_params(cfg, rng_seed=1)
    feat = np.random.default_rng(2).uniform(-1, 1, cfg.feature_dim)
    base = heads_forward(feat, params, cfg)
    views = ParamLayout(cfg).views(params)
    views["width.b2"][...] += 0.5
    bumped = heads_forward(feat, params, cfg)
    assert not np.array_equal(bumped.theta_logits, base.theta_logits)
    assert not np.array_equal(bumped.beta_logits, base.beta_logits)
    assert not np.array_equal(bumped.offset, base.offset)


def test_assign_targets_theta_bin_and_residual():
    t = assign_targets(make_sample([label(theta=math.radians(20))]),
                       anchors7(), ModelConfig())
    assert t.theta_bin == 3
    assert abs(t.theta_res - 1 / 3) < 1e-12
    assert t.valid


def test_assign_targets_anchor_one_hot():
    a = anchors7()
    t = assign_targets(make_sample([label(gamma=float(a.gamma_anchors[2]))]),
                       a, ModelConfig())
    np.testing.assert_array_equal(t.gamma_multi,
                                  [False, False, True, False, False, False, False])


def test_assign_targets_multi_label():
    a = anchors7()
    labs = [label(gamma=float(a.gamma_anchors[1]) + 0.01),
            label(gamma=float(a.gamma_anchors[5]) - 0.01, score=0.7)]
    t = assign_targets(make_sample(labs), a, ModelConfig())
    assert set(np.flatnonzero(t.gamma_multi)) == {1, 5}


def test_assign_targets_width_and_offset_norms():
    cfg = ModelConfig()
    lab = label(width=0.08, dt=(0.01, -0.02, 0.005))
    t = assign_targets(make_sample([lab]), anchors7(), cfg)
    np.testing.assert_allclose(t.offset_norm, [0.5, -1.0, 0.25], atol=1e-12)
    bi, gi = np.argmax(t.beta_multi), np.argmax(t.gamma_multi)
    assert t.width_norm[bi, gi] == pytest.approx(0.8)


def test_assign_targets_empty_labels_invalid():
    t = assign_targets(make_sample([]), anchors7(), ModelConfig())
    assert not t.valid


def perfect_prediction(targets: TrainTargets, cfg: ModelConfig) -> RegionPrediction:
    big = 40.0
    theta_logits = np.full(cfg.k_theta, -big)
    theta_logits[targets.theta_bin] = big
    residual = np.zeros(cfg.k_theta)
    residual[targets.theta_bin] = targets.theta_res
    return RegionPrediction(
        theta_logits=theta_logits, theta_residual=residual,
        beta_logits=np.where(targets.beta_multi, big, -big),
        gamma_logits=np.where(targets.gamma_multi, big, -big),
        width_raw=targets.width_norm.reshape(-1),
        offset=targets.offset_norm.copy())


def test_loss_zero_at_perfect_prediction():
    cfg = ModelConfig()
    t = assign_targets(make_sample([label(theta=0.4, width=0.06)]), anchors7(), cfg)
    bl = loss(perfect_prediction(t, cfg), t, cfg)
    assert bl.theta_reg == 0.0
    assert bl.width == 0.0
    assert bl.offset == 0.0
    assert bl.anchor < 1e-30  # sigmoid(+-40) saturates to within one ulp
    assert bl.theta_cls < 1e-12


def test_focal_exact_probabilities_cost_zero():
    from flexlog.model import focal_terms
    y = np.array([True, False, True, False])
    p = np.array([1.0, 0.0, 1.0, 0.0])
    np.testing.assert_array_equal(focal_terms(p, y), np.zeros(4))


def test_loss_uniform_theta_cross_entropy():
    cfg = ModelConfig()
    t = assign_targets(make_sample([label()]), anchors7(), cfg)
    pred = perfect_prediction(t, cfg)
    pred.theta_logits = np.zeros(cfg.k_theta)
    bl = loss(pred, t, cfg)
    assert abs(bl.theta_cls - math.log(6)) < 1e-12


def test_loss_bookkeeping_identity_and_invalid():
    cfg = ModelConfig(loss_a=1.3, loss_b=7.0, loss_c=2.0, loss_d=0.5)
    rng = np.random.default_rng(0)
    t = assign_targets(make_sample([label(theta=0.2, width=0.07)]), anchors7(), cfg)
    pred = RegionPrediction(theta_logits=rng.normal(size=6), theta_residual=rng.normal(size=6),
                            beta_logits=rng.normal(size=7), gamma_logits=rng.normal(size=7),
                            width_raw=rng.normal(size=49), offset=rng.normal(size=3))
    bl = loss(pred, t, cfg)
    assert bl.total == pytest.approx(bl.scaled_sum(cfg), abs=1e-12)
    assert min(bl.theta_cls, bl.theta_reg, bl.width, bl.offset, bl.anchor) >= 0.0
    empty = loss(pred, TrainTargets(valid=False), cfg)
    assert empty.total == 0.0


def test_gradient_matches_finite_differences():
    cfg = TINY
    rng = np.random.default_rng(11)
    params = init_params(cfg, rng_seed=11) + rng.normal(0, 0.02, ParamLayout(cfg).size)
    batch = []
    for i in range(2):
        s = make_sample([label(theta=0.3 * (i + 1), gamma=-0.4, beta=0.2,
                               width=0.05, dt=(0.004, -0.004, 0.002))], seed=i)
        batch.append((s.points, assign_targets(s, anchors7(), cfg)))
    g, _ = gradient(params, batch, cfg)
    fd = finite_difference(params, batch, cfg)
    denom = np.maximum(np.abs(fd), 1e-6)
    rel = np.abs(g - fd) / denom
    assert rel.max() < 1e-4


def test_gradient_zero_loss_weights():
    cfg = ModelConfig.tiny(loss_a=0.0, loss_b=0.0, loss_c=0.0, loss_d=0.0)
    s = make_sample([label(theta=0.3)])
    batch = [(s.points, assign_targets(s, anchors7(), cfg))]
    g, bl = gradient(init_params(cfg, 5), batch, cfg)
    assert not g.any()
    assert bl.total == 0.0


def test_gradient_duplicated_batch_mean_linearity():
    cfg = TINY
    params = init_params(cfg, rng_seed=2)
    s = make_sample([label(theta=-0.7, width=0.04)])
    item = (s.points, assign_targets(s, anchors7(), cfg))
    g1, _ = gradient(params, [item], cfg)
    g3, _ = gradient(params, [item, item, item], cfg)
    np.testing.assert_allclose(g3, g1, atol=1e-12)


def test_refit_anchors_uniform_quantiles():
    rng = np.random.default_rng(0)
    vals = rng.uniform(-ANGLE_LIMIT, ANGLE_LIMIT, 100_000)
    a = refit_anchors(vals, vals, n_anchor=7)
    q = np.quantile(vals, (np.arange(7) + 0.5) / 7)
    # Lloyd centers track the quantiles up to sampling noise: the quantile
    # estimator itself wobbles ~7e-3 at 1e5 draws, so 1e-2 is the honest bound.
    np.testing.assert_allclose(a.beta_anchors, q, atol=1e-2)


def test_refit_anchors_bimodal():
    rng = np.random.default_rng(1)
    sixty = math.radians(60)
    vals = np.concatenate([rng.normal(-sixty, 0.01, 5000),
                           rng.normal(sixty, 0.01, 5000)])
    a = refit_anchors(vals, vals, n_anchor=2)
    np.testing.assert_allclose(a.beta_anchors, [-sixty, sixty], atol=0.01)


def test_refit_anchors_single_is_mean():
    vals = np.array([0.1, 0.2, 0.6])
    a = refit_anchors(vals, vals, n_anchor=1)
    assert a.beta_anchors[0] == pytest.approx(vals.mean())


def test_refit_anchors_degenerate():
    with pytest.raises(DegenerateLabels):
        refit_anchors(np.full(10, 0.3), np.full(10, 0.3), n_anchor=3)


@given(st.integers(0, 200))
@settings(deadline=None)
def test_refit_anchors_separation_invariant(seed):
    rng = np.random.default_rng(seed)
    vals = rng.normal(0, 0.3, 500).clip(-ANGLE_LIMIT, ANGLE_LIMIT)
    if np.ptp(vals) == 0.0:
        return
    a = refit_anchors(vals, vals, n_anchor=5)
    for arr in (a.beta_anchors, a.gamma_anchors):
        assert (np.diff(arr) >= math.radians(2.0) - 1e-12).all()
        assert arr.min() >= -ANGLE_LIMIT and arr.max() <= ANGLE_LIMIT


def test_train_overfits_small_set():
    cfg = ModelConfig(n_points=16, embed_dim=16, stage_count=1, group_size=8,
                      batch_size=2, epochs=200, lr=3e-3)
    res = train(overfit_set(), cfg, rng_seed=0)
    hist = [h for h in res.history if "total" in h]
    assert hist[-1]["total"] <= 0.1 * hist[0]["total"]
    assert hist[-1]["theta_acc"] >= 0.95


def test_train_deterministic():
    cfg = ModelConfig.tiny(epochs=3)
    ds = overfit_set(n=12, seed=4)
    r1 = train(ds, cfg, rng_seed=1)
    r2 = train(ds, cfg, rng_seed=1)
    assert abs(r1.history[-1]["total"] - r2.history[-1]["total"]) < 1e-9
    np.testing.assert_array_equal(r1.params, r2.params)


def test_train_requires_labels():
    ds = [make_sample([])]
    with pytest.raises(ValueError):
        train(ds, ModelConfig.tiny())


def test_checkpoint_round_trip(tmp_path):
    cfg = ModelConfig.tiny()
    params = init_params(cfg, 9)
    anchors = anchors7()
    path = tmp_path / "m.flxp"
    save_checkpoint(path, params, anchors, cfg)
    p2, a2, c2 = load_checkpoint(path)
    np.testing.assert_array_equal(p2, params)
    np.testing.assert_array_equal(a2.beta_anchors, anchors.beta_anchors)
    np.testing.assert_array_equal(a2.gamma_anchors, anchors.gamma_anchors)
    assert c2 == cfg


def test_checkpoint_corruption(tmp_path):
    cfg = ModelConfig.tiny()
    path = tmp_path / "m.flxp"
    save_checkpoint(path, init_params(cfg, 0), anchors7(), cfg)
    blob = path.read_bytes()
    (tmp_path / "bad1.flxp").write_bytes(b"XXXX" + blob[4:])
    (tmp_path / "bad2.flxp").write_bytes(blob[:-9])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path / "bad1.flxp")
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path / "bad2.flxp")


def test_theta_bin_center_layout():
    assert theta_bin_center(0, 6) == pytest.approx(-ANGLE_LIMIT + math.pi / 12)
    assert theta_bin_center(5, 6) == pytest.approx(ANGLE_LIMIT - math.pi / 12)
