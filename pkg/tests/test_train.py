import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from actloc import data, geometry, train
from actloc.detection import generate_anchors
from oracles import max_rel_error, random_boxes, scalar_iou


# --- target assignment --------------------------------------------------------

def brute_rpn_labels(anchors, gt):
    """Anchor labels from an explicit IoU table, before sampling."""
    table = [[scalar_iou(a, g) for g in gt] for a in anchors]
    labels = []
    for row in table:
        best = max(row)
        labels.append(1 if best >= 0.7 else 0 if best <= 0.3 else -1)
    for j in range(len(gt)):
        col = [table[i][j] for i in range(len(anchors))]
        i = max(range(len(anchors)), key=lambda k: (col[k], -k))
        if col[i] > 0:
            labels[i] = 1
    return labels


def test_rpn_gt_equal_to_anchor_is_positive_with_zero_delta():
    anchors = generate_anchors((4, 4), [0.25, 0.5], [1.0])
    t = train.assign_rpn_targets(anchors, anchors[[5]])
    assert t.labels[5] == train.POSITIVE
    np.testing.assert_array_equal(t.deltas[5], 0.0)


def test_rpn_empty_gt_has_no_positives():
    anchors = generate_anchors((4, 4), [0.25], [1.0])
    t = train.assign_rpn_targets(anchors, np.zeros((0, 4)), np.random.default_rng(0))
    assert not (t.labels == train.POSITIVE).any()
    assert (t.labels == train.NEGATIVE).sum() == 16


def test_rpn_labels_match_iou_table_oracle_1000_instances():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        anchors = random_boxes(rng, int(rng.integers(1, 12)), 0.05)
        gt = random_boxes(rng, int(rng.integers(1, 4)), 0.05)
        labels, _ = train.label_anchors(anchors, gt)
        assert list(labels) == brute_rpn_labels(anchors, gt)


def test_rpn_sampling_caps_and_subsets():
    rng = np.random.default_rng(1)
    anchors = generate_anchors((8, 8), [0.1, 0.25, 0.5], [0.5, 1.0, 2.0])
    gt = random_boxes(rng, 3, 0.2)
    full, _ = train.label_anchors(anchors, gt)
    t = train.assign_rpn_targets(anchors, gt, rng, max_pos=4, max_neg=10)
    assert (t.labels == 1).sum() == min(4, (full == 1).sum())
    assert (t.labels == 0).sum() == 10
    kept = t.labels != train.IGNORE
    np.testing.assert_array_equal(t.labels[kept], full[kept])


def test_detection_target_identity_multi_hot():
    gt = np.array([[0.1, 0.1, 0.5, 0.5]])
    t = train.assign_detection_targets(gt, gt, [frozenset({1, 3})], 4)
    np.testing.assert_array_equal(t.classes, [[0, 1, 0, 1]])
    assert t.matched[0] == 0
    np.testing.assert_array_equal(t.deltas, 0.0)


def test_detection_target_background():
    t = train.assign_detection_targets([[0.6, 0.6, 0.9, 0.9]], [[0.0, 0.0, 0.3, 0.3]],
                                       [frozenset({0})], 4)
    assert not t.classes.any() and t.matched[0] == -1 and not t.deltas.any()


def test_detection_targets_match_oracle_1000_instances():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        props = random_boxes(rng, int(rng.integers(1, 8)), 0.05)
        gt = random_boxes(rng, int(rng.integers(1, 4)), 0.05)
        labels = [frozenset(int(c) for c in rng.choice(4, size=int(rng.integers(1, 3)),
                                                       replace=False)) for _ in gt]
        t = train.assign_detection_targets(props, gt, labels, 4)
        for i, p in enumerate(props):
            ious = [scalar_iou(p, g) for g in gt]
            j = max(range(len(gt)), key=lambda k: (ious[k], -k))
            if ious[j] >= 0.5:
                assert t.matched[i] == j
                assert set(np.flatnonzero(t.classes[i])) == labels[j]
            else:
                assert t.matched[i] == -1 and not t.classes[i].any()


def test_flipped_assignment_is_mirrored():
    rng = np.random.default_rng(3)
    anchors = generate_anchors((6, 6), [0.2, 0.4], [1.0])  # closed under mirroring
    perm = [int(np.argmin(np.abs(anchors - f).sum(1))) for f in geometry.flip_horizontal(anchors)]
    for _ in range(50):
        gt = random_boxes(rng, 3, 0.1)
        table = geometry.iou_matrix(anchors, gt)
        mirrored = geometry.iou_matrix(anchors, geometry.flip_horizontal(gt))[perm]
        np.testing.assert_allclose(mirrored, table, atol=1e-12)
        # argmax matches agree wherever the best gt is not a near-tie
        top2 = np.sort(table, axis=1)[:, -2:]
        clear = top2[:, 1] - top2[:, 0] > 1e-9
        np.testing.assert_array_equal(mirrored.argmax(1)[clear], table.argmax(1)[clear])
        # threshold labels agree away from the thresholds
        labels, _ = train.label_anchors(anchors, gt)
        f_labels, _ = train.label_anchors(anchors, geometry.flip_horizontal(gt))
        best = table.max(1)
        # per-gt best anchors are forced positive; tied bests may resolve differently
        near_best = (table >= table.max(0) - 1e-9) | (mirrored >= mirrored.max(0) - 1e-9)
        forced = set(np.flatnonzero(near_best.any(1)))
        ok = [i for i in range(len(anchors)) if i not in forced
              and min(abs(best[i] - 0.3), abs(best[i] - 0.7)) > 1e-9]
        np.testing.assert_array_equal(f_labels[perm][ok], labels[ok])


# --- losses -------------------------------------------------------------------

def test_bce_half_probability_is_ln2():
    value, _ = train.bce_with_logits(np.zeros((3, 4)), np.zeros((3, 4)))
    assert value == pytest.approx(math.log(2), abs=1e-12)


def test_perfect_predictions_have_tiny_loss():
    targets = train.DetectionTargets(
        classes=np.array([[1.0, 0.0], [0.0, 0.0]]),
        matched=np.array([0, -1]),
        deltas=np.array([[0.1, -0.2, 0.3, 0.0], [0.0, 0.0, 0.0, 0.0]]),
    )
    big = math.log((1 - 1e-7) / 1e-7)
    logits = np.where(targets.classes > 0, big, -big)
    cls, reg, _, _ = train.detection_loss(logits, targets.deltas.copy(), targets)
    assert cls + reg < 1e-5


def test_bce_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((5, 3))
    y = (rng.uniform(size=(5, 3)) > 0.5).astype(float)
    w = (rng.uniform(size=(5, 3)) > 0.3).astype(float)
    _, g = train.bce_with_logits(x, y, w)
    num = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        d = np.zeros_like(x)
        d[i] = 1e-5
        num[i] = (train.bce_with_logits(x + d, y, w)[0] - train.bce_with_logits(x - d, y, w)[0]) / 2e-5
    assert max_rel_error(g, num) <= 1e-4


def test_bce_clamped_probabilities_stay_finite():
    value, grad = train.bce_with_logits(np.array([80.0, -80.0]), np.array([0.0, 1.0]))
    assert np.isfinite(value) and value == pytest.approx(-math.log(1e-7), rel=1e-6)
    assert not grad.any()


def test_smooth_l1_branches():
    v, g = train.smooth_l1(np.array([0.5, 2.0, -3.0]), np.zeros(3))
    np.testing.assert_allclose(v, [0.125, 1.5, 2.5])
    np.testing.assert_allclose(g, [0.5, 1.0, -1.0])


def test_regression_loss_averages_over_matched_rows():
    pred = np.array([[0.5, 0, 0, 0], [9.0, 9, 9, 9], [0, 0.5, 0, 0]])
    value, grad = train.regression_loss(pred, np.zeros((3, 4)), np.array([True, False, True]))
    assert value == pytest.approx(0.125)
    assert not grad[1].any()


def test_per_class_regression_uses_positive_class_deltas():
    targets = train.DetectionTargets(np.array([[0.0, 1.0, 1.0]]), np.array([0]),
                                     np.array([[0.2, 0.0, 0.0, 0.0]]))
    deltas = np.zeros((1, 12))
    deltas[0, 0] = 5.0   # class 0 is not a label: ignored
    _, reg, _, g = train.detection_loss(np.zeros((1, 3)), deltas, targets, class_agnostic=False)
    assert reg == pytest.approx(0.5 * 0.04)
    assert g[0, 0] == 0.0 and g[0, 4] == pytest.approx(-0.1) and g[0, 8] == pytest.approx(-0.1)


def test_loss_invariant_under_proposal_permutation():
    rng = np.random.default_rng(5)
    logits = rng.standard_normal((6, 4))
    deltas = rng.standard_normal((6, 4))
    targets = train.DetectionTargets((rng.uniform(size=(6, 4)) > 0.5).astype(float),
                                     np.array([0, -1, 1, -1, 0, 2]), rng.standard_normal((6, 4)))
    perm = rng.permutation(6)
    permuted = train.DetectionTargets(targets.classes[perm], targets.matched[perm],
                                      targets.deltas[perm])
    a = train.detection_loss(logits, deltas, targets)
    b = train.detection_loss(logits[perm], deltas[perm], permuted)
    assert a[0] == pytest.approx(b[0], abs=1e-12) and a[1] == pytest.approx(b[1], abs=1e-12)
    assert a[0] >= 0 and a[1] >= 0


# --- optimisation -------------------------------------------------------------

def test_cosine_endpoints_exact():
    assert train.cosine_lr(0, 0.01, 100) == 0.01
    assert train.cosine_lr(100, 0.01, 100) == 0.0
    assert train.cosine_lr(50, 0.01, 100) == pytest.approx(0.005, abs=1e-15)


@given(st.integers(1, 10_000), st.floats(1e-5, 1.0))
def test_cosine_monotone(total, base):
    lrs = [train.cosine_lr(s, base, total) for s in range(0, total + 1, max(1, total // 50))]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_sgd_momentum_cases():
    g = np.array([1.0, -2.0])
    p = {"w": np.array([0.5, 0.5])}
    v = {}
    train.sgd_momentum_step(p, {"w": np.zeros(2)}, v, 0.1, 0.9)
    np.testing.assert_array_equal(p["w"], [0.5, 0.5])
    train.sgd_momentum_step(p, {"w": g}, v, 0.0, 0.9)
    np.testing.assert_array_equal(p["w"], [0.5, 0.5])
    np.testing.assert_array_equal(v["w"], g)
    p, v = {"w": np.zeros(2)}, {}
    for _ in range(2):
        train.sgd_momentum_step(p, {"w": g}, v, 0.1, 0.9)
    np.testing.assert_allclose(p["w"], -0.29 * g, rtol=1e-12)


def test_sgd_rejects_non_finite_gradient():
    p = {"w": np.ones(2)}
    with pytest.raises(FloatingPointError, match="w"):
        train.sgd_momentum_step(p, {"w": np.array([np.nan, 0.0])}, {}, 0.1, 0.9)
    np.testing.assert_array_equal(p["w"], 1.0)


# --- full model ---------------------------------------------------------------

def test_total_loss_gradient_matches_finite_differences(tiny_cfg):
    samples = data.generate_synthetic(tiny_cfg.synth, "train")[:2]
    model = train.build_model(tiny_cfg)
    calib = train.calibrate_batchnorm
    calib(model, np.stack([s.pixels for s in samples]), np.concatenate([s.boxes for s in samples]),
          np.concatenate([np.full(len(s.boxes), i) for i, s in enumerate(samples)]))
    proposals = [random_boxes(np.random.default_rng(i), 6, 0.2) for i in range(2)]
    tcfg = tiny_cfg.train

    def total():
        return train.forward_backward(model, samples, np.random.default_rng(9), tcfg,
                                      proposals)["total"]

    total()
    grads = {k: v.copy() for k, v in model.named_grads()}
    rng = np.random.default_rng(10)
    for name, value in model.named_parameters():
        # a handful of coordinates per tensor keeps this fast
        flat = value.reshape(-1)
        for i in rng.choice(flat.size, size=min(flat.size, 6), replace=False):
            old = flat[i]
            flat[i] = old + 1e-5
            up = total()
            flat[i] = old - 1e-5
            down = total()
            flat[i] = old
            num = (up - down) / 2e-5
            assert max_rel_error(grads[name].reshape(-1)[i], num, floor=1e-6) <= 1e-4, name


def test_training_is_deterministic(tiny_cfg):
    samples = data.generate_synthetic(tiny_cfg.synth, "train")
    _, log_a = train.train_loop(samples, tiny_cfg)
    _, log_b = train.train_loop(samples, tiny_cfg)
    assert train.format_loss_log(log_a) == train.format_loss_log(log_b)
    assert [r["step"] for r in log_a] == list(range(tiny_cfg.train.total_steps))


def test_no_augment_leaves_pixels_untouched(tiny_cfg):
    s = data.generate_synthetic(tiny_cfg.synth, "train")[0]
    out = data.augment_sample(s, np.random.default_rng(0), augment=False)
    assert out.pixels is s.pixels


def test_class_agnostic_flag_only_changes_regression(tiny_cfg):
    import dataclasses

    samples = data.generate_synthetic(tiny_cfg.synth, "train")[:2]
    losses = []
    for agnostic in (True, False):
        cfg = dataclasses.replace(tiny_cfg, train=dataclasses.replace(
            tiny_cfg.train, class_agnostic=agnostic))
        model = train.build_model(cfg)
        losses.append(train.forward_backward(model, samples, np.random.default_rng(0), cfg.train))
    for key in ("rpn_cls", "rpn_reg", "cls"):
        assert losses[0][key] == losses[1][key]


def test_empty_dataset_is_rejected(tiny_cfg):
    with pytest.raises(data.DataError):
        train.train_loop([], tiny_cfg)


def test_loss_log_format():
    text = train.format_loss_log(
        [{"step": 0, "lr": 0.1, "rpn_cls": 1.0, "rpn_reg": 0.5, "cls": 0.25, "reg": 0.0,
          "total": 1.75}], header="a: 1\nb: 2")
    lines = text.splitlines()
    assert lines[:2] == ["# a: 1", "# b: 2"]
    assert lines[2] == "step,lr,rpn_cls,rpn_reg,cls,reg,total"
    assert lines[3] == "0,0.1,1.0,0.5,0.25,0.0,1.75"
