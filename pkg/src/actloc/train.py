"""Target assignment, multi-task loss, SGD with momentum and the training loop."""
import math
from dataclasses import dataclass

import numpy as np

from actloc import backbone, data, detection, geometry
from actloc.model import ActionDetector, calibrate_batchnorm
from actloc.nn.functional import sigmoid

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1
RPN_POS_IOU = 0.7
RPN_NEG_IOU = 0.3
DET_POS_IOU = 0.5
PROB_CLAMP = 1e-7
LOG_COLUMNS = ("step", "lr", "rpn_cls", "rpn_reg", "cls", "reg", "total")


@dataclass
class RPNTargets:
    labels: np.ndarray   # (A,) in {1, 0, -1}
    deltas: np.ndarray   # (A, 4), zero where not positive


@dataclass
class DetectionTargets:
    classes: np.ndarray  # (R, C) multi-hot
    matched: np.ndarray  # (R,) index of the matched gt box, -1 for background
    deltas: np.ndarray   # (R, 4), zero for background


def label_anchors(anchors, gt_boxes):
    """Anchor labels before sampling, and the matched gt index per anchor."""
    n = len(anchors)
    labels = np.full(n, IGNORE, dtype=np.int64)
    if len(gt_boxes) == 0:
        labels[:] = NEGATIVE
        return labels, np.full(n, -1, dtype=np.int64)
    overlaps = geometry.iou_matrix(anchors, gt_boxes)
    best = overlaps.argmax(axis=1)
    best_iou = overlaps[np.arange(n), best]
    labels[best_iou <= RPN_NEG_IOU] = NEGATIVE
    labels[best_iou >= RPN_POS_IOU] = POSITIVE
    for g in range(len(gt_boxes)):
        a = int(overlaps[:, g].argmax())
        if overlaps[a, g] > 0:
            labels[a] = POSITIVE
            best[a] = g
    return labels, best


def sample_labels(labels, rng, max_pos, max_neg):
    out = labels.copy()
    for value, cap in ((POSITIVE, max_pos), (NEGATIVE, max_neg)):
        idx = np.flatnonzero(out == value)
        if len(idx) > cap:
            drop = rng.choice(idx, size=len(idx) - cap, replace=False)
            out[drop] = IGNORE
    return out


def assign_rpn_targets(anchors, gt_boxes, rng=None, max_pos=64, max_neg=64):
    labels, matched = label_anchors(anchors, gt_boxes)
    if rng is not None:
        labels = sample_labels(labels, rng, max_pos, max_neg)
    deltas = np.zeros((len(anchors), 4))
    pos = np.flatnonzero(labels == POSITIVE)
    if len(pos):
        deltas[pos] = geometry.encode(np.asarray(gt_boxes)[matched[pos]], anchors[pos])
    return RPNTargets(labels, deltas)


def assign_detection_targets(proposals, gt_boxes, gt_labels, num_classes):
    """Match each proposal to its best gt at IoU >= 0.5, inheriting all its labels."""
    r = len(proposals)
    classes = np.zeros((r, num_classes))
    matched = np.full(r, -1, dtype=np.int64)
    deltas = np.zeros((r, 4))
    if r == 0 or len(gt_boxes) == 0:
        return DetectionTargets(classes, matched, deltas)
    overlaps = geometry.iou_matrix(proposals, gt_boxes)
    best = overlaps.argmax(axis=1)
    best_iou = overlaps[np.arange(r), best]
    pos = np.flatnonzero(best_iou >= DET_POS_IOU)
    matched[pos] = best[pos]
    for i in pos:
        classes[i, sorted(gt_labels[best[i]])] = 1.0
    if len(pos):
        deltas[pos] = geometry.encode(np.asarray(gt_boxes)[best[pos]], np.asarray(proposals)[pos])
    return DetectionTargets(classes, matched, deltas)


def bce_with_logits(logits, targets, weight=None):
    """Mean binary cross-entropy on clamped sigmoid probabilities, and d/dlogits."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0:
        return 0.0, np.zeros_like(logits)
    p = sigmoid(logits)
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    terms = -(targets * np.log(pc) + (1.0 - targets) * np.log1p(-pc))
    n = logits.size if weight is None else max(weight.sum(), 1.0)
    if weight is not None:
        terms = terms * weight
    inside = (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)
    grad = np.where(inside, p - targets, 0.0) / n
    if weight is not None:
        grad = grad * weight
    return float(terms.sum() / n), grad


def smooth_l1(pred, target, beta=1.0):
    """Elementwise smooth-L1 values and their derivative."""
    d = pred - target
    a = np.abs(d)
    value = np.where(a < beta, 0.5 * d * d / beta, a - 0.5 * beta)
    grad = np.where(a < beta, d / beta, np.sign(d))
    return value, grad


def regression_loss(pred, target, mask):
    """Smooth-L1 summed over the 4 coordinates, averaged over rows in ``mask``."""
    grad = np.zeros_like(pred)
    n = int(mask.sum())
    if n == 0:
        return 0.0, grad
    value, g = smooth_l1(pred[mask], target[mask])
    grad[mask] = g / n
    return float(value.sum() / n), grad


def rpn_loss(logits, deltas, targets):
    """Objectness BCE over sampled anchors and regression over positives."""
    sampled = (targets.labels != IGNORE).astype(np.float64)
    cls, g_logits = bce_with_logits(logits, (targets.labels == POSITIVE).astype(np.float64),
                                    weight=sampled)
    reg, g_deltas = regression_loss(deltas, targets.deltas, targets.labels == POSITIVE)
    return cls, reg, g_logits, g_deltas


def detection_loss(logits, deltas, targets, class_agnostic=True):
    """Per-class BCE plus smooth-L1 on matched proposals.

    With per-class regression, each positive label of a matched proposal
    trains its own 4 deltas.
    """
    cls, g_logits = bce_with_logits(logits, targets.classes)
    matched = targets.matched >= 0
    if class_agnostic:
        reg, g_deltas = regression_loss(deltas, targets.deltas, matched)
        return cls, reg, g_logits, g_deltas
    r, c = targets.classes.shape
    per = deltas.reshape(r, c, 4)
    mask = (targets.classes > 0) & matched[:, None]
    tgt = np.repeat(targets.deltas[:, None, :], c, axis=1)
    reg, g = regression_loss(per.reshape(-1, 4), tgt.reshape(-1, 4), mask.ravel())
    return cls, reg, g_logits, g.reshape(r, 4 * c)


def cosine_lr(step, base_lr, total_steps):
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total_steps))


def sgd_momentum_step(params, grads, velocity, lr, momentum):
    """In-place ``v = momentum * v + g; w = w - lr * v`` over named arrays."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name!r}")
    for name, g in grads.items():
        v = velocity.setdefault(name, np.zeros_like(params[name]))
        v *= momentum
        v += g
        params[name] -= lr * v
    return params, velocity


def sample_rois(proposals, gt_boxes, gt_labels, num_classes, rng, count, pos_fraction):
    """Training RoIs: proposals plus gt boxes, subsampled to ``count``."""
    boxes = np.concatenate([proposals, np.asarray(gt_boxes).reshape(-1, 4)], axis=0)
    targets = assign_detection_targets(boxes, gt_boxes, gt_labels, num_classes)
    pos = np.flatnonzero(targets.matched >= 0)
    neg = np.flatnonzero(targets.matched < 0)
    n_pos = min(len(pos), int(round(count * pos_fraction)))
    n_neg = min(len(neg), count - n_pos)
    keep = np.concatenate([
        rng.choice(pos, size=n_pos, replace=False) if n_pos else np.zeros(0, np.int64),
        rng.choice(neg, size=n_neg, replace=False) if n_neg else np.zeros(0, np.int64),
    ]).astype(np.int64)
    return boxes[keep], DetectionTargets(
        targets.classes[keep], targets.matched[keep], targets.deltas[keep]
    )


def build_model(cfg):
    """Fresh detector for an experiment config, weights seeded by ``train.seed``."""
    t = cfg.train
    return ActionDetector(
        cfg.model_backbone(), cfg.detection,
        class_agnostic=t.class_agnostic, context=t.context, seed=t.seed,
    )


def forward_backward(model, samples, rng, tcfg, proposals=None):
    """Loss components for one batch; gradients accumulate in ``model.grads``.

    ``proposals`` (one box array per sample) replaces the RPN's own proposals;
    gradient checks use it to keep the RoI set fixed under perturbation.
    """
    dcfg = model.detection_cfg
    clips = np.stack([s.pixels for s in samples])
    n = len(samples)
    model.zero_grad()
    volume = model.trunk(clips)
    center = backbone.slice_center_frame(volume)
    logits, deltas = model.rpn(center)

    g_logits = np.zeros_like(logits)
    g_deltas = np.zeros_like(deltas)
    rpn_cls = rpn_reg = 0.0
    roi_boxes, roi_index, roi_targets = [], [], []
    for i, s in enumerate(samples):
        tg = assign_rpn_targets(model.anchors, s.boxes, rng, tcfg.rpn_positives,
                                tcfg.rpn_negatives)
        c, r, gl, gd = rpn_loss(logits[i], deltas[i], tg)
        rpn_cls += c / n
        rpn_reg += r / n
        g_logits[i] = gl / n
        g_deltas[i] = gd / n
        if proposals is None:
            props, _ = detection.propose(logits[i], deltas[i], model.anchors, dcfg)
        else:
            props = proposals[i]
        boxes, targets = sample_rois(props, s.boxes, s.labels, dcfg.num_classes, rng,
                                     tcfg.rois_per_image, tcfg.roi_positive_fraction)
        roi_boxes.append(boxes)
        roi_index.append(np.full(len(boxes), i, dtype=np.int64))
        roi_targets.append(targets)

    boxes = np.concatenate(roi_boxes)
    batch_index = np.concatenate(roi_index)
    targets = DetectionTargets(
        np.concatenate([t.classes for t in roi_targets]),
        np.concatenate([t.matched for t in roi_targets]),
        np.concatenate([t.deltas for t in roi_targets]),
    )
    emb, record = model.embed(volume, clips, boxes, batch_index)
    cls_logits, reg = model.classifier(emb)
    cls, reg_loss, g_cls, g_reg = detection_loss(cls_logits, reg, targets,
                                                 model.class_agnostic)

    g_emb = model.classifier.backward(g_cls * tcfg.cls_weight, g_reg * tcfg.reg_weight)
    g_volume = model.embed_backward(g_emb, record, batch_index, n)
    g_center = model.rpn.backward(g_logits * tcfg.rpn_cls_weight,
                                  g_deltas * tcfg.rpn_reg_weight, center.shape)
    g_volume += backbone.slice_center_frame_backward(g_center, volume.shape)
    model.trunk.backward(g_volume)
    total = (tcfg.rpn_cls_weight * rpn_cls + tcfg.rpn_reg_weight * rpn_reg
             + tcfg.cls_weight * cls + tcfg.reg_weight * reg_loss)
    return {"rpn_cls": rpn_cls, "rpn_reg": rpn_reg, "cls": cls, "reg": reg_loss,
            "total": total}


def _clip_gradients(grads, max_norm):
    if not max_norm:
        return grads
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}
    return grads


def train_loop(samples, cfg, model=None, callback=None):
    """Train a detector on ``samples``; returns the model and per-step log rows.

    Shuffling, augmentation and target sampling draw from generators seeded
    by ``cfg.train.seed``, so a run is reproducible bit for bit.
    """
    if not samples:
        raise data.DataError("training set is empty")
    tcfg = cfg.train
    if model is None:
        model = build_model(cfg)
    data_rng = np.random.default_rng([tcfg.seed, 1])
    sample_rng = np.random.default_rng([tcfg.seed, 2])
    if tcfg.calibrate_batchnorm:
        calib = samples[: min(len(samples), 8)]
        calibrate_batchnorm(
            model,
            np.stack([s.pixels for s in calib]),
            np.concatenate([s.boxes for s in calib]),
            np.concatenate([np.full(len(s.boxes), i) for i, s in enumerate(calib)]),
        )
    names = model.trainable(tcfg.train_batchnorm)
    params = dict(model.named_parameters())
    params = {k: params[k] for k in names}
    velocity = {}
    log = []
    order = []
    for step in range(tcfg.total_steps):
        batch = []
        while len(batch) < tcfg.batch_size:
            if not order:
                order = list(data_rng.permutation(len(samples)))
            batch.append(samples[order.pop(0)])
        batch = [data.augment_sample(s, data_rng, tcfg.augment) for s in batch]
        losses = forward_backward(model, batch, sample_rng, tcfg)
        grads = dict(model.named_grads())
        grads = _clip_gradients({k: grads[k] for k in names}, tcfg.grad_clip)
        lr = cosine_lr(step, tcfg.base_lr, tcfg.total_steps)
        sgd_momentum_step(params, grads, velocity, lr, tcfg.momentum)
        row = {"step": step, "lr": lr, **losses}
        log.append(row)
        if callback is not None:
            callback(row)
    return model, log


def format_loss_log(log, header=None):
    lines = []
    if header:
        lines.extend(f"# {line}" for line in header.splitlines())
    lines.append(",".join(LOG_COLUMNS))
    for row in log:
        lines.append(",".join(
            str(row["step"]) if k == "step" else repr(float(row[k])) for k in LOG_COLUMNS
        ))
    return "\n".join(lines) + "\n"
