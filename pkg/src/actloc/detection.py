"""Faster R-CNN style detection on spatiotemporal features."""
import math
from typing import NamedTuple

import numpy as np

from actloc import geometry
from actloc.nn import Conv3d, Linear, Module, ReLU
from actloc.nn.functional import sigmoid

# proposals thinner than this (normalized units) after clipping are discarded
MIN_PROPOSAL_SIZE = 1e-3


class Detections(NamedTuple):
    boxes: np.ndarray    # (D, 4)
    classes: np.ndarray  # (D,) int
    scores: np.ndarray   # (D,)

    def __len__(self):
        return len(self.scores)


def generate_anchors(feature_shape, scales, aspects):
    """Anchors tiled row-major over (y, x, anchor), unclipped.

    Anchor side lengths are fractions of the image side; aspect is w / h.
    """
    if not len(scales) or not len(aspects):
        raise ValueError("anchor scales and aspects must be non-empty")
    h, w = feature_shape
    shapes = []
    for s in scales:
        for a in aspects:
            r = math.sqrt(a)
            shapes.append((s * r, s / r))
    shapes = np.asarray(shapes)
    cy = (np.arange(h) + 0.5) / h
    cx = (np.arange(w) + 0.5) / w
    cyy, cxx = np.meshgrid(cy, cx, indexing="ij")
    centers = np.stack([cxx, cyy], axis=-1).reshape(-1, 1, 2)
    half = shapes[None, :, :] / 2.0
    boxes = np.concatenate([centers - half, centers + half], axis=-1)
    return boxes.reshape(-1, 4)


class RPN(Module):
    """3x3 conv then sibling 1x1 convs for objectness logits and box deltas."""

    def __init__(self, c_in, channels, num_anchors, rng):
        super().__init__()
        self.num_anchors = num_anchors
        self.conv = self.add("conv", Conv3d(c_in, channels, (1, 3, 3), rng=rng))
        self.relu = self.add("relu", ReLU())
        self.cls = self.add("cls", Conv3d(channels, num_anchors, 1, rng=rng))
        self.reg = self.add("reg", Conv3d(channels, 4 * num_anchors, 1, rng=None))

    def forward(self, center_map, train=True):
        """Returns logits ``(N, h*w*A)`` and deltas ``(N, h*w*A, 4)``."""
        if center_map.ndim != 4:
            raise ValueError(f"center map must be rank 4, got shape {center_map.shape}")
        x = center_map[:, None]
        hidden = self.relu(self.conv(x, train), train)
        logits = self.cls(hidden, train)
        deltas = self.reg(hidden, train)
        n = center_map.shape[0]
        return logits.reshape(n, -1), deltas.reshape(n, -1, 4)

    def backward(self, g_logits, g_deltas, map_shape):
        n, h, w, _ = map_shape
        a = self.num_anchors
        g_hidden = self.cls.backward(g_logits.reshape(n, 1, h, w, a))
        g_hidden = g_hidden + self.reg.backward(g_deltas.reshape(n, 1, h, w, 4 * a))
        return self.conv.backward(self.relu.backward(g_hidden))[:, 0]


def propose(logits, deltas, anchors, cfg):
    """Top region proposals for one image.

    decode -> clip -> drop boxes clipped to (near) zero size -> top-N by
    objectness -> NMS -> cap. Returns boxes and objectness probabilities in
    descending objectness order.
    """
    logits = np.asarray(logits, dtype=np.float64).ravel()
    boxes = geometry.clip(geometry.decode(deltas, anchors))
    valid = np.flatnonzero((boxes[:, 2] - boxes[:, 0] >= MIN_PROPOSAL_SIZE)
                           & (boxes[:, 3] - boxes[:, 1] >= MIN_PROPOSAL_SIZE))
    boxes, logits = boxes[valid], logits[valid]
    order = geometry.descending_order(logits)[: cfg.pre_nms_top_n]
    boxes, logits = boxes[order], logits[order]
    keep = geometry.nms(boxes, logits, cfg.rpn_nms_threshold)[: cfg.post_nms_top_n]
    return boxes[keep], sigmoid(logits[keep])


def replicate_in_time(box, t):
    if t < 1:
        raise ValueError("temporal extent must be >= 1")
    return np.repeat(geometry.as_boxes(box), t, axis=0)


def _bin_ranges(start, end, extent, p):
    """Integer cell ranges of the p bins covering [start, end) on one axis."""
    length = end - start
    ranges = []
    for k in range(p):
        lo = start + (k * length) // p
        hi = start + ((k + 1) * length) // p
        if hi <= lo:
            c = min(start + int(math.floor((k + 0.5) * length / p)), end - 1)
            lo, hi = c, c + 1
        ranges.append((lo, hi))
    return ranges


def _quantize(lo, hi, extent):
    start = int(math.floor(lo * extent))
    end = int(math.ceil(hi * extent))
    start = min(max(start, 0), extent - 1)
    end = min(max(end, 0), extent)
    if end <= start:
        end = start + 1
    return start, end


def roi_bins(box, feature_hw, p):
    """Row and column bin ranges for one normalized box on an (h, w) map."""
    h, w = feature_hw
    x1, y1, x2, y2 = geometry.as_boxes(box)[0]
    r0, r1 = _quantize(y1, y2, h)
    c0, c1 = _quantize(x1, x2, w)
    return _bin_ranges(r0, r1, h, p), _bin_ranges(c0, c1, w, p)


def roipool_forward(volume, boxes, batch_index, p):
    """RoIPool of each box on every timestep of its sample's feature volume.

    ``volume`` is ``(N, T', h', w', c')``; boxes are replicated over time, so
    each timestep is pooled with the same box. Returns ``(R, T', p, p, c')``
    and a record holding the flat argmax positions for backward.
    """
    volume = np.asarray(volume)
    n, t, h, w, c = volume.shape
    boxes = geometry.as_boxes(boxes) if len(boxes) else np.zeros((0, 4))
    r = len(boxes)
    index = np.zeros((r, t, p, p, c), dtype=np.int64)
    t_off = (np.arange(t) * h * w * c)[:, None]
    c_off = np.arange(c)[None, :]
    for i in range(r):
        b = int(batch_index[i])
        base = b * t * h * w * c
        rows, cols = roi_bins(boxes[i], (h, w), p)
        for py, (ra, rb) in enumerate(rows):
            for px, (ca, cb) in enumerate(cols):
                region = volume[b, :, ra:rb, ca:cb, :].reshape(t, -1, c)
                arg = region.argmax(axis=1)
                rr = ra + arg // (cb - ca)
                cc = ca + arg % (cb - ca)
                index[i, :, py, px, :] = base + t_off + (rr * w + cc) * c + c_off
    out = volume.reshape(-1)[index]
    return out, {"index": index, "shape": volume.shape}


def roipool_backward(g, record):
    size = int(np.prod(record["shape"]))
    flat = np.bincount(record["index"].ravel(), weights=g.ravel(), minlength=size)
    return flat.reshape(record["shape"])


def roipool(volume, box, p):
    """Pool a single ``(T', h', w', c')`` volume with one box."""
    out, _ = roipool_forward(np.asarray(volume)[None], geometry.as_boxes(box), [0], p)
    return out[0]


class BoxClassifier(Module):
    """Per-class sigmoid logits plus class-agnostic (or per-class) box deltas."""

    def __init__(self, d_in, num_classes, class_agnostic, rng):
        super().__init__()
        self.num_classes = num_classes
        self.class_agnostic = class_agnostic
        self.cls = self.add("cls", Linear(d_in, num_classes, rng=rng))
        width = 4 if class_agnostic else 4 * num_classes
        self.reg = self.add("reg", Linear(d_in, width, rng=None))

    def forward(self, x, train=True):
        return self.cls(x, train), self.reg(x, train)

    def backward(self, g_logits, g_deltas):
        return self.cls.backward(g_logits) + self.reg.backward(g_deltas)


def classify_and_regress(classifier, embedding, train=False):
    """Class probabilities ``(R, C)`` and deltas ``(R, 4)`` or ``(R, 4C)``."""
    logits, deltas = classifier(embedding, train)
    return sigmoid(logits), deltas


def regressed_boxes(proposals, deltas, num_classes):
    """Clipped refined boxes, shape ``(R, C, 4)``.

    Class-agnostic deltas give the same box under every class.
    """
    proposals = geometry.as_boxes(proposals) if len(proposals) else np.zeros((0, 4))
    r = len(proposals)
    if deltas.shape[1] == 4:
        boxes = geometry.clip(geometry.decode(deltas, proposals)) if r else np.zeros((0, 4))
        return np.repeat(boxes[:, None, :], num_classes, axis=1)
    per = deltas.reshape(r, num_classes, 4)
    anchors = np.repeat(proposals, num_classes, axis=0)
    boxes = geometry.clip(geometry.decode(per.reshape(-1, 4), anchors)) if r else np.zeros((0, 4))
    return boxes.reshape(r, num_classes, 4)


def postprocess(proposals, probabilities, deltas, cfg):
    """Per-class NMS over regressed boxes, then the global top ``max_detections``."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    r, c = probabilities.shape
    boxes = regressed_boxes(proposals, np.asarray(deltas, dtype=np.float64).reshape(r, -1), c)
    out_boxes, out_classes, out_scores = [], [], []
    for k in range(c):
        scores = probabilities[:, k]
        mask = scores >= cfg.score_floor
        if not mask.any():
            continue
        cand_boxes, cand_scores = boxes[mask, k], scores[mask]
        keep = geometry.nms(cand_boxes, cand_scores, cfg.final_nms_threshold)
        out_boxes.append(cand_boxes[keep])
        out_scores.append(cand_scores[keep])
        out_classes.append(np.full(len(keep), k, dtype=np.int64))
    if not out_scores:
        return Detections(np.zeros((0, 4)), np.zeros(0, dtype=np.int64), np.zeros(0))
    all_boxes = np.concatenate(out_boxes)
    all_classes = np.concatenate(out_classes)
    all_scores = np.concatenate(out_scores)
    order = geometry.descending_order(all_scores)[: cfg.max_detections]
    return Detections(all_boxes[order], all_classes[order], all_scores[order])
