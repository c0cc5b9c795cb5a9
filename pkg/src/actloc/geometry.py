"""Box algebra on normalized ``(x1, y1, x2, y2)`` coordinates.

Single boxes are length-4 sequences, box sets are ``(N, 4)`` float arrays.
Everything here is a pure function of its inputs.
"""
import math

import numpy as np

# exp() guard for width/height deltas
MAX_LOG_RATIO = math.log(1000.0)
# fraction of the original box area that must survive a crop
CROP_RETENTION = 0.25


def as_boxes(boxes):
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"expected boxes of shape (N, 4), got {arr.shape}")
    return arr


def area(boxes):
    b = as_boxes(boxes)
    return np.maximum(b[:, 2] - b[:, 0], 0.0) * np.maximum(b[:, 3] - b[:, 1], 0.0)


def iou_matrix(a, b):
    """Pairwise IoU between two box sets, shape ``(len(a), len(b))``.

    Pairs whose union is empty (both boxes zero-area) get 0.
    """
    a = as_boxes(a) if len(a) else np.zeros((0, 4))
    b = as_boxes(b) if len(b) else np.zeros((0, 4))
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.maximum(ix2 - ix1, 0.0) * np.maximum(iy2 - iy1, 0.0)
    union = area(a)[:, None] + area(b)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return np.clip(out, 0.0, 1.0)


def iou(a, b):
    return float(iou_matrix(a, b)[0, 0])


def _centers(boxes):
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    return boxes[:, 0] + 0.5 * w, boxes[:, 1] + 0.5 * h, w, h


def encode(targets, anchors):
    """Faster R-CNN regression targets of ``targets`` relative to ``anchors``.

    Returns ``(N, 4)`` deltas ``(tx, ty, tw, th)``; single boxes give ``(1, 4)``.
    """
    t = as_boxes(targets)
    a = as_boxes(anchors)
    tcx, tcy, tw, th = _centers(t)
    acx, acy, aw, ah = _centers(a)
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("anchor must have positive width and height")
    if np.any(tw <= 0) or np.any(th <= 0):
        raise ValueError("target must have positive width and height")
    return np.stack(
        [(tcx - acx) / aw, (tcy - acy) / ah, np.log(tw / aw), np.log(th / ah)],
        axis=1,
    )


def decode(deltas, anchors):
    """Inverse of :func:`encode`. Output is not clipped."""
    d = as_boxes(deltas)
    a = as_boxes(anchors)
    acx, acy, aw, ah = _centers(a)
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("anchor must have positive width and height")
    cx = d[:, 0] * aw + acx
    cy = d[:, 1] * ah + acy
    w = aw * np.exp(np.minimum(d[:, 2], MAX_LOG_RATIO))
    h = ah * np.exp(np.minimum(d[:, 3], MAX_LOG_RATIO))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def clip(boxes):
    return np.clip(as_boxes(boxes), 0.0, 1.0)


def flip_horizontal(boxes):
    b = as_boxes(boxes)
    return np.stack([1.0 - b[:, 2], b[:, 1], 1.0 - b[:, 0], b[:, 3]], axis=1)


def crop_transform(box, window):
    """Re-express ``box`` inside crop ``window``.

    Returns the intersection in window-normalized coordinates, or None when
    less than a quarter of the original box area survives the crop.
    """
    b = as_boxes(box)[0]
    w = as_boxes(window)[0]
    ww, wh = w[2] - w[0], w[3] - w[1]
    if ww <= 0 or wh <= 0:
        raise ValueError("crop window must have positive area")
    ix1, iy1 = max(b[0], w[0]), max(b[1], w[1])
    ix2, iy2 = min(b[2], w[2]), min(b[3], w[3])
    inter = max(ix2 - ix1, 0.0) * max(iy2 - iy1, 0.0)
    full = (b[2] - b[0]) * (b[3] - b[1])
    if full <= 0 or inter < CROP_RETENTION * full:
        return None
    return np.array(
        [(ix1 - w[0]) / ww, (iy1 - w[1]) / wh, (ix2 - w[0]) / ww, (iy2 - w[1]) / wh]
    )


def descending_order(scores):
    """Indices sorting ``scores`` high to low; ties keep the lower index first."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.argsort(-scores, kind="stable")


def nms(boxes, scores, iou_threshold):
    """Greedy single-class non-maximum suppression.

    A box is kept iff its IoU with every already-kept box is at most
    ``iou_threshold``. Returns kept indices in descending score order.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must lie in (0, 1)")
    if len(boxes) == 0:
        return np.zeros(0, dtype=np.int64)
    b = as_boxes(boxes)
    order = descending_order(scores)
    x1, y1, x2, y2 = (np.ascontiguousarray(b[order, k]) for k in range(4))
    areas = area(b[order])
    alive = np.ones(len(order), dtype=bool)
    keep = []
    # same arithmetic as iou_matrix, one kept box against the later boxes
    for i in range(len(order)):
        if not alive[i]:
            continue
        keep.append(order[i])
        iw = np.maximum(np.minimum(x2[i], x2[i + 1:]) - np.maximum(x1[i], x1[i + 1:]), 0.0)
        ih = np.maximum(np.minimum(y2[i], y2[i + 1:]) - np.maximum(y1[i], y1[i + 1:]), 0.0)
        inter = iw * ih
        union = areas[i] + areas[i + 1:] - inter
        overlap = np.zeros_like(inter)
        np.divide(inter, union, out=overlap, where=union > 0)
        alive[i + 1:] &= np.clip(overlap, 0.0, 1.0) <= iou_threshold
    return np.asarray(keep, dtype=np.int64)
