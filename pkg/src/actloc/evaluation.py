"""Frame-level mAP at IoU 0.5 over keyframe detections."""
import io
from dataclasses import dataclass, field

import numpy as np

from actloc import geometry


@dataclass
class EvalReport:
    per_class_ap: dict
    mean_ap: float
    # class id -> (n_gt, n_det)
    per_class_counts: dict = field(default_factory=dict)

    def to_csv(self):
        buf = io.StringIO()
        buf.write("class_id,ap,n_gt,n_det\n")
        for c in sorted(self.per_class_ap):
            n_gt, n_det = self.per_class_counts[c]
            buf.write(f"{c},{self.per_class_ap[c]:.6f},{n_gt},{n_det}\n")
        return buf.getvalue()

    def summary(self):
        return f"mAP={self.mean_ap:.6f}"


def match_class(det_boxes, det_scores, gt_boxes, iou_threshold=0.5):
    """TP flags for one class in one frame, in input order.

    Detections are visited by descending score; each one takes its best
    still-unmatched gt box if that overlap reaches the threshold.
    """
    n = len(det_scores)
    tp = np.zeros(n, dtype=bool)
    if n == 0 or len(gt_boxes) == 0:
        return tp
    overlaps = geometry.iou_matrix(det_boxes, gt_boxes)
    taken = np.zeros(len(gt_boxes), dtype=bool)
    for i in geometry.descending_order(det_scores):
        row = np.where(taken, -1.0, overlaps[i])
        g = int(row.argmax())
        if row[g] >= iou_threshold:
            tp[i] = True
            taken[g] = True
    return tp


def average_precision(tp_flags, scores, n_gt):
    """All-point interpolated AP of a ranked TP/FP list against ``n_gt`` positives."""
    if n_gt < 1:
        raise ValueError("average precision needs at least one ground-truth instance")
    tp_flags = np.asarray(tp_flags, dtype=bool)
    if tp_flags.size == 0:
        return 0.0
    order = geometry.descending_order(scores)
    tp = np.cumsum(tp_flags[order])
    fp = np.cumsum(~tp_flags[order])
    recall = tp / n_gt
    precision = tp / (tp + fp)
    interp = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * interp))


def evaluate(detections, groundtruth, iou_threshold=0.5):
    """Per-class AP and their mean over classes that have ground truth.

    ``detections`` carry one action id and a score each; ``groundtruth``
    may carry several action ids per box. Detections on frames without any
    ground truth count as false positives.
    """
    gt_by_class = {}
    for a in groundtruth:
        for c in a.action_ids:
            gt_by_class.setdefault(c, {}).setdefault((a.video_id, a.timestamp), []).append(a.box)
    det_by_class = {}
    for i, d in enumerate(detections):
        (c,) = d.action_ids
        det_by_class.setdefault(c, []).append(i)

    per_class_ap, counts = {}, {}
    for c in sorted(gt_by_class):
        frames = gt_by_class[c]
        n_gt = sum(len(v) for v in frames.values())
        idx = det_by_class.get(c, [])
        flags = np.zeros(len(idx), dtype=bool)
        scores = np.array([detections[i].score for i in idx], dtype=np.float64)
        by_frame = {}
        for pos, i in enumerate(idx):
            by_frame.setdefault((detections[i].video_id, detections[i].timestamp), []).append(pos)
        for key, positions in by_frame.items():
            gts = frames.get(key)
            if not gts:
                continue
            boxes = np.array([detections[idx[p]].box for p in positions])
            flags[positions] = match_class(boxes, scores[positions], np.array(gts), iou_threshold)
        per_class_ap[c] = average_precision(flags, scores, n_gt)
        counts[c] = (n_gt, len(idx))
    mean_ap = float(np.mean(list(per_class_ap.values()))) if per_class_ap else 0.0
    return EvalReport(per_class_ap, mean_ap, counts)
