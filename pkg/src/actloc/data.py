"""Synthetic motion-action clips, AVA-style CSV files and augmentation.

Synthetic classes: 0 static, 1 moving-right, 2 moving-left, 3 expanding.
An actor's labels come only from its motion, so a single frame cannot tell
moving-right from moving-left.
"""
import csv
import io
import math
import os
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from actloc import geometry
from actloc.nn import checkpoint

STATIC, MOVING_RIGHT, MOVING_LEFT, EXPANDING = 0, 1, 2, 3
CLASS_NAMES = ("static", "moving-right", "moving-left", "expanding")
FLIP_LABELS = {MOVING_RIGHT: MOVING_LEFT, MOVING_LEFT: MOVING_RIGHT}
# (horizontal direction, expanding) -> label set
_MOTIONS = [
    (0, False, frozenset({STATIC})),
    (1, False, frozenset({MOVING_RIGHT})),
    (-1, False, frozenset({MOVING_LEFT})),
    (0, True, frozenset({EXPANDING})),
    (1, True, frozenset({MOVING_RIGHT, EXPANDING})),
    (-1, True, frozenset({MOVING_LEFT, EXPANDING})),
]
PLACEMENT_ATTEMPTS = 100
CROP_ATTEMPTS = 10
COORD_TOL = 1e-6


class DataError(ValueError):
    pass


class CSVFormatError(DataError):
    pass


@dataclass(frozen=True)
class Annotation:
    video_id: str
    timestamp: int
    box: tuple
    action_ids: frozenset
    score: Optional[float] = None


@dataclass
class Sample:
    """One clip with keyframe annotations; the keyframe is frame T // 2."""

    video_id: str
    timestamp: int
    pixels: np.ndarray                 # (T, H, W, 3)
    boxes: np.ndarray                  # (K, 4)
    labels: list                       # K frozensets of class ids
    masks: Optional[np.ndarray] = field(default=None, repr=False)  # (K, T, H, W)

    @property
    def keyframe(self):
        return self.pixels.shape[0] // 2

    def annotations(self):
        return [
            Annotation(self.video_id, self.timestamp, tuple(float(v) for v in b), labels)
            for b, labels in zip(self.boxes, self.labels)
        ]

    def multi_hot(self, num_classes):
        out = np.zeros((len(self.labels), num_classes))
        for i, labels in enumerate(self.labels):
            out[i, sorted(labels)] = 1.0
        return out


def _background(rng, t, size, noise):
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = np.full((size, size, 3), 0.5)
    for _ in range(3):
        fx, fy = rng.uniform(1.0, 6.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.03, 0.08, size=3)
        base += amp * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)[..., None]
    frames = np.repeat(base[None], t, axis=0)
    if noise > 0:
        frames = frames + noise * rng.standard_normal(frames.shape)
    return frames


def _actor_color(rng):
    while True:
        color = rng.uniform(0.0, 1.0, size=3)
        if np.abs(color - 0.5).max() >= 0.3:
            return color


def _trajectory(cx, cy, w, h, direction, expanding, travel, growth, t):
    """Per-frame normalized boxes for one actor; keyframe box is (cx, cy, w, h)."""
    kf = t // 2
    span = max(t - 1, 1)
    out = np.zeros((t, 4))
    for f in range(t):
        u = (f - kf) / span
        scale = growth ** u if expanding else 1.0
        x = cx + direction * travel * u
        out[f] = (x - w * scale / 2, cy - h * scale / 2, x + w * scale / 2, cy + h * scale / 2)
    return out


def _to_pixels(box, size):
    x1, y1, x2, y2 = (int(round(v * size)) for v in box)
    return x1, y1, max(x2, x1 + 1), max(y2, y1 + 1)


def _place_actor(rng, cfg, direction, expanding, placed):
    t, size = cfg.frames, cfg.image_size
    for _ in range(PLACEMENT_ATTEMPTS):
        w = rng.uniform(cfg.min_size, cfg.max_size)
        h = rng.uniform(cfg.min_size, cfg.max_size)
        travel = rng.uniform(cfg.min_travel, cfg.max_travel) if direction else 0.0
        cx, cy = rng.uniform(0.0, 1.0, size=2)
        traj = _trajectory(cx, cy, w, h, direction, expanding, travel, cfg.growth, t)
        if traj.min() < 0.0 or traj.max() > 1.0:
            continue
        pix = np.array([_to_pixels(b, size) for b in traj])
        key = pix[t // 2] / size
        if placed and geometry.iou_matrix(key[None], np.array(placed)).max() > 0.1:
            continue
        return pix
    raise DataError(f"could not place actor after {PLACEMENT_ATTEMPTS} attempts")


def generate_clip(rng, cfg, video_id):
    t, size = cfg.frames, cfg.image_size
    pixels = _background(rng, t, size, cfg.noise)
    count = int(rng.integers(cfg.min_actors, cfg.max_actors + 1))
    boxes, labels, masks, placed = [], [], [], []
    for _ in range(count):
        direction, expanding, label = _MOTIONS[int(rng.integers(len(_MOTIONS)))]
        pix = _place_actor(rng, cfg, direction, expanding, placed)
        color = _actor_color(rng)
        mask = np.zeros((t, size, size), dtype=bool)
        for f, (x1, y1, x2, y2) in enumerate(pix):
            mask[f, y1:y2, x1:x2] = True
        # later actors occlude earlier ones
        for m in masks:
            m &= ~mask
        pixels[mask] = color
        key = pix[t // 2] / size
        placed.append(key)
        boxes.append(key)
        labels.append(label)
        masks.append(mask)
    return Sample(
        video_id=video_id,
        timestamp=t // 2,
        pixels=np.clip(pixels, 0.0, 1.0),
        boxes=np.array(boxes, dtype=np.float64).reshape(-1, 4),
        labels=labels,
        masks=np.array(masks).reshape(len(masks), t, size, size),
    )


def generate_synthetic(cfg, split="train"):
    """Deterministic list of samples for one split."""
    count = cfg.train_clips if split == "train" else cfg.val_clips
    stream = {"train": 0, "val": 1}[split]
    rng = np.random.default_rng([cfg.seed, stream])
    return [generate_clip(rng, cfg, f"{split}_{i:04d}") for i in range(count)]


# --- AVA CSV ---------------------------------------------------------------

def _parse_rows(text, ncols, what):
    reader = csv.reader(io.StringIO(text))
    for lineno, row in enumerate(reader, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) not in ncols:
            raise CSVFormatError(
                f"line {lineno}: expected {'/'.join(map(str, ncols))} fields for {what}, "
                f"got {len(row)}"
            )
        try:
            vid = row[0].strip()
            ts = int(row[1])
            box = tuple(float(v) for v in row[2:6])
            action = int(row[6])
            extra = row[7] if len(row) > 7 else None
        except ValueError as exc:
            raise CSVFormatError(f"line {lineno}: {exc}") from exc
        if not vid:
            raise CSVFormatError(f"line {lineno}: empty video id")
        if box[0] > box[2] or box[1] > box[3]:
            raise CSVFormatError(f"line {lineno}: x1 > x2 or y1 > y2 in box {box}")
        if not all(math.isfinite(v) for v in box):
            raise CSVFormatError(f"line {lineno}: non-finite coordinate")
        yield lineno, vid, ts, box, action, extra


def parse_ava_groundtruth_csv(text):
    """Ground-truth rows ``video_id,timestamp,x1,y1,x2,y2,action_id[,person_id]``.

    Rows for the same frame whose boxes agree within 1e-6 are merged into one
    multi-label annotation.
    """
    merged = []
    by_frame = {}
    for _, vid, ts, box, action, _ in _parse_rows(text, (7, 8), "ground truth"):
        bucket = by_frame.setdefault((vid, ts), [])
        for idx in bucket:
            if max(abs(a - b) for a, b in zip(merged[idx][2], box)) <= COORD_TOL:
                merged[idx][3].add(action)
                break
        else:
            bucket.append(len(merged))
            merged.append((vid, ts, box, {action}))
    return [Annotation(v, t, b, frozenset(a)) for v, t, b, a in merged]


def parse_detections_csv(text):
    """Detection rows ``video_id,timestamp,x1,y1,x2,y2,action_id,score``."""
    out = []
    for lineno, vid, ts, box, action, extra in _parse_rows(text, (8,), "detections"):
        try:
            score = float(extra)
        except ValueError as exc:
            raise CSVFormatError(f"line {lineno}: bad score {extra!r}") from exc
        out.append(Annotation(vid, ts, box, frozenset({action}), score))
    return out


def _fmt(v):
    return f"{v:.6f}"


def write_detections_csv(detections):
    """Serialize single-action scored annotations, sorted by frame then score."""
    rows = sorted(
        enumerate(detections),
        key=lambda item: (item[1].video_id, item[1].timestamp, -item[1].score, item[0]),
    )
    buf = io.StringIO()
    for _, d in rows:
        (action,) = d.action_ids
        buf.write(",".join([d.video_id, str(d.timestamp), *map(_fmt, d.box), str(action),
                            _fmt(d.score)]) + "\n")
    return buf.getvalue()


def write_groundtruth_csv(annotations):
    """One row per (box, action id), the AVA multi-label encoding."""
    buf = io.StringIO()
    for a in annotations:
        for action in sorted(a.action_ids):
            buf.write(",".join([a.video_id, str(a.timestamp), *map(_fmt, a.box),
                                str(action)]) + "\n")
    return buf.getvalue()


# --- augmentation ------------------------------------------------------------

def flip_sample(sample):
    """Mirror pixels and boxes left-right; moving-right and moving-left swap."""
    return replace(
        sample,
        pixels=sample.pixels[:, :, ::-1].copy(),
        boxes=geometry.flip_horizontal(sample.boxes) if len(sample.boxes) else sample.boxes,
        labels=[frozenset(FLIP_LABELS.get(c, c) for c in labels) for labels in sample.labels],
        masks=None if sample.masks is None else sample.masks[:, :, :, ::-1].copy(),
    )


def crop_sample(sample, window_px):
    """Crop to a pixel-aligned window and resize back with nearest neighbour.

    Returns None when every box is dropped by the crop.
    """
    t, h, w, _ = sample.pixels.shape
    x0, y0, cw, ch = window_px
    window = np.array([x0 / w, y0 / h, (x0 + cw) / w, (y0 + ch) / h])
    keep, boxes = [], []
    for i, b in enumerate(sample.boxes):
        nb = geometry.crop_transform(b, window)
        if nb is not None:
            keep.append(i)
            boxes.append(nb)
    if not keep:
        return None
    rows = y0 + np.floor((np.arange(h) + 0.5) * ch / h).astype(np.int64)
    cols = x0 + np.floor((np.arange(w) + 0.5) * cw / w).astype(np.int64)
    pixels = sample.pixels[:, rows][:, :, cols]
    masks = None
    if sample.masks is not None:
        masks = sample.masks[keep][:, :, rows][:, :, :, cols]
    return replace(sample, pixels=pixels, boxes=np.array(boxes),
                   labels=[sample.labels[i] for i in keep], masks=masks)


def random_crop_window(rng, size, min_scale=0.7, max_scale=1.0):
    s = rng.uniform(min_scale, max_scale)
    c = max(1, int(round(s * size)))
    x0 = int(rng.integers(0, size - c + 1))
    y0 = int(rng.integers(0, size - c + 1))
    return x0, y0, c, c


def augment_sample(sample, rng, augment=True):
    """Random left-right flip (p = 0.5) then a random crop of scale U[0.7, 1]."""
    if not augment:
        return sample
    if rng.random() < 0.5:
        sample = flip_sample(sample)
    size = sample.pixels.shape[2]
    for _ in range(CROP_ATTEMPTS):
        cropped = crop_sample(sample, random_crop_window(rng, size))
        if cropped is not None:
            return cropped
    return sample


# --- persistence -------------------------------------------------------------

def clips_path(directory, split):
    return os.path.join(directory, f"{split}_clips.stlc")


def annotations_path(directory, split):
    return os.path.join(directory, f"{split}_annotations.csv")


def save_split(directory, split, samples):
    checkpoint.save(clips_path(directory, split), {s.video_id: s.pixels for s in samples})
    anns = [a for s in samples for a in s.annotations()]
    with open(annotations_path(directory, split), "w", encoding="utf-8", newline="") as fh:
        fh.write(write_groundtruth_csv(anns))


def load_split(directory, split):
    cpath, apath = clips_path(directory, split), annotations_path(directory, split)
    for p in (cpath, apath):
        if not os.path.exists(p):
            raise DataError(f"missing dataset file {p}")
    clips = checkpoint.load(cpath)
    with open(apath, encoding="utf-8") as fh:
        anns = parse_ava_groundtruth_csv(fh.read())
    by_video = {}
    for a in anns:
        by_video.setdefault(a.video_id, []).append(a)
    samples = []
    for vid, pixels in clips.items():
        rows = by_video.get(vid, [])
        samples.append(Sample(
            video_id=vid,
            timestamp=pixels.shape[0] // 2,
            pixels=pixels,
            boxes=np.array([a.box for a in rows], dtype=np.float64).reshape(-1, 4),
            labels=[a.action_ids for a in rows],
        ))
    unknown = sorted(set(by_video) - set(clips))
    if unknown:
        raise DataError(f"annotations reference unknown clip {unknown[0]!r}")
    return samples
