"""Experiment configuration: one YAML file, every key defaulted, unknown keys rejected."""
import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class StageConfig:
    channels: int
    kernel: tuple = (3, 3, 3)
    stride: tuple = (1, 1, 1)
    # optional max-pool after the activation: [window, stride], each (t, h, w)
    pool: Optional[tuple] = None

    def temporal_stride(self):
        s = self.stride[0]
        if self.pool is not None:
            s *= self.pool[1][0]
        return s

    def spatial_stride(self):
        s = self.stride[1]
        if self.pool is not None:
            s *= self.pool[1][1]
        return s


def _default_trunk():
    return [
        StageConfig(8, (3, 3, 3), (1, 2, 2)),
        StageConfig(16, (3, 3, 3), (2, 2, 2)),
        StageConfig(32, (3, 3, 3), (2, 2, 2)),
        StageConfig(64, (3, 3, 3), (1, 1, 1)),
    ]


def _default_head():
    return [StageConfig(64, (3, 3, 3), (1, 1, 1)), StageConfig(64, (3, 3, 3), (1, 1, 1))]


@dataclass
class BackboneConfig:
    # paper scale uses 64-frame clips; the toy default is 16
    clip_length: int = 16
    image_size: int = 64
    in_channels: int = 3
    trunk: list = field(default_factory=_default_trunk)
    head: list = field(default_factory=_default_head)
    # 2D scene-context stack; last entry is the context width (paper: 512)
    context_channels: list = field(default_factory=lambda: [16, 32])
    # set by the static-backbone control, which has no temporal kernels by design
    static: bool = False

    def __post_init__(self):
        self.validate()

    @property
    def temporal_stride(self):
        out = 1
        for s in self.trunk:
            out *= s.temporal_stride()
        return out

    @property
    def spatial_stride(self):
        out = 1
        for s in self.trunk:
            out *= s.spatial_stride()
        return out

    @property
    def feature_shape(self):
        """(T', h', w', c') of the trunk output."""
        return (
            self.clip_length // self.temporal_stride,
            self.image_size // self.spatial_stride,
            self.image_size // self.spatial_stride,
            self.trunk[-1].channels,
        )

    @property
    def context_dim(self):
        return self.context_channels[-1]

    @property
    def embedding_dim(self):
        return self.head[-1].channels

    def validate(self):
        if not self.trunk or not self.head:
            raise ConfigError("backbone needs at least one trunk and one head stage")
        if self.clip_length % self.temporal_stride:
            raise ConfigError(
                f"clip_length {self.clip_length} not divisible by trunk temporal stride "
                f"{self.temporal_stride}"
            )
        if self.image_size % self.spatial_stride:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by trunk spatial stride "
                f"{self.spatial_stride}"
            )
        if not self.static and all(s.kernel[0] == 1 for s in self.trunk + self.head):
            raise ConfigError("at least one stage needs a temporal kernel extent > 1")
        if not self.context_channels:
            raise ConfigError("context_channels must not be empty")

    def to_static(self):
        """Same layout with every temporal kernel set to 1.

        Temporal strides move from the convolutions into max-pools so the
        trunk output shape is unchanged.
        """
        def convert(stage):
            st = stage.stride[0]
            pool = stage.pool
            if st > 1:
                if pool is not None:
                    raise ConfigError("cannot move a temporal stride into an existing pool")
                pool = ((st, 1, 1), (st, 1, 1))
            return StageConfig(
                stage.channels, (1, *stage.kernel[1:]), (1, *stage.stride[1:]), pool
            )

        return dataclasses.replace(
            self,
            trunk=[convert(s) for s in self.trunk],
            head=[convert(s) for s in self.head],
            static=True,
        )


@dataclass
class DetectionConfig:
    num_classes: int = 4
    anchor_scales: tuple = (0.1, 0.25, 0.5)
    anchor_aspects: tuple = (0.5, 1.0, 2.0)
    rpn_channels: int = 64
    pre_nms_top_n: int = 1000
    rpn_nms_threshold: float = 0.7
    # paper keeps the top 300 proposals and the top 300 detections
    post_nms_top_n: int = 300
    roi_size: int = 4
    final_nms_threshold: float = 0.5
    score_floor: float = 0.0
    max_detections: int = 300

    def __post_init__(self):
        if not self.anchor_scales or not self.anchor_aspects:
            raise ConfigError("anchor_scales and anchor_aspects must be non-empty")
        if self.num_classes < 1 or self.roi_size < 1:
            raise ConfigError("num_classes and roi_size must be positive")
        for name in ("rpn_nms_threshold", "final_nms_threshold"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {v}")

    @property
    def anchors_per_cell(self):
        return len(self.anchor_scales) * len(self.anchor_aspects)


@dataclass
class TrainConfig:
    # paper: batches of 3 videos, 500k steps on 11 GPUs; toy defaults below
    base_lr: float = 0.01
    momentum: float = 0.9
    total_steps: int = 4000
    batch_size: int = 2
    seed: int = 0
    augment: bool = True
    class_agnostic: bool = True
    context: bool = False
    static_backbone: bool = False
    rpn_cls_weight: float = 1.0
    rpn_reg_weight: float = 1.0
    cls_weight: float = 1.0
    reg_weight: float = 1.0
    rpn_positives: int = 64
    rpn_negatives: int = 64
    rois_per_image: int = 32
    roi_positive_fraction: float = 0.5
    train_batchnorm: bool = False
    calibrate_batchnorm: bool = True
    grad_clip: float = 10.0

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.total_steps < 1 or self.batch_size < 1:
            raise ConfigError("total_steps and batch_size must be >= 1")


@dataclass
class SynthConfig:
    seed: int = 0
    train_clips: int = 64
    val_clips: int = 32
    frames: int = 16
    image_size: int = 64
    min_actors: int = 1
    max_actors: int = 3
    noise: float = 0.03
    # actor side length as a fraction of the image side
    min_size: float = 0.2
    max_size: float = 0.35
    # horizontal travel over the whole clip, fraction of the image side
    min_travel: float = 0.25
    max_travel: float = 0.4
    # side length growth factor over the whole clip for expanding actors
    growth: float = 1.8

    def __post_init__(self):
        if self.train_clips < 0 or self.val_clips < 0:
            raise ConfigError("clip counts must be non-negative")
        if not 1 <= self.min_actors <= self.max_actors:
            raise ConfigError("need 1 <= min_actors <= max_actors")
        if self.frames < 1 or self.image_size < 4:
            raise ConfigError("frames must be >= 1 and image_size >= 4")


@dataclass
class ExperimentConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.synth.frames != self.backbone.clip_length:
            raise ConfigError(
                f"synth.frames ({self.synth.frames}) must equal backbone.clip_length "
                f"({self.backbone.clip_length})"
            )
        if self.synth.image_size != self.backbone.image_size:
            raise ConfigError(
                f"synth.image_size ({self.synth.image_size}) must equal backbone.image_size "
                f"({self.backbone.image_size})"
            )

    def model_backbone(self):
        """Backbone config with the static-backbone control applied when flagged."""
        if self.train.static_backbone and not self.backbone.static:
            return self.backbone.to_static()
        return self.backbone

    def to_dict(self):
        return _plain(dataclasses.asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def _stage(raw, where):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping")
    known = {f.name for f in dataclasses.fields(StageConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key {where}.{unknown[0]}")
    kwargs = {k: _tuplify(v) for k, v in raw.items()}
    for key in ("kernel", "stride"):
        if key in kwargs and isinstance(kwargs[key], int):
            kwargs[key] = (kwargs[key],) * 3
    return StageConfig(**kwargs)


def _section(cls, raw, where):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key {where}.{unknown[0]}")
    kwargs = {}
    for key, value in raw.items():
        if cls is BackboneConfig and key in ("trunk", "head"):
            kwargs[key] = [_stage(s, f"{where}.{key}[{i}]") for i, s in enumerate(value)]
        elif isinstance(value, list) and key != "context_channels":
            kwargs[key] = _tuplify(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


SECTIONS = {
    "synth": SynthConfig,
    "backbone": BackboneConfig,
    "detection": DetectionConfig,
    "train": TrainConfig,
}


def from_dict(raw):
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]}")
    return ExperimentConfig(
        **{name: _section(cls, raw.get(name), name) for name, cls in SECTIONS.items()}
    )


def load(path):
    with open(path, encoding="utf-8") as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return from_dict(raw)


def dump(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


def override(cfg, section, **values):
    """Copy of ``cfg`` with keys in one section replaced (None values skipped)."""
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return cfg
    return dataclasses.replace(
        cfg, **{section: dataclasses.replace(getattr(cfg, section), **values)}
    )
