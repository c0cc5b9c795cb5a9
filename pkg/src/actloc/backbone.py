"""Toy I3D analogue: spatiotemporal trunk, keyframe slice, RoI head, scene context."""
import numpy as np

from actloc.nn import Conv3d, FrozenBatchNorm, GlobalAvgPool, MaxPool3d, ReLU, Sequential


def build_stage(stage, c_in, rng):
    layers = [
        ("conv", Conv3d(c_in, stage.channels, stage.kernel, stage.stride, "same", rng=rng)),
        ("bn", FrozenBatchNorm(stage.channels)),
        ("relu", ReLU()),
    ]
    if stage.pool is not None:
        window, stride = stage.pool
        layers.append(("pool", MaxPool3d(window, stride)))
    return Sequential(*layers)


class Trunk(Sequential):
    """Conv/BN/ReLU(/pool) stages from the clip to the feature volume."""

    def __init__(self, cfg, rng):
        stages = []
        c = cfg.in_channels
        for i, stage in enumerate(cfg.trunk):
            stages.append((f"stage{i}", build_stage(stage, c, rng)))
            c = stage.channels
        super().__init__(*stages)
        self.children["stage0"].children["conv"].input_grad = False
        self.cfg = cfg

    def forward(self, clip, train=True):
        expected = (self.cfg.clip_length, self.cfg.image_size, self.cfg.image_size,
                    self.cfg.in_channels)
        if clip.ndim != 5 or clip.shape[1:] != expected:
            raise ValueError(f"clip shape {clip.shape} does not match config (N, *{expected})")
        return super().forward(clip, train=train)


def center_index(t):
    return t // 2


def slice_center_frame(volume):
    """Keyframe slice ``(batch, h', w', c')`` at temporal index floor(T'/2)."""
    return volume[:, center_index(volume.shape[1])]


def slice_center_frame_backward(g, volume_shape):
    out = np.zeros(volume_shape)
    out[:, center_index(volume_shape[1])] = g
    return out


class Head(Sequential):
    """Two 3D stages over RoI volumes, then global average pooling."""

    def __init__(self, cfg, rng):
        stages = []
        c = cfg.trunk[-1].channels
        for i, stage in enumerate(cfg.head):
            stages.append((f"stage{i}", build_stage(stage, c, rng)))
            c = stage.channels
        stages.append(("gap", GlobalAvgPool()))
        super().__init__(*stages)


class ContextNet(Sequential):
    """Small 2D conv stack over the raw keyframe, globally pooled.

    Stands in for the image-level ``global_pool`` features of a separate
    image network; 2D convolutions are run as conv3d on a one-frame volume.
    """

    def __init__(self, cfg, rng):
        stages = []
        c = cfg.in_channels
        for i, channels in enumerate(cfg.context_channels):
            conv = Conv3d(c, channels, (1, 3, 3), (1, 2, 2), rng=rng)
            conv.input_grad = i > 0
            stages.append((f"conv{i}", conv))
            stages.append((f"bn{i}", FrozenBatchNorm(channels)))
            stages.append((f"relu{i}", ReLU()))
            c = channels
        stages.append(("gap", GlobalAvgPool()))
        super().__init__(*stages)

    def forward(self, keyframe, train=True):
        if keyframe.ndim != 4:
            raise ValueError(f"keyframe must be rank 4 (N, H, W, C), got {keyframe.shape}")
        return super().forward(keyframe[:, None], train=train)

    def backward(self, g):
        # the raw keyframe needs no gradient
        super().backward(g)
