from actloc.nn.layers import (
    Conv3d,
    ForwardRecordError,
    FrozenBatchNorm,
    GlobalAvgPool,
    Linear,
    MaxPool3d,
    Module,
    ReLU,
    Sequential,
    Sigmoid,
)

__all__ = [
    "Conv3d",
    "ForwardRecordError",
    "FrozenBatchNorm",
    "GlobalAvgPool",
    "Linear",
    "MaxPool3d",
    "Module",
    "ReLU",
    "Sequential",
    "Sigmoid",
]
