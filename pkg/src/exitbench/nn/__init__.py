from .layers import (
    AvgPool2d,
    BatchNorm2d,
    Conv2d,
    Flatten,
    Layer,
    Linear,
    MaxPool2d,
    ReLU,
    ResidualBlock,
    ShapeError,
    build_layer,
    layer_kinds,
)
from .functional import accuracy, cross_entropy, log_softmax, one_hot, softmax
from .optim import SGDMomentum, StepDecay

__all__ = [
    "AvgPool2d", "BatchNorm2d", "Conv2d", "Flatten", "Layer", "Linear",
    "MaxPool2d", "ReLU", "ResidualBlock", "ShapeError", "build_layer",
    "layer_kinds", "accuracy", "cross_entropy", "log_softmax", "one_hot",
    "softmax", "SGDMomentum", "StepDecay",
]
