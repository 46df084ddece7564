"""Shared builders for training-scale fixtures."""

import numpy as np

from exitbench.model import GlobalPoolHead, MixedPoolHead, MultiExitModel
from exitbench.nn import BatchNorm2d, Conv2d, MaxPool2d, ReLU


def make_small_model(num_classes=10, seed=0, dtype=np.float32):
    """Two conv blocks on 32x32 input with one internal exit; big enough
    to learn, small enough for per-test training runs."""
    rng = np.random.default_rng(seed)
    backbone = [
        Conv2d(3, 8, 3, padding=1, rng=rng, dtype=dtype),
        BatchNorm2d(8, dtype=dtype),
        ReLU(),
        MaxPool2d(2),
        Conv2d(8, 12, 3, padding=1, rng=rng, dtype=dtype),
        BatchNorm2d(12, dtype=dtype),
        ReLU(),
        MaxPool2d(2),
    ]
    heads = [MixedPoolHead(8, 16, num_classes, rng=rng, dtype=dtype),
             GlobalPoolHead(12, 8, num_classes, rng=rng, dtype=dtype)]
    return MultiExitModel(backbone, heads, [3, 7], (3, 32, 32), num_classes)
