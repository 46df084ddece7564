"""Test-time batch-norm statistics adaptation.

One full pass over a shifted data split in train-statistics mode with
learning disabled; each batch-norm layer's running mean and variance
are replaced by the average of its per-batch statistics. Nothing else
about the model changes.
"""

import dataclasses

import numpy as np


@dataclasses.dataclass(frozen=True)
class AdaptConfig:
    batch_size: int = 128

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


def adapt_batchnorm(model, images, config: AdaptConfig = AdaptConfig()):
    """Recompute BN running statistics from `images` (already normalized
    the same way training data was). Mutates and returns `model`.

    Batches are consecutive `batch_size` chunks; a trailing partial
    chunk is dropped so every batch contributes equally to the average.
    Fails if the set holds fewer samples than one batch.
    """
    bns = model.bn_layers()
    if not bns:
        raise ValueError("model has no batch-norm layers to adapt")
    n_batches = len(images) // config.batch_size
    if n_batches == 0:
        raise ValueError(
            f"adaptation set of {len(images)} samples is smaller than one "
            f"batch ({config.batch_size})")

    sinks = []
    for bn in bns:
        bn.stat_sink = []
        sinks.append(bn)
    try:
        for b in range(n_batches):
            batch = images[b * config.batch_size:(b + 1) * config.batch_size]
            model.forward_all_exits(batch, train=True)
        for bn in bns:
            means = np.stack([m for m, _ in bn.stat_sink])
            variances = np.stack([v for _, v in bn.stat_sink])
            bn.running_mean[...] = means.mean(axis=0).astype(
                bn.running_mean.dtype)
            bn.running_var[...] = variances.mean(axis=0).astype(
                bn.running_var.dtype)
    finally:
        for bn in sinks:
            bn.stat_sink = None
    return model
