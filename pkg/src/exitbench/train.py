"""Joint training of a multi-exit model with per-exit weighted losses."""

import dataclasses

import numpy as np

from .data import augment_batch, compute_norm_stats, normalize
from .nn import SGDMomentum, StepDecay, cross_entropy
from .seeding import derive_rng


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr: float = 0.1
    momentum: float = 0.9
    decay_factor: float = 0.1
    decay_epochs: tuple = (35, 60, 85)
    batch_size: int = 128
    seed: int = 0
    exit_weights: tuple = None  # None -> per-exit cost fraction, final 1.0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        decays = tuple(self.decay_epochs)
        if any(b <= a for a, b in zip(decays, decays[1:])):
            raise ValueError(f"decay epochs must be strictly increasing: {decays}")
        if self.epochs and decays and decays[-1] >= self.epochs:
            raise ValueError(
                f"decay epochs {decays} must all precede epochs={self.epochs}")
        object.__setattr__(self, "decay_epochs", decays)
        if self.exit_weights is not None:
            object.__setattr__(self, "exit_weights",
                               tuple(float(w) for w in self.exit_weights))


def resolve_exit_weights(model, config):
    if config.exit_weights is not None:
        if len(config.exit_weights) != model.num_exits:
            raise ValueError(
                f"{len(config.exit_weights)} exit weights for "
                f"{model.num_exits} exits")
        return np.asarray(config.exit_weights, dtype=np.float64)
    weights = np.asarray(model.exit_cost_fractions(), dtype=np.float64)
    weights[-1] = 1.0
    return weights


def evaluate_per_exit(model, images, labels, batch_size=256):
    """Eval-mode accuracy of every exit over a normalized image set."""
    hits = np.zeros(model.num_exits, dtype=np.int64)
    for start in range(0, len(images), batch_size):
        batch = images[start:start + batch_size]
        logits = model.forward_all_exits(batch, train=False)
        for i, z in enumerate(logits):
            hits[i] += int((np.argmax(z, axis=1) ==
                            labels[start:start + batch_size]).sum())
    return hits / len(images)


def _epoch_batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_joint(model, train_set, val_set, config: TrainConfig):
    """SGD over the weighted sum of per-exit cross-entropies.

    Augmentation is random crop (pad 4) + horizontal flip on raw images,
    then per-channel normalization with statistics from the training
    split. Returns (model, log): one log entry per epoch with the lr,
    mean training loss, and per-exit train/val accuracy.
    """
    log = []
    if config.epochs == 0:
        return model, log
    weights = resolve_exit_weights(model, config)
    mean, std = compute_norm_stats(train_set.images)
    train_eval = normalize(train_set.images, mean, std)
    val_eval = normalize(val_set.images, mean, std)
    optimizer = SGDMomentum(model.named_params(), config.lr, config.momentum)
    schedule = StepDecay(config.lr, config.decay_epochs, config.decay_factor)

    for epoch in range(config.epochs):
        optimizer.lr = schedule.lr_at(epoch)
        shuffle_rng = derive_rng(config.seed, "shuffle", epoch)
        losses = []
        for b, idx in enumerate(_epoch_batches(len(train_set),
                                               config.batch_size,
                                               shuffle_rng)):
            aug_rng = derive_rng(config.seed, "augment", epoch, b)
            batch = augment_batch(train_set.images[idx], aug_rng)
            batch = normalize(batch, mean, std)
            labels = train_set.labels[idx]

            logits = model.forward_all_exits(batch, train=True)
            total = 0.0
            grads = []
            for i, z in enumerate(logits):
                loss_i, grad_i = cross_entropy(z, labels)
                total += weights[i] * float(loss_i.mean())
                grads.append(weights[i] * grad_i)
            if not np.isfinite(total):
                raise RuntimeError(
                    f"training loss diverged (epoch {epoch}, batch {b}): {total}")
            model.backward(grads)
            optimizer.step(model.named_grads())
            losses.append(total)

        log.append({
            "epoch": epoch,
            "lr": optimizer.lr,
            "train_loss": float(np.mean(losses)),
            "train_acc": evaluate_per_exit(
                model, train_eval, train_set.labels).tolist(),
            "val_acc": evaluate_per_exit(
                model, val_eval, val_set.labels).tolist(),
        })
    return model, log
