"""AugMix-style augmentation with a per-exit consistency loss.

The op set is geometric/photometric only and shares nothing with the
test-time corruption kinds, so training never sees the shift it is
evaluated against.
"""

import dataclasses

import numpy as np

from .data import augment_batch, compute_norm_stats, normalize
from .nn import SGDMomentum, StepDecay, cross_entropy, softmax
from .seeding import derive_rng, derive_seed
from .train import evaluate_per_exit, resolve_exit_weights, _epoch_batches

LOG_CLAMP = 1e-12


@dataclasses.dataclass(frozen=True)
class AugMixConfig:
    width: int = 3
    depth_min: int = 1
    depth_max: int = 3
    alpha: float = 1.0
    jsd_weight: float = 12.0

    def __post_init__(self):
        if self.width < 1:
            raise ValueError(f"width must be >= 1, got {self.width}")
        if not 1 <= self.depth_min <= self.depth_max:
            raise ValueError(
                f"need 1 <= depth_min <= depth_max, got "
                f"{self.depth_min}..{self.depth_max}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.jsd_weight < 0:
            raise ValueError(f"jsd_weight must be >= 0, got {self.jsd_weight}")


# ---- augmentation ops (label-preserving, range-preserving) ------------


def _affine_nearest(image, a, b, c, d, tx=0.0, ty=0.0):
    """Inverse-map the output grid through [[a, b], [c, d]] + (tx, ty)
    about the image center, sampling nearest source pixels with edge
    clamping."""
    _, h, w = image.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.mgrid[0:h, 0:w]
    ys = ys - cy
    xs = xs - cx
    src_y = a * ys + b * xs + cy + ty
    src_x = c * ys + d * xs + cx + tx
    iy = np.clip(np.rint(src_y).astype(np.int64), 0, h - 1)
    ix = np.clip(np.rint(src_x).astype(np.int64), 0, w - 1)
    return image[:, iy, ix]


def op_rotate(image, rng):
    theta = np.deg2rad(rng.uniform(-30.0, 30.0))
    cos, sin = np.cos(theta), np.sin(theta)
    return _affine_nearest(image, cos, -sin, sin, cos)


def op_translate_x(image, rng):
    return _affine_nearest(image, 1, 0, 0, 1, tx=rng.integers(-4, 5))


def op_translate_y(image, rng):
    return _affine_nearest(image, 1, 0, 0, 1, ty=rng.integers(-4, 5))


def op_shear_x(image, rng):
    return _affine_nearest(image, 1, 0, rng.uniform(-0.3, 0.3), 1)


def op_shear_y(image, rng):
    return _affine_nearest(image, 1, rng.uniform(-0.3, 0.3), 0, 1)


def op_posterize(image, rng):
    bits = int(rng.integers(4, 8))
    levels = (1 << bits) - 1
    return np.floor(image * levels + 0.5) / levels


def op_solarize(image, rng):
    threshold = rng.uniform(0.5, 1.0)
    return np.where(image >= threshold, 1.0 - image, image)


def op_autocontrast(image, rng):
    out = np.empty_like(image)
    for ch in range(image.shape[0]):
        lo, hi = image[ch].min(), image[ch].max()
        out[ch] = (image[ch] - lo) / (hi - lo) if hi > lo else image[ch]
    return out


def op_equalize(image, rng):
    """Histogram equalization per channel over a 256-level quantization."""
    out = np.empty_like(image)
    for ch in range(image.shape[0]):
        q = np.clip((image[ch] * 255.0).astype(np.int64), 0, 255)
        hist = np.bincount(q.ravel(), minlength=256)
        cdf = np.cumsum(hist) / q.size
        occupied = np.nonzero(hist)[0]
        cdf_min = cdf[occupied[0]]
        if cdf_min >= 1.0:  # constant channel
            out[ch] = image[ch]
        else:
            lut = (cdf - cdf_min) / (1.0 - cdf_min)
            out[ch] = lut[q]
    return out


AUGMIX_OPS = (
    op_rotate, op_translate_x, op_translate_y, op_shear_x, op_shear_y,
    op_posterize, op_solarize, op_autocontrast, op_equalize,
)
AUGMIX_OP_NAMES = tuple(f.__name__[3:] for f in AUGMIX_OPS)


def augmix_sample(image, config: AugMixConfig, seed, ops=AUGMIX_OPS):
    """Mix `width` random op chains with Dirichlet weights, then blend
    with the original through a Beta(alpha, alpha) coefficient."""
    image = np.asarray(image, dtype=np.float64)
    rng = np.random.default_rng(seed)
    chain_weights = rng.dirichlet([config.alpha] * config.width)
    blend = rng.beta(config.alpha, config.alpha)
    mixed = np.zeros_like(image)
    for c in range(config.width):
        depth = int(rng.integers(config.depth_min, config.depth_max + 1))
        view = image
        for _ in range(depth):
            op = ops[int(rng.integers(len(ops)))]
            view = op(view, rng)
        mixed += chain_weights[c] * view
    return np.clip(image + blend * (mixed - image), 0.0, 1.0)


# ---- Jensen-Shannon consistency ---------------------------------------


def jsd_loss(p_clean, p_aug1, p_aug2):
    """Mean JSD over a batch (or one triple) of probability vectors:
    (KL(p_c||m) + KL(p_1||m) + KL(p_2||m)) / 3 with m the mixture mean.
    Always in [0, ln 3]."""
    ps = [np.atleast_2d(np.asarray(p, dtype=np.float64))
          for p in (p_clean, p_aug1, p_aug2)]
    m = (ps[0] + ps[1] + ps[2]) / 3.0
    log_m = np.log(np.maximum(m, LOG_CLAMP))
    total = np.zeros(ps[0].shape[0])
    for p in ps:
        log_p = np.log(np.maximum(p, LOG_CLAMP))
        total += np.sum(p * (log_p - log_m), axis=1)
    return float(np.mean(total / 3.0))


def jsd_value_and_logit_grads(z_clean, z_aug1, z_aug2):
    """Mean JSD of the three softmax distributions plus its gradient
    with respect to each view's logits (already divided by batch size)."""
    zs = (z_clean, z_aug1, z_aug2)
    ps = [softmax(np.asarray(z, dtype=np.float64)) for z in zs]
    n = ps[0].shape[0]
    m = (ps[0] + ps[1] + ps[2]) / 3.0
    log_m = np.log(np.maximum(m, LOG_CLAMP))
    value = 0.0
    grads = []
    for p in ps:
        log_p = np.log(np.maximum(p, LOG_CLAMP))
        diff = log_p - log_m
        value += float(np.sum(p * diff)) / (3.0 * n)
        # d/dz of mean KL(p||m)/3 through the softmax of this view
        inner = np.sum(p * diff, axis=1, keepdims=True)
        grads.append((p * (diff - inner)) / (3.0 * n))
    return value, grads


# ---- training ---------------------------------------------------------


def _accumulate(acc, named_grads):
    for name, g in named_grads.items():
        if name in acc:
            acc[name] += g
        else:
            acc[name] = g.copy()


def _divert_bn_stats(model):
    sinks = []
    for bn in model.bn_layers():
        sinks.append((bn, bn.stat_sink))
        bn.stat_sink = []
    return sinks


def _restore_bn_stats(sinks):
    for bn, prev in sinks:
        bn.stat_sink = prev


def train_augmix_sdn(model, train_set, val_set, config, augmix: AugMixConfig):
    """Joint training where every batch adds a per-exit consistency term:
    loss = sum_i w_i * [CE_i(clean) + jsd_weight * JSD_i(clean, a1, a2)].

    Each batch runs three forward passes (clean view and two independent
    augmented views); gradients from the three views accumulate before
    the optimizer step. With jsd_weight = 0 the per-batch loss equals
    train_joint's on the same seed, because the clean view follows the
    identical crop/flip stream.
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
            clean = augment_batch(train_set.images[idx], aug_rng)
            views = [clean.astype(np.float64)]
            for v in (1, 2):
                views.append(np.stack([
                    augmix_sample(clean[j], augmix,
                                  derive_seed(config.seed, "augmix",
                                              epoch, b, v, int(idx[j])))
                    for j in range(len(idx))]))
            views = [normalize(v.astype(np.float32), mean, std)
                     for v in views]
            labels = train_set.labels[idx]

            # forward all three views first; JSD couples their outputs
            logits_clean = model.forward_all_exits(views[0], train=True)
            ce_terms = [cross_entropy(z, labels) for z in logits_clean]
            logits_a1 = model.forward_all_exits(views[1], train=True)
            logits_a2 = model.forward_all_exits(views[2], train=True)

            total = 0.0
            view_grads = [[], [], []]
            for i in range(model.num_exits):
                ce_loss, ce_grad = ce_terms[i]
                jsd, (g_c, g_1, g_2) = jsd_value_and_logit_grads(
                    logits_clean[i], logits_a1[i], logits_a2[i])
                w, lam = weights[i], augmix.jsd_weight
                total += w * (float(ce_loss.mean()) + lam * jsd)
                view_grads[0].append(w * (ce_grad + lam * g_c))
                view_grads[1].append(w * lam * g_1)
                view_grads[2].append(w * lam * g_2)
            if not np.isfinite(total):
                raise RuntimeError(
                    f"training loss diverged (epoch {epoch}, batch {b}): {total}")

            # the cache holds the last forward, so walk views backward,
            # re-running the earlier forwards with BN updates diverted
            acc = {}
            model.backward(view_grads[2])
            _accumulate(acc, model.named_grads())
            sinks = _divert_bn_stats(model)
            try:
                model.forward_all_exits(views[1], train=True)
                model.backward(view_grads[1])
                _accumulate(acc, model.named_grads())
                model.forward_all_exits(views[0], train=True)
                model.backward(view_grads[0])
                _accumulate(acc, model.named_grads())
            finally:
                _restore_bn_stats(sinks)
            optimizer.step(acc)
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
