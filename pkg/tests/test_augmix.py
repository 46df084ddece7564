"""AugMix ops, the consistency loss, and its training reduction."""

import math

import numpy as np
import pytest
from conftest import make_small_model

from exitbench.augmix import (
    AUGMIX_OP_NAMES,
    AUGMIX_OPS,
    AugMixConfig,
    augmix_sample,
    jsd_loss,
    jsd_value_and_logit_grads,
    train_augmix_sdn,
)
from exitbench.corruptions import CORRUPTION_NAMES
from exitbench.data import gen_minishapes, split_validation
from exitbench.train import TrainConfig, train_joint


def sample_image(seed=0):
    return np.random.default_rng(seed).uniform(size=(3, 16, 16))


def test_config_validation():
    AugMixConfig()
    with pytest.raises(ValueError, match="width"):
        AugMixConfig(width=0)
    with pytest.raises(ValueError, match="depth"):
        AugMixConfig(depth_min=2, depth_max=1)
    with pytest.raises(ValueError, match="alpha"):
        AugMixConfig(alpha=0.0)
    with pytest.raises(ValueError, match="jsd_weight"):
        AugMixConfig(jsd_weight=-1.0)


def test_op_set_disjoint_from_corruptions():
    assert not set(AUGMIX_OP_NAMES) & set(CORRUPTION_NAMES)
    assert len(AUGMIX_OPS) == 9


def test_every_op_preserves_shape_and_range():
    img = sample_image(1)
    for op in AUGMIX_OPS:
        before = img.copy()
        out = op(img, np.random.default_rng(5))
        assert out.shape == img.shape
        assert out.min() >= -1e-12
        assert out.max() <= 1.0 + 1e-12
        np.testing.assert_array_equal(img, before)  # input untouched


def test_ops_are_deterministic_given_rng_state():
    img = sample_image(2)
    for op in AUGMIX_OPS:
        a = op(img, np.random.default_rng(7))
        b = op(img, np.random.default_rng(7))
        np.testing.assert_array_equal(a, b)


def test_augmix_sample_determinism_and_variation():
    img = sample_image(3)
    config = AugMixConfig()
    a = augmix_sample(img, config, seed=11)
    b = augmix_sample(img, config, seed=11)
    c = augmix_sample(img, config, seed=12)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_identity_ops_reproduce_the_image():
    img = sample_image(4)
    config = AugMixConfig(width=1)
    out = augmix_sample(img, config, seed=0,
                        ops=(lambda image, rng: image,))
    np.testing.assert_allclose(out, img, atol=1e-12)


def test_mean_deviation_bounded_and_nonzero():
    img = sample_image(5)
    config = AugMixConfig()
    devs = [np.abs(augmix_sample(img, config, seed=s) - img).mean()
            for s in range(40)]
    assert max(devs) > 0.0
    assert np.mean(devs) < 0.5


# ---- JSD --------------------------------------------------------------


def entropy_form_jsd(p, q, r):
    """Independent oracle: JSD = H(m) - (H(p)+H(q)+H(r))/3."""
    def h(d):
        return -sum(x * math.log(x) for x in d if x > 0)
    m = [(a + b + c) / 3 for a, b, c in zip(p, q, r)]
    return h(m) - (h(p) + h(q) + h(r)) / 3


def test_jsd_identical_distributions_is_zero():
    p = np.array([0.2, 0.3, 0.5])
    assert jsd_loss(p, p, p) == pytest.approx(0.0, abs=1e-12)


def test_jsd_disjoint_onehots_is_ln3():
    p = np.array([1.0, 0.0, 0.0])
    q = np.array([0.0, 1.0, 0.0])
    r = np.array([0.0, 0.0, 1.0])
    assert jsd_loss(p, q, r) == pytest.approx(math.log(3.0), abs=1e-9)


def test_jsd_matches_entropy_form_oracle():
    rng = np.random.default_rng(6)
    for _ in range(50):
        trip = [rng.dirichlet(np.ones(5)) for _ in range(3)]
        got = jsd_loss(*trip)
        exp = entropy_form_jsd(*[list(t) for t in trip])
        assert got == pytest.approx(exp, abs=1e-6)
        assert -1e-12 <= got <= math.log(3.0) + 1e-9


def test_jsd_symmetric_in_arguments():
    rng = np.random.default_rng(7)
    trip = [rng.dirichlet(np.ones(4)) for _ in range(3)]
    vals = {round(jsd_loss(trip[i], trip[j], trip[k]), 12)
            for i, j, k in [(0, 1, 2), (1, 2, 0), (2, 0, 1),
                            (0, 2, 1), (1, 0, 2), (2, 1, 0)]}
    assert len(vals) == 1


def test_jsd_batch_mean_matches_per_row():
    rng = np.random.default_rng(8)
    rows = [[rng.dirichlet(np.ones(6)) for _ in range(3)] for _ in range(5)]
    batch = [np.stack([r[v] for r in rows]) for v in range(3)]
    per_row = np.mean([jsd_loss(*r) for r in rows])
    assert jsd_loss(*batch) == pytest.approx(per_row, abs=1e-12)


def test_jsd_logit_grads_match_finite_differences():
    rng = np.random.default_rng(9)
    logits = [rng.normal(size=(3, 4)) for _ in range(3)]
    value, grads = jsd_value_and_logit_grads(*logits)
    assert value == pytest.approx(
        jsd_loss(*[np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
                   for z in logits]), abs=1e-9)
    h = 1e-6
    for v in range(3):
        numeric = np.zeros_like(logits[v])
        for idx in np.ndindex(logits[v].shape):
            orig = logits[v][idx]
            logits[v][idx] = orig + h
            up, _ = jsd_value_and_logit_grads(*logits)
            logits[v][idx] = orig - h
            down, _ = jsd_value_and_logit_grads(*logits)
            logits[v][idx] = orig
            numeric[idx] = (up - down) / (2 * h)
        np.testing.assert_allclose(grads[v], numeric, atol=1e-7)


# ---- training ---------------------------------------------------------


@pytest.fixture(scope="module")
def shapes_splits():
    data = gen_minishapes(seed=200, n=96, num_classes=10)
    return split_validation(data, 16, seed=200)


def test_zero_jsd_weight_reduces_to_train_joint(shapes_splits):
    train, val = shapes_splits
    config = TrainConfig(epochs=2, lr=0.05, batch_size=16, seed=5,
                         decay_epochs=())
    plain = make_small_model(seed=21)
    _, plain_log = train_joint(plain, train, val, config)
    mixed = make_small_model(seed=21)
    _, mixed_log = train_augmix_sdn(mixed, train, val, config,
                                    AugMixConfig(jsd_weight=0.0))
    assert [e["train_loss"] for e in mixed_log] == \
        [e["train_loss"] for e in plain_log]
    pa, pb = plain.named_params(), mixed.named_params()
    for name in pa:
        np.testing.assert_array_equal(pa[name], pb[name], err_msg=name)


def test_augmix_training_runs_and_logs(shapes_splits):
    train, val = shapes_splits
    config = TrainConfig(epochs=2, lr=0.05, batch_size=16, seed=6,
                         decay_epochs=())
    model = make_small_model(seed=22)
    _, log = train_augmix_sdn(model, train, val, config, AugMixConfig())
    assert len(log) == 2
    for entry in log:
        assert np.isfinite(entry["train_loss"])
        assert len(entry["val_acc"]) == model.num_exits


def test_augmix_training_deterministic(shapes_splits):
    train, val = shapes_splits
    config = TrainConfig(epochs=1, lr=0.05, batch_size=16, seed=7,
                         decay_epochs=())
    results = []
    for _ in range(2):
        model = make_small_model(seed=23)
        _, log = train_augmix_sdn(model, train, val, config, AugMixConfig())
        results.append((model.named_params(), log))
    for k in results[0][0]:
        np.testing.assert_array_equal(results[0][0][k], results[1][0][k])
    assert results[0][1] == results[1][1]
