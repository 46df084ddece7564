"""Softmax, cross-entropy, and optimizer behaviour."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from exitbench.nn import SGDMomentum, StepDecay, cross_entropy, one_hot, softmax
from exitbench.nn.gradcheck import numeric_grad, rel_error

finite_logits = hnp.arrays(
    np.float64, st.integers(2, 12),
    elements=st.floats(-50, 50, allow_nan=False))


def test_softmax_uniform_on_equal_logits():
    np.testing.assert_allclose(softmax(np.zeros(4)), 0.25)


def test_softmax_survives_huge_logits():
    p = softmax(np.array([1000.0, 0.0]))
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p, [1.0, 0.0], atol=1e-12)


def test_softmax_matches_direct_float64():
    z = np.random.default_rng(0).normal(size=10)
    direct = np.exp(z) / np.exp(z).sum()
    np.testing.assert_allclose(softmax(z), direct, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(finite_logits)
def test_softmax_sums_to_one(z):
    assert softmax(z).sum() == pytest.approx(1.0, abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(finite_logits, st.randoms(use_true_random=False))
def test_softmax_permutation_equivariant(z, rnd):
    perm = np.array(rnd.sample(range(len(z)), len(z)))
    np.testing.assert_allclose(softmax(z)[perm], softmax(z[perm]), atol=1e-12)


def test_cross_entropy_onehot_is_zero():
    logits = np.array([[100.0, 0.0, 0.0]])
    loss, _ = cross_entropy(logits, np.array([0]))
    assert loss[0] == pytest.approx(0.0, abs=1e-9)


def test_cross_entropy_uniform_is_log10():
    loss, _ = cross_entropy(np.zeros((1, 10)), np.array([3]))
    assert loss[0] == pytest.approx(np.log(10), abs=1e-6)


def test_cross_entropy_rejects_out_of_range_label():
    with pytest.raises(ValueError, match="labels outside"):
        cross_entropy(np.zeros((1, 3)), np.array([3]))
    with pytest.raises(ValueError):
        one_hot(np.array([-1]), 3)


def test_cross_entropy_grad_matches_finite_differences():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(4, 6))
    labels = rng.integers(0, 6, size=4)

    def loss():
        ls, _ = cross_entropy(logits, labels)
        return float(ls.mean())

    _, grad = cross_entropy(logits, labels)
    assert rel_error(grad, numeric_grad(loss, logits)) <= 1e-4


def test_cross_entropy_grad_is_probs_minus_onehot():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(3, 5))
    labels = np.array([0, 2, 4])
    _, grad = cross_entropy(logits, labels)
    want = (softmax(logits) - one_hot(labels, 5, dtype=np.float64)) / 3
    np.testing.assert_allclose(grad, want, atol=1e-12)


def test_sgd_plain_step_subtracts_gradient():
    p = np.array([1.0, 2.0])
    opt = SGDMomentum({"p": p}, lr=1.0, momentum=0.0)
    opt.step({"p": np.array([0.5, -0.5])})
    np.testing.assert_allclose(p, [0.5, 2.5])


def test_sgd_zero_grad_leaves_params_unchanged():
    p = np.array([1.0, 2.0])
    opt = SGDMomentum({"p": p}, lr=0.1, momentum=0.9)
    opt.step({"p": np.zeros(2)})
    np.testing.assert_array_equal(p, [1.0, 2.0])


def test_sgd_momentum_two_step_recurrence():
    # v1 = g, v2 = 0.9 g + g = 1.9 g; updates -0.1 g then -0.19 g
    p = np.array([0.0])
    g = np.array([1.0])
    opt = SGDMomentum({"p": p}, lr=0.1, momentum=0.9)
    opt.step({"p": g})
    opt.step({"p": g})
    assert p[0] == pytest.approx(-0.1 - 0.1 * 1.9)


def test_sgd_rejects_bad_hyperparameters():
    with pytest.raises(ValueError):
        SGDMomentum({}, lr=0.0)
    with pytest.raises(ValueError):
        SGDMomentum({}, lr=0.1, momentum=1.0)


def test_step_decay_schedule_boundaries():
    sched = StepDecay(0.1, milestones=[35, 60, 85])
    assert sched.lr_at(0) == pytest.approx(0.1)
    assert sched.lr_at(34) == pytest.approx(0.1)
    assert sched.lr_at(35) == pytest.approx(0.01)
    assert sched.lr_at(60) == pytest.approx(0.001)
    assert sched.lr_at(85) == pytest.approx(0.0001)
    assert sched.lr_at(99) == pytest.approx(0.0001)
