"""Metric implementations vs naive double-loop references."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exitbench.metrics import (
    EvalUniverse,
    MetricsReport,
    build_metrics_report,
    correct_count_histogram,
    correctness_matrix,
    first_correct_exit,
    inconsistency,
    overthinking_set,
    per_exit_rmsce,
    rms_calibration_error,
    underthinking_set,
    ut_ot_percentages,
)
from exitbench.strategies import ExitDecision, StrategyConfig, apply_strategy
from exitbench.traces import TraceMatrix, TraceRecord


def records_from_correctness(correct, num_classes=6):
    """One record per row; argmax hits the label exactly where True."""
    correct = np.asarray(correct, dtype=bool)
    n, e = correct.shape
    cost = np.concatenate([np.linspace(0.2, 0.9, e - 1), [1.0]])
    recs = []
    for i in range(n):
        label = i % num_classes
        logits = np.zeros((e, num_classes), dtype=np.float32)
        for j in range(e):
            logits[j, label if correct[i, j] else (label + 1) % num_classes] = 3.0
        recs.append(TraceRecord(i, label, logits, cost, "clean"))
    return recs


def decisions_at(matrix, exits):
    """Fixed decisions, one chosen exit index per sample."""
    out = []
    for i, e in enumerate(exits):
        pred = int(np.argmax(matrix.logits[i, e - 1]))
        out.append(ExitDecision(matrix.ids[i], int(e), pred,
                                1.0, float(matrix.cost[e - 1])))
    return out


# ---- universe ---------------------------------------------------------


def test_first_correct_exit_basics():
    assert first_correct_exit(np.array([False, True, False])) == 2
    assert first_correct_exit(np.array([True, True])) == 1
    assert first_correct_exit(np.array([False, False])) is None


def test_universe_membership_and_oracle_accuracy():
    correct = np.array([
        [0, 0, 1, 1],
        [0, 0, 0, 0],
        [1, 0, 0, 1],
        [0, 0, 0, 1],
    ], dtype=bool)
    matrix = TraceMatrix(records_from_correctness(correct))
    uni = EvalUniverse.from_matrix(matrix)
    np.testing.assert_array_equal(uni.in_O, [True, False, True, True])
    np.testing.assert_array_equal(uni.first_correct, [3, 0, 1, 4])
    assert uni.oracle_accuracy == pytest.approx(3 / 4)


def test_universe_from_records_matches_from_matrix():
    rng = np.random.default_rng(0)
    correct = rng.random((40, 5)) < 0.4
    recs = records_from_correctness(correct)
    a = EvalUniverse.from_matrix(TraceMatrix(recs))
    b = EvalUniverse.from_records(recs)
    np.testing.assert_array_equal(a.in_O, b.in_O)
    np.testing.assert_array_equal(a.first_correct, b.first_correct)


# ---- UT / OT ----------------------------------------------------------


def brute_ut_ot(correct, exits):
    """Double loop over samples straight from the definitions."""
    ut, ot = set(), set()
    for i in range(correct.shape[0]):
        first = None
        for j in range(correct.shape[1]):
            if correct[i, j]:
                first = j + 1
                break
        if first is None:
            continue
        chosen = exits[i]
        if chosen < first:
            ut.add(i)
        elif chosen > first and not correct[i, chosen - 1]:
            ot.add(i)
    return ut, ot


def test_ut_ot_hand_example():
    correct = np.array([
        [0, 1, 1],   # first correct at 2
        [0, 1, 0],   # first correct at 2, wrong at 3
        [1, 1, 1],
        [0, 0, 0],   # outside O
    ], dtype=bool)
    matrix = TraceMatrix(records_from_correctness(correct))
    uni = EvalUniverse.from_matrix(matrix)
    decisions = decisions_at(matrix, [1, 3, 1, 2])
    assert underthinking_set(decisions, uni) == {0}
    assert overthinking_set(decisions, uni) == {1}
    ut, ot = ut_ot_percentages(decisions, uni)
    assert ut == pytest.approx(100 / 3)
    assert ot == pytest.approx(100 / 3)


def test_ut_ot_match_double_loop_on_random_instances():
    rng = np.random.default_rng(1)
    for trial in range(30):
        correct = rng.random((50, 6)) < rng.uniform(0.2, 0.7)
        exits = rng.integers(1, 7, size=50)
        matrix = TraceMatrix(records_from_correctness(correct))
        uni = EvalUniverse.from_matrix(matrix)
        decisions = decisions_at(matrix, exits)
        exp_ut, exp_ot = brute_ut_ot(correct, exits)
        assert underthinking_set(decisions, uni) == exp_ut, trial
        assert overthinking_set(decisions, uni) == exp_ot, trial


def test_ut_and_ot_are_disjoint():
    rng = np.random.default_rng(2)
    correct = rng.random((200, 7)) < 0.4
    matrix = TraceMatrix(records_from_correctness(correct))
    uni = EvalUniverse.from_matrix(matrix)
    decisions = decisions_at(matrix, rng.integers(1, 8, size=200))
    ut = underthinking_set(decisions, uni)
    ot = overthinking_set(decisions, uni)
    assert not (ut & ot)


def test_oracle_decisions_produce_no_ut_or_ot():
    rng = np.random.default_rng(3)
    correct = rng.random((80, 5)) < 0.5
    recs = records_from_correctness(correct)
    uni = EvalUniverse.from_records(recs)
    decisions = apply_strategy(recs, StrategyConfig("oracle"))
    assert underthinking_set(decisions, uni) == set()
    assert overthinking_set(decisions, uni) == set()


def test_monotone_correctness_cannot_overthink():
    rng = np.random.default_rng(4)
    firsts = rng.integers(1, 6, size=60)
    correct = np.zeros((60, 5), dtype=bool)
    for i, f in enumerate(firsts):
        correct[i, f - 1:] = True
    matrix = TraceMatrix(records_from_correctness(correct))
    uni = EvalUniverse.from_matrix(matrix)
    decisions = decisions_at(matrix, rng.integers(1, 6, size=60))
    assert overthinking_set(decisions, uni) == set()


def test_empty_universe_gives_zero_percentages():
    correct = np.zeros((5, 3), dtype=bool)
    matrix = TraceMatrix(records_from_correctness(correct))
    uni = EvalUniverse.from_matrix(matrix)
    decisions = decisions_at(matrix, [1] * 5)
    assert ut_ot_percentages(decisions, uni) == (0.0, 0.0)


def test_missing_decisions_for_universe_members_error():
    correct = np.array([[True, True]], dtype=bool)
    uni = EvalUniverse.from_records(records_from_correctness(correct))
    with pytest.raises(ValueError, match="missing"):
        underthinking_set([], uni)


# ---- calibration ------------------------------------------------------


def brute_rmsce(confidences, correct, bins):
    order = np.lexsort((correct, confidences))
    total = 0.0
    n = len(confidences)
    for chunk in np.array_split(order, min(bins, n)):
        conf = float(np.mean(confidences[chunk]))
        acc = float(np.mean(correct[chunk]))
        total += (len(chunk) / n) * (conf - acc) ** 2
    return math.sqrt(total)


def test_rmsce_all_confident_all_correct_is_zero():
    conf = np.ones(100)
    correct = np.ones(100, dtype=bool)
    assert rms_calibration_error(conf, correct) == 0.0


def test_rmsce_all_confident_all_wrong_is_one():
    conf = np.ones(64)
    correct = np.zeros(64, dtype=bool)
    assert rms_calibration_error(conf, correct) == pytest.approx(1.0)


def test_rmsce_calibrated_sampler_is_small():
    rng = np.random.default_rng(5)
    n = 10_000
    conf = rng.uniform(0.5, 1.0, size=n)
    correct = rng.random(n) < conf
    assert rms_calibration_error(conf, correct) <= 0.02


def test_rmsce_matches_reference_binner():
    rng = np.random.default_rng(6)
    for _ in range(10):
        n = int(rng.integers(5, 400))
        conf = rng.random(n)
        correct = rng.random(n) < 0.5
        got = rms_calibration_error(conf, correct)
        assert got == pytest.approx(brute_rmsce(conf, correct, 15), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from([0.25, 0.5, 0.75, 1.0]),
                min_size=2, max_size=40),
       st.randoms(use_true_random=False))
def test_rmsce_invariant_under_permutation_with_ties(confs, rnd):
    conf = np.array(confs)
    correct = np.array([rnd.random() < 0.5 for _ in confs])
    base = rms_calibration_error(conf, correct)
    perm = list(range(len(confs)))
    rnd.shuffle(perm)
    again = rms_calibration_error(conf[perm], correct[perm])
    assert again == pytest.approx(base, abs=1e-12)


def test_rmsce_bounds_and_errors():
    rng = np.random.default_rng(7)
    conf = rng.random(50)
    correct = rng.random(50) < 0.5
    assert 0.0 <= rms_calibration_error(conf, correct) <= 1.0
    with pytest.raises(ValueError, match="empty"):
        rms_calibration_error(np.empty(0), np.empty(0, dtype=bool))
    with pytest.raises(ValueError, match="bins"):
        rms_calibration_error(conf, correct, bins=0)


def test_per_exit_rmsce_agrees_with_scalar_path():
    rng = np.random.default_rng(8)
    logits = rng.normal(size=(60, 4, 5)).astype(np.float32)
    labels = rng.integers(5, size=60)
    vals = per_exit_rmsce(logits, labels)
    assert len(vals) == 4
    z = logits[:, 2, :].astype(np.float64)
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    conf = p.max(axis=1)
    correct = p.argmax(axis=1) == labels
    assert vals[2] == pytest.approx(rms_calibration_error(conf, correct))


# ---- inconsistency ----------------------------------------------------


def brute_inconsistency(correct):
    n, e = correct.shape
    out = np.zeros(e)
    for j in range(e):
        num = den = 0
        for i in range(n):
            if correct[i, j]:
                den += 1
                if any(not correct[i, l] for l in range(j + 1, e)):
                    num += 1
        out[j] = num / den if den else np.nan
    return out


def test_inconsistency_single_sample():
    correct = np.array([[True, False, True, False]])
    got = inconsistency(correct)
    np.testing.assert_allclose(got[[0, 2]], [1.0, 1.0])
    assert math.isnan(got[1])
    assert got[3] == 0.0


def test_inconsistency_monotone_is_zero():
    correct = np.array([
        [0, 1, 1, 1],
        [1, 1, 1, 1],
        [0, 0, 1, 1],
    ], dtype=bool)
    got = inconsistency(correct)
    np.testing.assert_allclose(np.nan_to_num(got), 0.0)


def test_inconsistency_last_exit_always_zero():
    rng = np.random.default_rng(9)
    correct = rng.random((50, 6)) < 0.6
    correct[:, -1] = True
    assert inconsistency(correct)[-1] == 0.0


def test_inconsistency_matches_double_loop():
    rng = np.random.default_rng(10)
    for _ in range(20):
        correct = rng.random((30, 5)) < rng.uniform(0.2, 0.9)
        got = inconsistency(correct)
        exp = brute_inconsistency(correct)
        np.testing.assert_allclose(np.nan_to_num(got, nan=-1),
                                   np.nan_to_num(exp, nan=-1), atol=1e-12)


# ---- histogram --------------------------------------------------------


def test_histogram_counts_and_total():
    correct = np.array([
        [1, 1, 1],
        [0, 0, 0],
        [1, 0, 0],
        [1, 1, 0],
        [1, 1, 1],
    ], dtype=bool)
    counts, _ = correct_count_histogram(correct)
    np.testing.assert_array_equal(counts, [1, 1, 1, 2])
    assert counts.sum() == 5


def test_binomial_baseline_fair_coin():
    # seven exits at 50% accuracy each: P(0 correct) = 1/128
    correct = np.zeros((128, 7), dtype=bool)
    correct[:64, :] = True  # mean accuracy exactly 0.5
    _, baseline = correct_count_histogram(correct)
    assert baseline[0] == pytest.approx(128 * (1 / 128))
    assert baseline[7] == pytest.approx(1.0)
    assert baseline.sum() == pytest.approx(128.0)
    # analytic pmf check at k=3
    assert baseline[3] == pytest.approx(math.comb(7, 3) * 0.5**7 * 128)


def test_binomial_baseline_uses_mean_per_exit_accuracy():
    rng = np.random.default_rng(11)
    correct = rng.random((200, 4)) < 0.7
    _, baseline = correct_count_histogram(correct)
    p = correct.mean()
    exp = [math.comb(4, k) * p**k * (1 - p) ** (4 - k) * 200 for k in range(5)]
    np.testing.assert_allclose(baseline, exp, atol=1e-9)


# ---- report -----------------------------------------------------------


def test_build_metrics_report_fields():
    rng = np.random.default_rng(12)
    correct = rng.random((100, 5)) < 0.5
    recs = records_from_correctness(correct)
    matrix = TraceMatrix(recs)
    decisions = apply_strategy(recs, StrategyConfig("confidence", tau_c=0.8))
    report = build_metrics_report(matrix, decisions, "confidence", 0.8)
    assert isinstance(report, MetricsReport)
    assert report.num_samples == 100
    assert report.num_exits == 5
    assert 0.0 <= report.accuracy <= 1.0
    assert 0.0 < report.mean_compute_fraction <= 1.0
    assert report.cr == pytest.approx(report.mean_compute_fraction * 100)
    assert report.compute_saved_pct == pytest.approx(100 - report.cr)
    assert report.ut_pct + report.ot_pct <= 100.0 + 1e-9
    assert len(report.per_exit_rmsce) == 5
    assert len(report.per_exit_inconsistency) == 5
    assert len(report.correct_count_histogram) == 6
    assert sum(report.correct_count_histogram) == 100
    assert sum(report.binomial_baseline) == pytest.approx(100.0)
    uni = EvalUniverse.from_matrix(matrix)
    assert report.oracle_accuracy == pytest.approx(uni.oracle_accuracy)


def test_report_json_dict_replaces_nan():
    correct = np.zeros((4, 3), dtype=bool)  # no exit ever correct
    recs = records_from_correctness(correct)
    decisions = apply_strategy(recs, StrategyConfig("oracle"))
    report = build_metrics_report(TraceMatrix(recs), decisions, "oracle", None)
    d = report.to_json_dict()
    for v in d["per_exit_inconsistency"]:
        assert v is None or not math.isnan(v)
    assert d["strategy"] == "oracle"
    assert d["threshold"] is None


def test_forced_last_exit_costs_everything():
    rng = np.random.default_rng(13)
    correct = rng.random((30, 4)) < 0.5
    matrix = TraceMatrix(records_from_correctness(correct))
    decisions = decisions_at(matrix, [4] * 30)
    report = build_metrics_report(matrix, decisions, "fixed", None)
    assert report.mean_compute_fraction == pytest.approx(1.0)
    assert report.cr == pytest.approx(100.0)
    assert report.compute_saved_pct == pytest.approx(0.0)


def test_correctness_matrix_against_loops():
    rng = np.random.default_rng(14)
    logits = rng.normal(size=(20, 3, 6)).astype(np.float32)
    labels = rng.integers(6, size=20)
    got = correctness_matrix(logits, labels)
    for i in range(20):
        for j in range(3):
            assert got[i, j] == (int(np.argmax(logits[i, j])) == labels[i])
