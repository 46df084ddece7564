"""Analysis suite over exit traces and decisions.

Central objects: the correctness matrix (sample x exit), the universe
(which samples any exit gets right, and where first), the under- and
over-thinking sets of a strategy's decisions, RMS calibration error,
per-exit prediction inconsistency, and the correct-count histogram with
its binomial baseline. Everything is a pure function of its inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn.functional import softmax

RMSCE_DEFAULT_BINS = 15


def correctness_matrix(logits, labels):
    """(N, E) boolean: does exit e's argmax match the label."""
    preds = np.argmax(logits, axis=2)
    return preds == np.asarray(labels)[:, None]


@dataclass
class EvalUniverse:
    """All samples, the subset some exit classifies correctly, and each
    such sample's first correct exit (1-based)."""

    ids: list
    labels: np.ndarray
    correct: np.ndarray  # (N, E) bool
    in_O: np.ndarray = field(init=False)
    first_correct: np.ndarray = field(init=False)  # 1-based; 0 outside O

    def __post_init__(self):
        self.in_O = self.correct.any(axis=1)
        first0 = np.argmax(self.correct, axis=1)
        self.first_correct = np.where(self.in_O, first0 + 1, 0)

    @classmethod
    def from_records(cls, records):
        logits = np.stack([r.logits for r in records])
        labels = np.array([r.label for r in records])
        return cls([r.id for r in records], labels,
                   correctness_matrix(logits, labels))

    @classmethod
    def from_matrix(cls, matrix):
        return cls(matrix.ids, matrix.labels,
                   correctness_matrix(matrix.logits, matrix.labels))

    @property
    def num_samples(self):
        return self.correct.shape[0]

    @property
    def num_exits(self):
        return self.correct.shape[1]

    @property
    def oracle_accuracy(self):
        """|O| / |A|: what a per-sample perfect exit choice achieves."""
        return float(np.mean(self.in_O))


def first_correct_exit(correct_row):
    """1-based first correct exit of one sample, or None."""
    correct_row = np.asarray(correct_row, dtype=bool)
    if not correct_row.any():
        return None
    return int(np.argmax(correct_row)) + 1


def _decision_map(decisions, universe):
    by_id = {d.id: d for d in decisions}
    missing = [universe.ids[i] for i in np.nonzero(universe.in_O)[0]
               if universe.ids[i] not in by_id]
    if missing:
        raise ValueError(
            f"decisions missing for samples in O: {missing[:5]}"
            + ("..." if len(missing) > 5 else ""))
    return by_id


def underthinking_set(decisions, universe):
    """Samples of O exited strictly before their first correct exit."""
    by_id = _decision_map(decisions, universe)
    out = set()
    for i in np.nonzero(universe.in_O)[0]:
        sid = universe.ids[i]
        if by_id[sid].exit_index < universe.first_correct[i]:
            out.add(sid)
    return out


def overthinking_set(decisions, universe):
    """Samples of O exited strictly after their first correct exit AND
    misclassified at the chosen exit."""
    by_id = _decision_map(decisions, universe)
    out = set()
    for i in np.nonzero(universe.in_O)[0]:
        sid = universe.ids[i]
        d = by_id[sid]
        if (d.exit_index > universe.first_correct[i]
                and d.prediction != universe.labels[i]):
            out.add(sid)
    return out


def ut_ot_percentages(decisions, universe):
    """UT% and OT% relative to |O| (both 0.0 when O is empty)."""
    n_o = int(universe.in_O.sum())
    if n_o == 0:
        return 0.0, 0.0
    ut = len(underthinking_set(decisions, universe))
    ot = len(overthinking_set(decisions, universe))
    return 100.0 * ut / n_o, 100.0 * ot / n_o


def rms_calibration_error(confidences, correct, bins=RMSCE_DEFAULT_BINS):
    """sqrt(sum_b (n_b/N) * (mean_conf_b - acc_b)^2), equal-mass bins.

    Samples sort by (confidence, correctness) before binning so the
    result is invariant to input permutation even with tied confidences.
    """
    confidences = np.asarray(confidences, dtype=np.float64)
    correct = np.asarray(correct, dtype=np.float64)
    n = confidences.shape[0]
    if n == 0:
        raise ValueError("cannot compute calibration error of an empty set")
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    order = np.lexsort((correct, confidences))
    total = 0.0
    for chunk in np.array_split(order, min(bins, n)):
        gap = confidences[chunk].mean() - correct[chunk].mean()
        total += len(chunk) * gap * gap
    return float(math.sqrt(total / n))


def per_exit_rmsce(logits, labels, bins=RMSCE_DEFAULT_BINS):
    """RMS calibration error of each exit's max-softmax confidence."""
    probs = softmax(np.asarray(logits, dtype=np.float64), axis=2)
    conf = probs.max(axis=2)
    correct = correctness_matrix(logits, labels)
    return [rms_calibration_error(conf[:, e], correct[:, e], bins)
            for e in range(logits.shape[1])]


def inconsistency(correct):
    """Per-exit fraction of exit-i-correct samples a later exit gets
    wrong. Last exit is 0 by definition; exits with zero correct
    samples report NaN (no denominator), never 0."""
    correct = np.asarray(correct, dtype=bool)
    n, e = correct.shape
    out = np.zeros(e, dtype=np.float64)
    wrong_later = np.zeros(n, dtype=bool)
    for i in range(e - 2, -1, -1):
        wrong_later = wrong_later | ~correct[:, i + 1]
        n_correct = int(correct[:, i].sum())
        if n_correct == 0:
            out[i] = np.nan
        else:
            out[i] = float((correct[:, i] & wrong_later).sum()) / n_correct
    return out


def correct_count_histogram(correct):
    """Counts of per-sample correct-exit totals over {0..E}, plus the
    matched binomial baseline (p = mean per-exit accuracy, scaled N)."""
    correct = np.asarray(correct, dtype=bool)
    n, e = correct.shape
    counts = np.bincount(correct.sum(axis=1), minlength=e + 1)
    p = float(correct.mean()) if n else 0.0
    pmf = np.array([math.comb(e, b) * p ** b * (1 - p) ** (e - b)
                    for b in range(e + 1)])
    return counts, n * pmf


@dataclass
class MetricsReport:
    strategy: str
    threshold: object
    accuracy: float
    mean_compute_fraction: float
    cr: float  # mean compute as % of full cost; plain network = 100
    compute_saved_pct: float  # 100 - cr, the complementary reading
    oracle_accuracy: float  # |O| / |A|
    ut_pct: float
    ot_pct: float
    per_exit_rmsce: list
    per_exit_inconsistency: list
    correct_count_histogram: list
    binomial_baseline: list
    num_samples: int
    num_exits: int

    def to_json_dict(self):
        def clean(x):
            if isinstance(x, float) and math.isnan(x):
                return None
            return x
        return {
            "strategy": self.strategy,
            "threshold": self.threshold,
            "accuracy": self.accuracy,
            "mean_compute_fraction": self.mean_compute_fraction,
            "CR": self.cr,
            "compute_saved_pct": self.compute_saved_pct,
            "oracle_accuracy": self.oracle_accuracy,
            "UT_pct": self.ut_pct,
            "OT_pct": self.ot_pct,
            "per_exit_rmsce": [clean(v) for v in self.per_exit_rmsce],
            "per_exit_inconsistency": [clean(v) for v in
                                       self.per_exit_inconsistency],
            "correct_count_histogram": self.correct_count_histogram,
            "binomial_baseline": self.binomial_baseline,
            "num_samples": self.num_samples,
            "num_exits": self.num_exits,
        }


def build_metrics_report(matrix, decisions, strategy, threshold,
                         bins=RMSCE_DEFAULT_BINS) -> MetricsReport:
    universe = EvalUniverse.from_matrix(matrix)
    correct_dec = np.array([d.prediction == lab
                            for d, lab in zip(decisions, matrix.labels)])
    mean_cf = float(np.mean([d.compute_fraction for d in decisions]))
    ut, ot = ut_ot_percentages(decisions, universe)
    counts, baseline = correct_count_histogram(universe.correct)
    return MetricsReport(
        strategy=strategy,
        threshold=threshold,
        accuracy=float(np.mean(correct_dec)),
        mean_compute_fraction=mean_cf,
        cr=100.0 * mean_cf,
        compute_saved_pct=100.0 * (1.0 - mean_cf),
        oracle_accuracy=universe.oracle_accuracy,
        ut_pct=ut,
        ot_pct=ot,
        per_exit_rmsce=per_exit_rmsce(matrix.logits, matrix.labels, bins),
        per_exit_inconsistency=list(inconsistency(universe.correct)),
        correct_count_histogram=[int(c) for c in counts],
        binomial_baseline=[float(b) for b in baseline],
        num_samples=len(matrix),
        num_exits=matrix.num_exits,
    )
