"""Early-exit decision procedures.

Four deciders over per-sample exit traces: the label-aware oracle (exit
at the first correct classifier) and three practical rules - confidence
(first max-softmax above a threshold), patience (first run of identical
predictions), and kNN agreement (first exit where enough of the nearest
training neighbors voted the same way). Exit indices in decisions are
1-based; argmax ties resolve to the lowest class index throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn.functional import softmax

DEFAULT_GRIDS = {
    "confidence": (0.6, 0.7, 0.8, 0.9, 1.0),
    "patience": (1, 2, 3, 4, 5),
    "knn": (0.2, 0.4, 0.6, 0.8, 0.99),
}

STRATEGY_KINDS = ("oracle", "confidence", "patience", "knn")


def default_k(num_classes: int) -> int:
    """Neighbor count: 50 for ten-class runs, 200 for hundred-class."""
    return 200 if num_classes >= 100 else 50


@dataclass(frozen=True)
class ExitDecision:
    id: object
    exit_index: int  # 1-based
    prediction: int
    score: float  # confidence / agreement / run length / oracle correctness
    compute_fraction: float


@dataclass(frozen=True)
class StrategyConfig:
    kind: str
    tau_c: float = None
    patience_t: int = None
    k: int = None
    tau_a: float = None

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy kind {self.kind!r}")
        required = {"oracle": (), "confidence": ("tau_c",),
                    "patience": ("patience_t",), "knn": ("k", "tau_a")}
        for name in required[self.kind]:
            if getattr(self, name) is None:
                raise ValueError(f"{self.kind} strategy requires {name}")
        for name in ("tau_c", "patience_t", "k", "tau_a"):
            if name not in required[self.kind] and getattr(self, name) is not None:
                raise ValueError(
                    f"{self.kind} strategy does not take {name}")
        if self.tau_c is not None and not 0.0 < self.tau_c <= 1.0:
            raise ValueError(f"tau_c must be in (0, 1]: {self.tau_c}")
        if self.tau_a is not None and not 0.0 < self.tau_a <= 1.0:
            raise ValueError(f"tau_a must be in (0, 1]: {self.tau_a}")
        if self.patience_t is not None and self.patience_t < 1:
            raise ValueError(f"patience must be >= 1: {self.patience_t}")
        if self.k is not None and self.k < 1:
            raise ValueError(f"k must be >= 1: {self.k}")

    @property
    def threshold(self):
        """The swept parameter, or None for the oracle."""
        return {"oracle": None, "confidence": self.tau_c,
                "patience": self.patience_t, "knn": self.tau_a}[self.kind]


def _decision(rec_id, exit0, logits, cost, score):
    return ExitDecision(
        id=rec_id, exit_index=exit0 + 1,
        prediction=int(np.argmax(logits[exit0])),
        score=float(score), compute_fraction=float(cost[exit0]))


def decide_oracle(record) -> ExitDecision:
    """Exit at the earliest correct exit; all wrong -> the final exit."""
    preds = np.argmax(record.logits, axis=1)
    correct = preds == record.label
    exit0 = int(np.argmax(correct)) if correct.any() else len(preds) - 1
    return _decision(record.id, exit0, record.logits, record.cost,
                     float(correct[exit0]))


def decide_confidence(record, tau_c) -> ExitDecision:
    """First exit whose max softmax exceeds tau_c (strict); fallback to
    the globally most confident exit, earliest on ties."""
    conf = softmax(record.logits.astype(np.float64), axis=1).max(axis=1)
    above = conf > tau_c
    exit0 = int(np.argmax(above)) if above.any() else int(np.argmax(conf))
    return _decision(record.id, exit0, record.logits, record.cost, conf[exit0])


def decide_patience(record, t) -> ExitDecision:
    """First exit ending a run of t identical predictions; else last.

    The decision score is the run length at the chosen exit."""
    preds = np.argmax(record.logits, axis=1)
    if t <= 1:
        return _decision(record.id, 0, record.logits, record.cost, 1)
    run = 1
    for i in range(1, len(preds)):
        run = run + 1 if preds[i] == preds[i - 1] else 1
        if run >= t:
            return _decision(record.id, i, record.logits, record.cost, run)
    return _decision(record.id, len(preds) - 1, record.logits, record.cost, run)


def decide_knn(record, indices, k, tau_a) -> ExitDecision:
    """First exit where > tau_a of the k nearest training neighbors (in
    that exit's normalized representation space) share the exit's own
    prediction; no exit qualifies -> last exit."""
    if record.repr is None:
        raise ValueError("kNN strategy needs representation vectors in traces")
    num_exits = record.logits.shape[0]
    if len(indices) != num_exits:
        raise ValueError(
            f"{len(indices)} indices for {num_exits} exits")
    preds = np.argmax(record.logits, axis=1)
    last_agreement = None
    for i in range(num_exits):
        neighbor_ids, _ = indices[i].query(record.repr[i], k)
        votes = indices[i].labels[neighbor_ids]
        agreement = float(np.mean(votes == preds[i]))
        last_agreement = agreement
        if agreement > tau_a:
            return _decision(record.id, i, record.logits, record.cost,
                             agreement)
    return _decision(record.id, num_exits - 1, record.logits, record.cost,
                     last_agreement)


def knn_agreements(matrix, indices, k) -> np.ndarray:
    """(N, num_exits) agreement fractions for a whole trace matrix.

    Threshold-independent, so sweeps compute this once. Row-for-row
    equal to what decide_knn sees sample by sample.
    """
    if matrix.reprs is None:
        raise ValueError("kNN strategy needs representation vectors in traces")
    n, e = len(matrix), matrix.num_exits
    if len(indices) != e:
        raise ValueError(f"{len(indices)} indices for {e} exits")
    preds = np.argmax(matrix.logits, axis=2)  # (N, E)
    agree = np.empty((n, e), dtype=np.float64)
    for i in range(e):
        neighbor_ids, _ = indices[i].query(matrix.reprs[i], k)  # (N, k)
        votes = indices[i].labels[neighbor_ids]
        agree[:, i] = np.mean(votes == preds[:, i:i + 1], axis=1)
    return agree


def decide_knn_from_agreements(record, agreement_row, tau_a) -> ExitDecision:
    above = agreement_row > tau_a
    exit0 = int(np.argmax(above)) if above.any() else len(agreement_row) - 1
    return _decision(record.id, exit0, record.logits, record.cost,
                     agreement_row[exit0])


def apply_strategy(records, config: StrategyConfig, indices=None,
                   agreements=None):
    """Decide every record; returns a list of ExitDecision in order."""
    if config.kind == "oracle":
        return [decide_oracle(r) for r in records]
    if config.kind == "confidence":
        return [decide_confidence(r, config.tau_c) for r in records]
    if config.kind == "patience":
        return [decide_patience(r, config.patience_t) for r in records]
    if agreements is not None:
        return [decide_knn_from_agreements(r, agreements[i], config.tau_a)
                for i, r in enumerate(records)]
    if indices is None:
        raise ValueError("kNN strategy needs indices or precomputed agreements")
    return [decide_knn(r, indices, config.k, config.tau_a) for r in records]


def sweep(records, kind, grid=None, indices=None, k=None, bins=15):
    """One curve point per threshold: accuracy, compute, UT%, OT%.

    The oracle ignores the grid and yields a single point. Returns a
    list of dicts ready for CSV-ification.
    """
    from .metrics import EvalUniverse, ut_ot_percentages
    records = list(records)
    if not records:
        raise ValueError("cannot sweep an empty trace set")
    universe = EvalUniverse.from_records(records)
    agreements = None
    if kind == "knn":
        from .traces import TraceMatrix
        if k is None:
            k = default_k(records[0].logits.shape[1])
        agreements = knn_agreements(TraceMatrix(records), indices, k)
    if kind == "oracle":
        grid = [None]
    elif grid is None:
        grid = DEFAULT_GRIDS[kind]
    points = []
    for threshold in grid:
        if kind == "oracle":
            config = StrategyConfig("oracle")
        elif kind == "confidence":
            config = StrategyConfig("confidence", tau_c=threshold)
        elif kind == "patience":
            config = StrategyConfig("patience", patience_t=threshold)
        else:
            config = StrategyConfig("knn", k=k, tau_a=threshold)
        decisions = apply_strategy(records, config, indices=indices,
                                   agreements=agreements)
        correct = [d.prediction == r.label for d, r in zip(decisions, records)]
        ut_pct, ot_pct = ut_ot_percentages(decisions, universe)
        mean_cf = float(np.mean([d.compute_fraction for d in decisions]))
        points.append({
            "strategy": kind,
            "threshold": threshold,
            "accuracy": float(np.mean(correct)),
            "compute_fraction": mean_cf,
            "CR": 100.0 * mean_cf,
            "UT_pct": ut_pct,
            "OT_pct": ot_pct,
        })
    return points
