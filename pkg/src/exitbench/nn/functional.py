"""Stateless numeric ops shared by training and evaluation."""

from __future__ import annotations

import numpy as np


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (max-subtracted before exponentiation)."""
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= num_classes:
        raise ValueError(
            f"labels outside [0, {num_classes}): "
            f"[{labels.min()}, {labels.max()}]")
    out = np.zeros((labels.shape[0], num_classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Per-sample cross-entropy loss and its gradient w.r.t. logits.

    Returns (loss, grad) where loss has shape (N,) and grad is
    (softmax(logits) - onehot) / N, so summing the per-sample losses'
    mean backpropagates correctly through `grad` as-is.
    """
    n, c = logits.shape
    p = softmax(logits)
    onehot = one_hot(labels, c, dtype=p.dtype)
    loss = -np.log(np.clip(p[np.arange(n), labels], 1e-12, None))
    grad = (p - onehot) / n
    return loss, grad


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of samples whose argmax (lowest index on ties) is correct."""
    return float(np.mean(np.argmax(logits, axis=1) == labels))
