"""Finite-difference gradient checking for layers and whole models.

Checks run in float64: callers build the layer/model at float64 and the
loss closure must be deterministic (fixed batch-norm behaviour, no RNG).
"""

from __future__ import annotations

import numpy as np

H = 1e-5
TOL = 1e-4


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom))


def numeric_grad(f, x: np.ndarray, h: float = H) -> np.ndarray:
    """Central-difference gradient of scalar f at x, perturbing in place."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
        it.iternext()
    return grad


def check_param_grads(loss_fn, named_params: dict, named_grads: dict,
                      h: float = H, tol: float = TOL, exclude=()) -> list:
    """Compare analytic grads to central differences; return violations.

    `loss_fn` recomputes the scalar loss from current parameter values.
    Each violation is (param_name, rel_error). Callers decide whether a
    non-empty list fails the check.
    """
    violations = []
    for name, p in named_params.items():
        if name in exclude:
            continue
        analytic = named_grads.get(name)
        if analytic is None:
            continue
        numeric = numeric_grad(loss_fn, p, h=h)
        err = rel_error(np.asarray(analytic, dtype=np.float64), numeric)
        if err > tol:
            violations.append((name, err))
    return violations


def check_input_grad(loss_fn, x: np.ndarray, analytic: np.ndarray,
                     h: float = H, tol: float = TOL):
    numeric = numeric_grad(loss_fn, x, h=h)
    err = rel_error(np.asarray(analytic, dtype=np.float64), numeric)
    return err if err > tol else None
