"""Evaluation metrics: linear correlation, mean absolute error, root mean
squared error. Everything runs in float64 regardless of training precision.

The correlation uses population (n-denominator) moments; any consistent
convention cancels between numerator and denominator, this one is pinned
so tests can be exact. A constant sequence raises instead of silently
returning 0, because checkpoint selection compares correlations across
epochs and a silent 0 could corrupt it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegenerateVarianceError, DimensionError


@dataclass
class EvalResult:
    pc: float
    mae: float
    rmse: float
    n: int

    def line(self) -> str:
        return f"PC={self.pc:.6f} MAE={self.mae:.6f} RMSE={self.rmse:.6f} n={self.n}"


def _as64(y, yhat) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(y, dtype=np.float64).reshape(-1)
    b = np.asarray(yhat, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    return a, b


def pearson(y, yhat) -> float:
    """cov(y, yhat) / (std(y) * std(yhat)), population moments."""
    a, b = _as64(y, yhat)
    n = a.size
    if n < 2:
        raise ContractError(f"correlation needs n >= 2, got {n}")
    ca = a - a.mean()
    cb = b - b.mean()
    var_a = float(np.mean(ca * ca))
    var_b = float(np.mean(cb * cb))
    if var_a == 0.0 or var_b == 0.0:
        raise DegenerateVarianceError(
            "correlation undefined for a constant sequence "
            f"(var_y={var_a}, var_pred={var_b})"
        )
    cov = float(np.mean(ca * cb))
    return cov / math.sqrt(var_a * var_b)


def mae(y, yhat) -> float:
    a, b = _as64(y, yhat)
    if a.size < 1:
        raise ContractError("mae needs n >= 1")
    return float(np.mean(np.abs(a - b)))


def rmse(y, yhat) -> float:
    a, b = _as64(y, yhat)
    if a.size < 1:
        raise ContractError("rmse needs n >= 1")
    d = a - b
    return float(math.sqrt(np.mean(d * d)))


def evaluate_scores(y, yhat) -> EvalResult:
    a, b = _as64(y, yhat)
    return EvalResult(pc=pearson(a, b), mae=mae(a, b), rmse=rmse(a, b), n=a.size)
