"""Correlation metrics between predicted and subjective quality scores."""

from __future__ import annotations

import numpy as np

from .exceptions import DataError


class UndefinedCorrelation(DataError):
    """Correlation requested for a constant (or all-tied) sequence."""


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.size != y.size:
        raise DataError(f"sequences differ in length ({x.size} vs {y.size})")
    if x.size < 3:
        raise DataError(f"need at least 3 samples, got {x.size}")
    return x, y


def plcc(x, y) -> float:
    """Pearson linear correlation coefficient."""
    x, y = _pair(x, y)
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = float(xc @ xc), float(yc @ yc)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelation("correlation is undefined for a constant sequence")
    r = float(xc @ yc) / np.sqrt(sxx * syy)
    return float(np.clip(r, -1.0, 1.0))


def average_ranks(x) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(x.size)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def srocc(x, y) -> float:
    """Spearman rank-order correlation (Pearson on average ranks)."""
    x, y = _pair(x, y)
    return plcc(average_ranks(x), average_ranks(y))


def linear_fit(pred, actual) -> tuple[float, float]:
    """Least-squares ``actual ~ slope * pred + intercept``."""
    pred = np.asarray(pred, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    pc = pred - pred.mean()
    denom = float(pc @ pc)
    if denom == 0.0:
        return 0.0, float(actual.mean())
    slope = float(pc @ (actual - actual.mean())) / denom
    return slope, float(actual.mean() - slope * pred.mean())
