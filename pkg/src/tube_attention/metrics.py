"""Rank correlation, Fisher-z averaging, accuracy and MSE."""

from __future__ import annotations

import math
import warnings

import numpy as np

from .errors import ShapeError

FISHER_CLAMP = 1.0 - 1e-12


class UndefinedCorrelation(ValueError):
    pass


def fractional_ranks(values) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    v = np.asarray(values, dtype=float)
    order = np.argsort(v, kind="mergesort")
    ranks = np.empty(len(v))
    sv = v[order]
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def pearson(p, q) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    dp = p - p.mean()
    dq = q - q.mean()
    denom = math.sqrt(float(np.sum(dp * dp)) * float(np.sum(dq * dq)))
    if denom == 0.0:
        raise UndefinedCorrelation("correlation undefined: a series has zero variance")
    return float(np.sum(dp * dq)) / denom


def spearman(pred, gt) -> float:
    """Pearson correlation of the two fractional-rank vectors."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.ndim != 1:
        raise ShapeError(f"series must be equal-length vectors, got {pred.shape} and {gt.shape}")
    if len(pred) < 2:
        raise ShapeError("spearman needs at least two pairs")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(gt))):
        raise ValueError("series contain non-finite values")
    rho = pearson(fractional_ranks(gt), fractional_ranks(pred))
    return max(-1.0, min(1.0, rho))


def fisher_z_average(correlations) -> float:
    rs = [float(r) for r in correlations]
    if not rs:
        raise ValueError("fisher_z_average needs at least one correlation")
    if len(rs) == 1:
        return rs[0]
    zs = []
    for r in rs:
        if abs(r) >= 1.0:
            warnings.warn(f"correlation {r} clamped to +-{FISHER_CLAMP} before atanh", RuntimeWarning, stacklevel=2)
            r = math.copysign(FISHER_CLAMP, r)
        zs.append(math.atanh(r))
    return math.tanh(sum(zs) / len(zs))


def accuracy(pred_labels, gt_labels) -> float:
    pred = list(pred_labels)
    gt = list(gt_labels)
    if len(pred) != len(gt):
        raise ShapeError(f"label lists differ in length: {len(pred)} vs {len(gt)}")
    if not gt:
        raise ShapeError("accuracy of an empty list")
    return sum(a == b for a, b in zip(pred, gt)) / len(gt)


def mse(pred, gt) -> float:
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ShapeError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return float(np.mean((pred - gt) ** 2))
