"""Nondominated filtering for (accuracy, latency reduction) pairs."""

from __future__ import annotations

import numpy as np


def pareto_mask(accuracy, latency_reduction) -> np.ndarray:
    """Boolean mask of points no other point weakly dominates.

    ``q`` dominates ``p`` when it is at least as good on both axes and strictly
    better on one. Among exact duplicates only the first occurrence is kept.
    """
    acc = np.asarray(accuracy, dtype=np.float64)
    lat = np.asarray(latency_reduction, dtype=np.float64)
    n = acc.size
    keep = np.zeros(n, dtype=bool)
    if n == 0:
        return keep
    # best latency first, then best accuracy, then original position
    order = np.lexsort((np.arange(n), -acc, -lat))
    best = -np.inf
    for i in order:
        if acc[i] > best:
            keep[i] = True
            best = acc[i]
    return keep


def pareto_indices(accuracy, latency_reduction) -> np.ndarray:
    """Indices of the front, ordered by latency reduction (stable)."""
    keep = np.flatnonzero(pareto_mask(accuracy, latency_reduction))
    lat = np.asarray(latency_reduction, dtype=np.float64)[keep]
    return keep[np.argsort(lat, kind="stable")]
