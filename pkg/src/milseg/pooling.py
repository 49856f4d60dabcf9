"""Instance-to-bag pooling for multiple instance learning.

A bag (one image) holds instance probabilities -- per-pixel or
per-superpixel values in (0,1).  The bag-level probability is pooled with
the generalized mean

    GM(p, r) = ((1/n) * sum_k p_k^r)^(1/r),

a smooth surrogate for the maximum that approaches max_k p_k as r grows.
The plain arithmetic mean (r = 1) doubles as the "positiveness" measure
used by the area-constraint loss.

All pooling runs on clamped float64 values in log space so large r and
tiny probabilities neither overflow nor underflow, and instance values
are sorted before accumulation so results are bit-identical under any
permutation of the instances.
"""

from __future__ import annotations

import numpy as np

EPSILON = 1e-6  # instance probabilities are clamped into [EPSILON, 1 - EPSILON]


def _validate(probs) -> np.ndarray:
    arr = np.asarray(probs, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError("instance vector must contain at least one instance")
    return np.clip(arr, EPSILON, 1.0 - EPSILON)


def _sorted_mean(arr: np.ndarray) -> float:
    # Canonical accumulation order: permutation-invariant to the bit.
    return float(np.sort(arr).sum() / arr.size)


def gm_pool(probs, r: float) -> float:
    """Generalized-mean pooling of instance probabilities.

    Computed as exp((logsumexp(r*log p) - log n) / r).  The result lies
    in [min(p), max(p)]; r = 1 gives the arithmetic mean exactly and a
    constant input is returned unchanged.
    """
    if r < 1:
        raise ValueError(f"generalized mean requires r >= 1, got {r}")
    arr = _validate(probs)
    lo = float(arr.min())
    if lo == float(arr.max()):
        return lo
    if r == 1:
        return _sorted_mean(arr)
    z = np.sort(r * np.log(arr))
    m = z[-1]
    lse = m + np.log(np.exp(z - m).sum())
    return float(np.exp((lse - np.log(arr.size)) / r))


def gm_pool_grad(probs, r: float, pooled: float | None = None) -> np.ndarray:
    """Derivative of gm_pool with respect to each instance probability.

    d GM / d p_k = (1/n) * p_k^(r-1) * GM^(1-r); every entry is strictly
    positive.  Evaluated in log space for stability at large r.  Pass the
    already-computed pooled value to skip recomputing it.
    """
    if r < 1:
        raise ValueError(f"generalized mean requires r >= 1, got {r}")
    arr = _validate(probs)
    n = arr.size
    if r == 1:
        return np.full(n, 1.0 / n)
    y = gm_pool(arr, r) if pooled is None else pooled
    log_g = -np.log(n) + (r - 1.0) * np.log(arr) + (1.0 - r) * np.log(y)
    return np.exp(log_g)


def hard_max_pool(probs) -> float:
    """Max pooling over instances; the limit of gm_pool as r -> infinity.

    Kept for comparison experiments only: its derivative is zero for all
    but the maximal instance, which makes training unstable, so it is
    never used in the objective.
    """
    arr = _validate(probs)
    return float(arr.max())


def positiveness(probs) -> float:
    """Mean instance probability of a bag; identical to gm_pool(probs, 1)."""
    return gm_pool(probs, 1.0)
