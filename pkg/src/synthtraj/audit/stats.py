"""Score-comparison statistics: standardized effect size and rank-sum test."""

from __future__ import annotations

import math
from itertools import combinations

import numpy as np

__all__ = ["cohens_d", "rank_sum_p", "rankdata"]

_EXACT_LIMIT = 12  # total size at or below which the permutation test is exact


def cohens_d(sample_a, sample_b) -> float:
    """Standardized mean difference (a minus b) with pooled sample SD."""
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("cohens_d needs at least 2 observations per sample")
    na, nb = len(a), len(b)
    pooled_var = ((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / (na + nb - 2)
    if pooled_var == 0:
        if a.mean() == b.mean():
            return 0.0
        raise ValueError("zero pooled standard deviation with unequal means")
    return float((a.mean() - b.mean()) / math.sqrt(pooled_var))


def rankdata(values: np.ndarray) -> np.ndarray:
    """Average ranks (1-based) with ties sharing their mean rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=float)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def rank_sum_p(sample_a, sample_b) -> float:
    """Two-sided Wilcoxon rank-sum p-value.

    Exact enumeration of all group assignments when the pooled size is at
    most 12; otherwise the normal approximation with tie correction and a
    0.5 continuity correction.
    """
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both samples must be non-empty")
    na, nb = len(a), len(b)
    pooled = np.concatenate([a, b])
    ranks = rankdata(pooled)
    w_obs = float(ranks[:na].sum())
    mean_w = na * (na + nb + 1) / 2.0

    if na + nb <= _EXACT_LIMIT:
        dev_obs = abs(w_obs - mean_w)
        count = 0
        total = 0
        for idx in combinations(range(na + nb), na):
            w = float(ranks[list(idx)].sum())
            if abs(w - mean_w) >= dev_obs - 1e-12:
                count += 1
            total += 1
        return count / total

    # Tie-corrected variance of the rank sum.
    _, tie_counts = np.unique(pooled, return_counts=True)
    tie_term = float(((tie_counts**3) - tie_counts).sum())
    n = na + nb
    var_w = na * nb / 12.0 * ((n + 1) - tie_term / (n * (n - 1)))
    if var_w <= 0:
        return 1.0
    z = (abs(w_obs - mean_w) - 0.5) / math.sqrt(var_w)
    return float(min(1.0, 2.0 * _normal_sf(max(z, 0.0))))
