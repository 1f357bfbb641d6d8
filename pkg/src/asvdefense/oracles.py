"""Slow reference implementations used by ``selfcheck`` and the test-suite.

They share nothing with :mod:`asvdefense.metrics` beyond the definitions:
every candidate threshold is scored by counting errors directly.
"""

from __future__ import annotations

import numpy as np


def brute_force_rates(scores, target) -> tuple[np.ndarray, list[float], list[float]]:
    """(threshold, p_miss, p_fa) for -inf, every distinct score, +inf; accept iff score >= threshold.

    Every threshold is compared against every score: O(n^2) time and memory.
    """
    scores = np.asarray(scores, dtype=np.float64)
    target = np.asarray(target, dtype=bool)
    n_tar = int(target.sum())
    n_non = len(target) - n_tar
    thresholds = np.array([-np.inf] + sorted(set(scores.tolist())) + [np.inf])
    accept = scores[None, :] >= thresholds[:, None]
    miss = (~accept & target[None, :]).sum(axis=1)
    fa = (accept & ~target[None, :]).sum(axis=1)
    return thresholds, [int(m) / n_tar for m in miss], [int(f) / n_non for f in fa]


def brute_force_eer(scores, target) -> float:
    _, pm, pf = brute_force_rates(scores, target)
    for i in range(len(pm)):
        if pm[i] >= pf[i]:
            if i == 0 or pm[i] == pf[i]:
                return 100.0 * pm[i]
            # linear crossing between points i-1 and i of pm - pf
            d0 = pm[i - 1] - pf[i - 1]
            d1 = pm[i] - pf[i]
            w = -d0 / (d1 - d0)
            return 100.0 * (pm[i - 1] + w * (pm[i] - pm[i - 1]))
    return 100.0 * pm[-1]


def brute_force_min_dcf(scores, target, p_target=0.01, c_miss=1.0, c_fa=1.0) -> float:
    _, pm, pf = brute_force_rates(scores, target)
    norm = min(c_miss * p_target, c_fa * (1 - p_target))
    return min((c_miss * p_target * m + c_fa * (1 - p_target) * f) / norm for m, f in zip(pm, pf))
