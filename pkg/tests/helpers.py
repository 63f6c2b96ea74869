"""Shared test oracles, independent of the package's own code paths."""

from __future__ import annotations

import math

import numpy as np


def brute_force_stepwise(pvalues, critical, kind: str) -> np.ndarray:
    """Reference decisions by exhaustive search over reject-the-k-smallest.

    For every cutoff k in 0..M, checks the admissibility rule of the
    procedure (step-up: the k-th smallest passes its critical value;
    step-down: the whole prefix passes; single: membership) and returns
    the decisions of the largest admissible k.  Pure Python, no shared
    code with the implementation under test.
    """
    p = list(map(float, pvalues))
    m = len(p)
    order = sorted(range(m), key=lambda j: (p[j], j))
    sorted_p = [p[j] for j in order]
    best_k = 0
    for k in range(1, m + 1):
        if kind == "step_up":
            admissible = sorted_p[k - 1] <= critical[k - 1]
        elif kind == "step_down":
            admissible = all(sorted_p[i] <= critical[i] for i in range(k))
        else:
            raise ValueError(kind)
        if admissible:
            best_k = k
    out = np.zeros(m, dtype=bool)
    for j in order[:best_k]:
        out[j] = True
    return out


def bisect_normal_quantile(p: float, cdf, tol: float = 1e-13) -> float:
    """Quantile by bisection on the given cdf; the independent oracle."""
    lo, hi = -40.0, 40.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if float(cdf(mid)) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def normal_tail_asymptotic(z: float) -> tuple[float, float]:
    """Upper-tail bounds phi(z)/z * (1 - 1/z^2) <= sf(z) <= phi(z)/z, z > 0."""
    phi = math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    upper = phi / z
    lower = upper * (1.0 - 1.0 / (z * z))
    return lower, upper
