"""Single-step and step-wise multiple testing procedures on p-value vectors.

Every procedure maps a p-value vector and a level to a boolean rejection
vector of the same length.  Ties in sorted p-values are broken by original
index (stable sort) so decisions are deterministic across runs and
platforms.  An empty rejection set is a legitimate outcome, never an
error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError

__all__ = [
    "ScalingFunction",
    "apply_weights",
    "bonferroni",
    "holm",
    "linear_step_up",
    "nmcp",
    "scaled_step_up",
]


def _as_pvalues(p) -> np.ndarray:
    arr = np.asarray(p, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise InputError("p-value vector must be one-dimensional and nonempty")
    if np.any(~np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise InputError("p-values must lie in [0, 1]")
    return arr


def _check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not 0.0 < alpha < 1.0:
        raise InputError(f"alpha must lie in (0, 1), got {alpha!r}")
    return alpha


def _stable_order(p: np.ndarray) -> np.ndarray:
    return np.argsort(p, kind="stable")


@dataclass(frozen=True)
class ScalingFunction:
    """Nondecreasing positive scaling ``g`` for step-up critical values.

    Either the built-in power family ``g(j) = j**gamma`` (gamma > 0) or a
    user-supplied table of values for j = 1..M.
    """

    gamma: float | None = None
    table: tuple[float, ...] | None = None

    def __post_init__(self):
        if (self.gamma is None) == (self.table is None):
            raise InputError("provide exactly one of gamma or table")
        if self.gamma is not None and self.gamma <= 0:
            raise InputError(f"gamma must be positive, got {self.gamma!r}")
        if self.table is not None:
            tab = np.asarray(self.table, dtype=float)
            if tab.size == 0 or np.any(tab <= 0):
                raise InputError("tabulated scaling must be positive")
            if np.any(np.diff(tab) < 0):
                raise InputError("tabulated scaling must be nondecreasing")

    def values(self, m: int) -> np.ndarray:
        """g(1..m) as a float array."""
        if self.table is not None:
            if len(self.table) < m:
                raise InputError(
                    f"scaling table has {len(self.table)} entries, need {m}")
            return np.asarray(self.table[:m], dtype=float)
        return np.arange(1, m + 1, dtype=float) ** self.gamma


def nmcp(p, alpha: float) -> np.ndarray:
    """Reject every hypothesis with ``p <= alpha`` (no multiplicity correction)."""
    arr = _as_pvalues(p)
    return arr <= _check_alpha(alpha)


def bonferroni(p, alpha: float) -> np.ndarray:
    """Reject hypotheses with ``p <= alpha / M``."""
    arr = _as_pvalues(p)
    return arr <= _check_alpha(alpha) / arr.size


def holm(p, alpha: float) -> np.ndarray:
    """Step-down procedure with thresholds ``alpha / (M - j + 1)``.

    Rejects the j smallest p-values for the largest j whose whole prefix
    passes.  Always rejects at least what Bonferroni rejects.
    """
    arr = _as_pvalues(p)
    alpha = _check_alpha(alpha)
    m = arr.size
    order = _stable_order(arr)
    crit = alpha / (m - np.arange(m))
    passing = arr[order] <= crit
    fail = np.nonzero(~passing)[0]
    j = m if fail.size == 0 else int(fail[0])
    out = np.zeros(m, dtype=bool)
    out[order[:j]] = True
    return out


def _step_up(arr: np.ndarray, crit: np.ndarray) -> np.ndarray:
    order = _stable_order(arr)
    passing = np.nonzero(arr[order] <= crit)[0]
    out = np.zeros(arr.size, dtype=bool)
    if passing.size:
        k = int(passing[-1]) + 1
        out[order[:k]] = True
    return out


def linear_step_up(p, alpha: float) -> np.ndarray:
    """Step-up procedure with linear critical values ``j * alpha / M``.

    Rejects the U smallest p-values where U is the largest j with
    ``p_(j) <= j * alpha / M``; rejects nothing if no such j exists.
    """
    arr = _as_pvalues(p)
    alpha = _check_alpha(alpha)
    m = arr.size
    crit = alpha * np.arange(1, m + 1) / m
    return _step_up(arr, crit)


def scaled_step_up(p, alpha: float, scaling: ScalingFunction) -> np.ndarray:
    """Step-up procedure with critical values ``alpha * g(j) / M``.

    ``g(j) = j`` recovers :func:`linear_step_up`; ``g == 1`` recovers
    :func:`bonferroni`.
    """
    arr = _as_pvalues(p)
    alpha = _check_alpha(alpha)
    m = arr.size
    crit = alpha * scaling.values(m) / m
    return _step_up(arr, crit)


def apply_weights(p, weights) -> tuple[np.ndarray, bool]:
    """Divide p-values by nonnegative weights, clipping into [0, 1].

    A zero weight sends the p-value to 1 (the hypothesis drops out of
    contention).  Returns ``(modified, mean_ok)`` where ``mean_ok`` states
    whether ``mean(weights) <= 1``, the condition under which weighted
    Bonferroni retains its error control.
    """
    arr = _as_pvalues(p)
    w = np.asarray(weights, dtype=float)
    if w.shape != arr.shape:
        raise InputError(
            f"weights length {w.size} does not match p-values length {arr.size}")
    if np.any(~np.isfinite(w)) or np.any(w < 0):
        raise InputError("weights must be finite and nonnegative")
    safe = np.where(w > 0, w, 1.0)
    out = np.where(w > 0, np.minimum(arr / safe, 1.0), 1.0)
    mean_ok = bool(w.mean() <= 1.0 + 1e-12)
    return out, mean_ok
