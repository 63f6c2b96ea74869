"""Expected-false-positive model for screened tests and calibration of the
relaxation coefficient.

The model: m subsets of s scores each, within-subset correlation rho
(worst case 1/sqrt(s), i.e. independent atoms), m0 subsets fully null and
m1 = m - m0 carrying a fraction pi of shifted atoms that lift the subset
summary mean to mu.  After screening at threshold U, null scores in
selected subsets are tested against the score cutoff c and null scores in
the remaining subsets against cbar.  The two expectations below count the
false positives of each branch; the calibration picks the largest
relaxation coefficient whose worst case over (m0, pi) stays within the
budget alpha.

The selected-branch expectation multiplies the expected number of
selected subsets, ``m * U``, by the per-selected-subset average of the
joint tail probability over the selection probability; the unselected
branch mirrors it with ``m * (1 - U)``.  For a fully null configuration
both reduce exactly to the joint probabilities
``m * s * P(Z > c, T >= t_U)`` and ``m * s * P(Z > cbar, T < t_U)``,
which the Monte Carlo cross-checks in the test suite verify.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import CalibrationError, InputError
from .grouping import SCREEN_BONFERRONI, SCREEN_LSU, SCREEN_NMCP
from .stats import (
    GAUSSIAN_TRUNCATION_Z,
    gauss_legendre_grid,
    std_normal_cdf,
    std_normal_pdf,
    std_normal_sf,
    upper_tail_cutoff,
)

DELTA_INFINITE = "infinite"
DELTA_VALUE = "value"

#: relative feasibility slack: a coefficient is accepted when the worst-case
#: expected count does not exceed alpha * (1 + tol).  Kept near rounding
#: level so that configurations with expected count exactly alpha (e.g.
#: threshold 1 with rbar 1, where the count is r * alpha) pin r to 1.
_FEASIBILITY_TOL = 1e-12

#: relative width at which the bisection bracket stops shrinking.
_BISECTION_RTOL = 1e-9

_QUAD_PANELS = 64


@dataclass(frozen=True)
class ModelParams:
    """Configuration of the screened-testing model (equal subset sizes)."""

    m: int
    m0: int
    s: int
    pi: float
    mu: float          # subset summary mean of affected subsets; may be +inf
    rho: float
    u: float           # screening threshold on the p-value scale
    alpha: float

    def __post_init__(self):
        if self.m < 1 or not 0 <= self.m0 <= self.m:
            raise InputError(f"need 0 <= m0 <= m with m >= 1, got m={self.m}, m0={self.m0}")
        if self.s < 1:
            raise InputError(f"subset size must be >= 1, got {self.s}")
        if not 0.0 <= self.pi <= 1.0:
            raise InputError(f"pi must lie in [0, 1], got {self.pi!r}")
        if not 0.0 < self.rho < 1.0:
            raise InputError(f"rho must lie in (0, 1), got {self.rho!r}")
        if not 0.0 < self.u <= 1.0:
            raise InputError(f"threshold u must lie in (0, 1], got {self.u!r}")
        if not 0.0 < self.alpha < 1.0:
            raise InputError(f"alpha must lie in (0, 1), got {self.alpha!r}")
        if self.mu < 0:
            raise InputError(f"mu must be nonnegative, got {self.mu!r}")

    @property
    def m1(self) -> int:
        return self.m - self.m0

    @property
    def n_atoms(self) -> int:
        return self.m * self.s


@dataclass(frozen=True)
class RelaxationCoefficients:
    """Relaxation/tightening pair with their score-scale cutoffs."""

    r: float
    rbar: float
    c: float
    cbar: float


@dataclass(frozen=True)
class CalibrationResult:
    coefficients: RelaxationCoefficients
    u: float
    m: int
    s: int
    alpha: float
    delta_mode: str
    delta_value: float | None
    worst_m0: int
    worst_pi: float
    worst_value: float
    bracket_high: float
    note: str = ""

    @property
    def r(self) -> float:
        return self.coefficients.r


class _TailIntegrals:
    """Gaussian tail integrals shared by the grid evaluation.

    For a cutoff ``cut`` and an array of subset means ``mu``:

    ``upper(cut, mu)[k] = integral_cut^inf P(T >= t_u | Z=z, mu_k) phi(z) dz``
    ``lower(cut, mu)[k] = integral_cut^inf P(T <  t_u | Z=z, mu_k) phi(z) dz``

    with the conditional summary ``T | Z=z ~ N(mu + rho z, 1 - rho^2)``.
    ``mu = +inf`` makes the upper factor 1 and the lower factor 0;
    ``t_u = -inf`` (threshold U = 1) does the same.
    """

    def __init__(self, t_u: float, rho: float):
        self.t_u = t_u
        self.rho = rho
        self.scale = math.sqrt(1.0 - rho * rho)

    def _grid(self, cut: float):
        if cut >= GAUSSIAN_TRUNCATION_Z or (math.isinf(cut) and cut > 0):
            return None
        return gauss_legendre_grid(max(cut, -GAUSSIAN_TRUNCATION_Z),
                                   GAUSSIAN_TRUNCATION_Z, _QUAD_PANELS)

    def upper(self, cut: float, mu: np.ndarray) -> np.ndarray:
        grid = self._grid(cut)
        if grid is None:
            return np.zeros_like(mu)
        z, w = grid
        phi = std_normal_pdf(z)
        tail_mass = float(w @ phi)
        if math.isinf(self.t_u):
            return np.full(mu.shape, tail_mass)
        out = np.full(mu.shape, tail_mass)          # mu = +inf entries
        finite = ~np.isinf(mu)
        if np.any(finite):
            args = (self.t_u - mu[finite, None] - self.rho * z[None, :]) / self.scale
            out[finite] = (std_normal_sf(args) * phi[None, :]) @ w
        return out

    def lower(self, cut: float, mu: np.ndarray) -> np.ndarray:
        grid = self._grid(cut)
        if grid is None:
            return np.zeros_like(mu)
        if math.isinf(self.t_u):
            return np.zeros_like(mu)
        z, w = grid
        phi = std_normal_pdf(z)
        out = np.zeros(mu.shape)
        finite = ~np.isinf(mu)
        if np.any(finite):
            args = (self.t_u - mu[finite, None] - self.rho * z[None, :]) / self.scale
            out[finite] = (std_normal_cdf(args) * phi[None, :]) @ w
        return out


def expected_fp_positive(params: ModelParams, c: float) -> float:
    """Expected false positives among selected subsets at score cutoff c."""
    if params.s == 1:
        raise InputError("subset size 1 makes rho = 1; the model is degenerate")
    t_u = upper_tail_cutoff(params.u)
    tails = _TailIntegrals(t_u, params.rho)
    mu_null = np.array([0.0])
    mu_aff = np.array([params.mu])
    sel_aff = 1.0 if math.isinf(params.mu) or math.isinf(t_u) else float(
        std_normal_sf(t_u - params.mu))
    denom = params.m0 * params.u + params.m1 * sel_aff
    if denom <= 0.0:
        return 0.0
    num = params.m0 * tails.upper(c, mu_null)[0]
    if params.m1:
        num += params.m1 * (1.0 - params.pi) * tails.upper(c, mu_aff)[0]
    return params.m * params.u * params.s * num / denom


def expected_fp_negative(params: ModelParams, cbar: float) -> float:
    """Expected false positives among unselected subsets at cutoff cbar."""
    if params.s == 1:
        raise InputError("subset size 1 makes rho = 1; the model is degenerate")
    if params.u >= 1.0:
        return 0.0               # everything is selected
    t_u = upper_tail_cutoff(params.u)
    tails = _TailIntegrals(t_u, params.rho)
    miss_aff = 0.0 if math.isinf(params.mu) else float(std_normal_cdf(t_u - params.mu))
    denom = params.m0 * (1.0 - params.u) + params.m1 * miss_aff
    if denom <= 0.0:
        return 0.0
    num = params.m0 * tails.lower(cbar, np.array([0.0]))[0]
    if params.m1:
        num += params.m1 * (1.0 - params.pi) * tails.lower(cbar, np.array([params.mu]))[0]
    return params.m * (1.0 - params.u) * params.s * num / denom


def _mu_lattice(s: int, delta_mode: str, delta_value: float | None
                ) -> tuple[np.ndarray, np.ndarray]:
    """Affected-fraction lattice {0, 1/s, ..., 1} and the implied subset means."""
    pis = np.arange(s + 1, dtype=float) / s
    if delta_mode == DELTA_INFINITE:
        mus = np.full(pis.shape, math.inf)
    else:
        mus = pis * math.sqrt(s) * float(delta_value)
    return pis, mus


class _WorstCaseEvaluator:
    """Maximum of E+ + E- over the (m0, pi) lattice, for varying cutoff c.

    The cbar-side integrals do not depend on the relaxation coefficient,
    so they are computed once per calibration.
    """

    def __init__(self, m: int, s: int, u: float, rho: float,
                 delta_mode: str, delta_value: float | None, cbar: float):
        self.m = m
        self.s = s
        self.u = u
        t_u = upper_tail_cutoff(u)
        self.tails = _TailIntegrals(t_u, rho)
        self.pis, self.mus = _mu_lattice(s, delta_mode, delta_value)
        self.m0 = np.arange(m + 1, dtype=float)[:, None]
        self.m1 = m - self.m0
        if math.isinf(t_u):
            self.sel = np.ones_like(self.mus)
            self.miss = np.zeros_like(self.mus)
        else:
            self.sel = np.where(np.isinf(self.mus), 1.0, std_normal_sf(t_u - self.mus))
            self.miss = np.where(np.isinf(self.mus), 0.0, std_normal_cdf(t_u - self.mus))
        # cutoff-independent negative side
        self.i_neg_null = float(self.tails.lower(cbar, np.array([0.0]))[0])
        self.i_neg_aff = self.tails.lower(cbar, self.mus)

    def __call__(self, c: float) -> tuple[float, int, float]:
        i_pos_null = float(self.tails.upper(c, np.array([0.0]))[0])
        i_pos_aff = self.tails.upper(c, self.mus)
        one_minus_pi = (1.0 - self.pis)[None, :]

        num_pos = self.m0 * i_pos_null + self.m1 * one_minus_pi * i_pos_aff[None, :]
        den_pos = self.m0 * self.u + self.m1 * self.sel[None, :]
        e_pos = np.divide(self.m * self.u * self.s * num_pos, den_pos,
                          out=np.zeros_like(num_pos), where=den_pos > 0)

        num_neg = self.m0 * self.i_neg_null + self.m1 * one_minus_pi * self.i_neg_aff[None, :]
        den_neg = self.m0 * (1.0 - self.u) + self.m1 * self.miss[None, :]
        e_neg = np.divide(self.m * (1.0 - self.u) * self.s * num_neg, den_neg,
                          out=np.zeros_like(num_neg), where=den_neg > 0)

        total = e_pos + e_neg
        vmax = float(total.max())
        # ties resolve toward the largest m0, then the smallest pi
        near = np.argwhere(total >= vmax - 1e-15 * max(1.0, abs(vmax)))
        best = max(near.tolist(), key=lambda ij: (ij[0], -ij[1]))
        return vmax, int(best[0]), float(self.pis[best[1]])


def _resolve_rule_threshold(rule_kind: str, alpha: float, m: int) -> tuple[float, str]:
    if rule_kind == SCREEN_NMCP:
        return alpha, ""
    if rule_kind == SCREEN_BONFERRONI:
        return alpha / m, ""
    if rule_kind == SCREEN_LSU:
        raise CalibrationError(
            "the step-up screening threshold is data dependent and has no "
            "analytic calibration; substitute the per-subset threshold alpha/m")
    raise InputError(f"unknown screening rule {rule_kind!r}")


def calibrate_relaxation(m: int, s: int, alpha: float,
                         rule: str | None = SCREEN_BONFERRONI,
                         rbar: float = 0.0,
                         delta_mode: str = DELTA_INFINITE,
                         delta_value: float | None = None,
                         u: float | None = None) -> CalibrationResult:
    """Largest relaxation coefficient whose worst-case expected false-positive
    count stays within alpha.

    The search runs over m0 in {0..m} and the affected fraction pi on the
    1/s lattice, with rho fixed at the least favorable 1/sqrt(s).  In
    ``infinite`` mode affected subset means are +inf (the conservative
    choice); in ``value`` mode they follow ``pi * sqrt(s) * delta_value``.
    The coefficient is found by bisection on [1, M/alpha); the lower end
    is always feasible when ``rbar <= 1``.

    All quantities live in the equal-size model (M = m * s atoms); the
    coefficient transfers to a heterogeneous decomposition as a
    dimensionless multiplier of the per-test level.

    ``u`` overrides the rule-derived screening threshold (useful for
    diagnostics such as u = 1, which must return r = 1 exactly).
    """
    m = int(m)
    s = int(s)
    alpha = float(alpha)
    rbar = float(rbar)
    if m < 1:
        raise InputError(f"need m >= 1 subsets, got {m}")
    if s < 2:
        raise InputError("subset size must be >= 2 (size-1 subsets make rho = 1)")
    if not 0.0 < alpha < 1.0:
        raise InputError(f"alpha must lie in (0, 1), got {alpha!r}")
    if not 0.0 <= rbar <= 1.0:
        raise InputError(f"rbar must lie in [0, 1], got {rbar!r}")
    if delta_mode not in (DELTA_INFINITE, DELTA_VALUE):
        raise InputError(f"unknown delta mode {delta_mode!r}")
    if delta_mode == DELTA_VALUE:
        if delta_value is None or not math.isfinite(delta_value) or delta_value < 0:
            raise InputError("delta mode 'value' needs a finite nonnegative delta_value")
    if u is None:
        u, _ = _resolve_rule_threshold(rule, alpha, m)
    u = float(u)
    if not 0.0 < u <= 1.0:
        raise InputError(f"screening threshold must lie in (0, 1], got {u!r}")

    n_atoms = m * s
    rho = 1.0 / math.sqrt(s)
    cbar = upper_tail_cutoff(rbar * alpha / n_atoms) if rbar > 0 else math.inf
    evaluator = _WorstCaseEvaluator(m, s, u, rho, delta_mode, delta_value, cbar)

    def cutoff(r: float) -> float:
        return upper_tail_cutoff(r * alpha / n_atoms)

    def feasible(r: float) -> bool:
        value, _, _ = evaluator(cutoff(r))
        return value <= alpha * (1.0 + _FEASIBILITY_TOL)

    if not feasible(1.0):
        value, w_m0, w_pi = evaluator(cutoff(1.0))
        raise CalibrationError(
            f"calibration infeasible even at r = 1: worst-case expected "
            f"false positives {value:.6g} > alpha = {alpha:.6g} "
            f"(m0 = {w_m0}, pi = {w_pi:.4g})")

    r_limit = (1.0 - 1e-12) * n_atoms / alpha
    note = ""
    lo, hi = 1.0, 2.0
    while hi < r_limit and feasible(hi):
        lo, hi = hi, hi * 2.0
    if hi >= r_limit:
        hi = r_limit
        if feasible(hi):
            lo = hi
            note = ("relaxation unconstrained up to the p-value scale limit; "
                    "returning the largest representable coefficient")
    while hi - lo > _BISECTION_RTOL * lo:
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            lo = mid
        else:
            hi = mid

    r = lo
    worst_value, worst_m0, worst_pi = evaluator(cutoff(r))
    coeffs = RelaxationCoefficients(r=r, rbar=rbar, c=cutoff(r), cbar=cbar)
    return CalibrationResult(
        coefficients=coeffs, u=u, m=m, s=s, alpha=alpha,
        delta_mode=delta_mode, delta_value=delta_value,
        worst_m0=worst_m0, worst_pi=worst_pi, worst_value=worst_value,
        bracket_high=hi, note=note)


@lru_cache(maxsize=8192)
def _calibrate_cached(m: int, s: int, alpha: float, rbar: float,
                      delta_mode: str, delta_value: float | None,
                      u: float) -> CalibrationResult:
    return calibrate_relaxation(m=m, s=s, alpha=alpha, rule=None, rbar=rbar,
                                delta_mode=delta_mode, delta_value=delta_value,
                                u=u)


def calibrate_cached(m: int, s: int, alpha: float, rbar: float, u: float,
                     delta_mode: str = DELTA_INFINITE,
                     delta_value: float | None = None) -> CalibrationResult:
    """Memoized calibration keyed on rounded parameters.

    Simulation replicates re-calibrate with the same handful of subset
    sizes over and over; the cache makes that free without touching
    determinism (the result is a pure function of the key).
    """
    key_delta = None if delta_value is None else round(float(delta_value), 12)
    return _calibrate_cached(int(m), int(s), round(float(alpha), 12),
                             round(float(rbar), 12), delta_mode, key_delta,
                             round(float(u), 15))


def _allnull_conditional(z: np.ndarray, t_u: float, sizes: np.ndarray,
                         upper: bool) -> np.ndarray:
    """P(T >= t_u | Z = z) (or its complement) for null subsets, per size.

    Shape (len(sizes), len(z)).  Size-1 subsets are their own summary, so
    the conditional is the indicator of z against t_u.
    """
    out = np.empty((sizes.size, z.size))
    single = sizes == 1
    if np.any(single):
        ind = (z >= t_u).astype(float)
        out[single] = ind if upper else 1.0 - ind
    multi = ~single
    if np.any(multi):
        rho = 1.0 / np.sqrt(sizes[multi].astype(float))[:, None]
        args = (t_u - rho * z[None, :]) / np.sqrt(1.0 - rho * rho)
        out[multi] = std_normal_sf(args) if upper else std_normal_cdf(args)
    return out


def exact_allnull_relaxation(sizes, alpha: float, u: float, rbar: float) -> float:
    """Relaxation coefficient solving the fully null expected-count equation
    for an arbitrary size multiset, in the decomposition's own units.

    Solves ``sum_i s_i * P(Z > c, T_i >= t_u) + sum_i s_i * P(Z > cbar,
    T_i < t_u) = alpha`` for the cutoff c, with independent atoms and
    standardized-mean summaries, and returns ``r = sf(c) * M / alpha``.
    This is the exact counterpart of the equal-size model's all-null
    configuration, which is where the worst case binds; it exists because
    transferring the equal-size coefficient across heterogeneous sizes is
    not reliably conservative.

    The cutoff is inverted from a right-tail cumulative table (composite
    Gauss-Legendre per panel, linear within the bracketing panel), which
    keeps the per-call cost low enough for per-replicate use; the residual
    inversion error is far below Monte Carlo resolution.
    """
    sizes = np.asarray(sizes, dtype=int)
    if sizes.ndim != 1 or sizes.size == 0 or sizes.min() < 1:
        raise InputError("sizes must be a nonempty vector of positive counts")
    alpha = float(alpha)
    u = float(u)
    rbar = float(rbar)
    if not 0.0 < alpha < 1.0 or not 0.0 < u <= 1.0 or not 0.0 <= rbar <= 1.0:
        raise InputError("invalid alpha, threshold, or rbar")
    n_atoms = int(sizes.sum())
    t_u = upper_tail_cutoff(u)
    distinct, counts = np.unique(sizes, return_counts=True)
    weight = (counts * distinct).astype(float)      # atoms per size class

    z_hi = GAUSSIAN_TRUNCATION_Z
    cbar = upper_tail_cutoff(rbar * alpha / n_atoms) if rbar > 0 else math.inf
    if rbar > 0 and cbar < z_hi:
        zb, wb = gauss_legendre_grid(cbar, z_hi, _QUAD_PANELS)
        neg = _allnull_conditional(zb, t_u, distinct, upper=False)
        neg_const = float(weight @ ((neg * std_normal_pdf(zb)[None, :]) @ wb))
    else:
        neg_const = 0.0
    budget = alpha - neg_const
    if budget <= 0.0:
        return 1.0

    panels = 512
    z, w = gauss_legendre_grid(-z_hi, z_hi, panels, nodes_per_panel=4)
    g = weight @ (_allnull_conditional(z, t_u, distinct, upper=True)
                  * std_normal_pdf(z)[None, :])
    panel_mass = (g * w).reshape(panels, -1).sum(axis=1)
    # tail[j] = integral from edge j to the right end
    tail = np.concatenate((np.cumsum(panel_mass[::-1])[::-1], [0.0]))
    edges = np.linspace(-z_hi, z_hi, panels + 1)
    if tail[0] <= budget:
        c = -z_hi
    else:
        j = int(np.searchsorted(-tail, -budget, side="right")) - 1
        j = min(max(j, 0), panels - 1)
        frac = (tail[j] - budget) / panel_mass[j] if panel_mass[j] > 0 else 1.0
        c = edges[j] + min(max(frac, 0.0), 1.0) * (edges[j + 1] - edges[j])
    r = float(std_normal_sf(c)) * n_atoms / alpha
    return max(r, 1.0)


def estimate_delta(scores, m1: int, s: int) -> float:
    """Mean of the ``m1 * s`` largest scores (plug-in effect-size estimate).

    Upward biased by selection; used only for the optional ``value``
    calibration mode.
    """
    z = np.asarray(scores, dtype=float).ravel()
    k = int(m1) * int(s)
    if k < 1:
        raise InputError("m1 * s must be at least 1")
    if k > z.size:
        raise InputError(f"m1 * s = {k} exceeds the number of scores ({z.size})")
    return float(np.partition(z, z.size - k)[z.size - k:].mean())


def mc_expected_fp(m: int, m0: int, s: int, pi: float, delta: float,
                   u: float, c: float, cbar: float, replicates: int,
                   rng: np.random.Generator,
                   batch: int = 20000) -> tuple[float, float]:
    """Monte Carlo estimate of the expected false-positive count.

    Simulates the joint model (independent atoms, summary = standardized
    mean), screens each subset at threshold ``u`` and counts null scores
    above ``c`` in selected subsets plus null scores above ``cbar`` in
    unselected ones.  Affected subsets hold ``round(pi * s)`` atoms
    shifted by ``delta``.  Returns ``(mean, standard error)``.
    """
    t_u = upper_tail_cutoff(u)
    m1 = m - m0
    n_shift = int(math.floor(pi * s + 0.5)) if m1 else 0
    total = 0.0
    total_sq = 0.0
    done = 0
    sqrt_s = math.sqrt(s)
    while done < replicates:
        b = min(batch, replicates - done)
        z = rng.standard_normal((b, m, s))
        if m1 and n_shift and math.isfinite(delta):
            z[:, m0:, :n_shift] += delta
        elif m1 and n_shift:
            z[:, m0:, :n_shift] = math.inf
        t = z.sum(axis=2) / sqrt_s
        selected = t >= t_u
        null_mask = np.ones((m, s), dtype=bool)
        if m1 and n_shift:
            null_mask[m0:, :n_shift] = False
        exceed_c = (z > c) & null_mask[None, :, :]
        exceed_cb = (z > cbar) & null_mask[None, :, :] if math.isfinite(cbar) else None
        v = (exceed_c & selected[:, :, None]).sum(axis=(1, 2)).astype(float)
        if exceed_cb is not None:
            v += (exceed_cb & ~selected[:, :, None]).sum(axis=(1, 2))
        total += float(v.sum())
        total_sq += float((v * v).sum())
        done += b
    mean = total / replicates
    var = max(total_sq / replicates - mean * mean, 0.0)
    se = math.sqrt(var / replicates)
    return mean, se
