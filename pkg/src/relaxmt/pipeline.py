"""End-to-end analysis runners: two-sample scoring, the atom-wise baseline,
and the two-step screened methods.

Method families (first-step screen / second-step procedure):

    awa    no screening; the base procedure on the raw p-values
    rmnc   screen with no subset-level correction (threshold alpha)
    rmwc   screen with the base-matched correction; negative subsets dropped
    rmio   like rmwc but negative subsets stay in with a tightening
           coefficient (default 0.5)

The relaxation coefficient comes from the worst-case calibration and is
then capped at ``(M - rbar * M_minus) / M_plus`` so that the realized
weight budget ``M_plus * r + M_minus * rbar <= M`` always holds; that
inequality is the distribution-free control certificate every run must
carry.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .calibration import (
    DELTA_INFINITE,
    DELTA_VALUE,
    RelaxationCoefficients,
    calibrate_cached,
    estimate_delta,
    exact_allnull_relaxation,
)
from .errors import ConsistencyError, InputError, RelaxError, SchemaError
from .grouping import (
    SCREEN_BONFERRONI,
    SCREEN_LSU,
    SCREEN_NMCP,
    Decomposition,
    ScreeningOutcome,
    ScreeningRule,
    modify_pvalues,
    resolve_threshold,
    screen_at_threshold,
    summarize_subsets,
)
from .procedures import ScalingFunction, bonferroni, linear_step_up, scaled_step_up
from .stats import one_sided_pvalue, std_normal_quantile, upper_tail_cutoff

FAMILY_AWA = "awa"
FAMILY_RMNC = "rmnc"
FAMILY_RMWC = "rmwc"
FAMILY_RMIO = "rmio"
_FAMILIES = (FAMILY_AWA, FAMILY_RMNC, FAMILY_RMWC, FAMILY_RMIO)

BASE_BONFERRONI = "bonferroni"
BASE_LSU = "lsu"
BASE_SCALED = "scaled"
_BASES = (BASE_BONFERRONI, BASE_LSU, BASE_SCALED)

_WEIGHT_CERT_SLACK = 1e-9


@dataclass(frozen=True)
class MethodSpec:
    """A method family plus its second-step procedure and coefficients.

    ``screening`` is derived from the family unless explicitly overridden
    (mixing a screen with a non-matching base is possible but is the
    caller's responsibility to justify).
    """

    family: str
    base: str = BASE_BONFERRONI
    alpha: float = 0.05
    rbar: float | None = None
    gamma: float = 0.5
    screening: str | None = None
    delta_mode: str = DELTA_INFINITE
    delta_value: float | None = None
    m1_guess: int | None = None

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise InputError(f"unknown method family {self.family!r}")
        if self.base not in _BASES:
            raise InputError(f"unknown base procedure {self.base!r}")
        if not 0.0 < self.alpha < 1.0:
            raise InputError(f"alpha must lie in (0, 1), got {self.alpha!r}")
        if self.rbar is None:
            object.__setattr__(self, "rbar",
                               0.5 if self.family == FAMILY_RMIO else 0.0)
        if not 0.0 <= self.rbar <= 1.0:
            raise InputError(f"rbar must lie in [0, 1], got {self.rbar!r}")
        if self.screening is None and self.family != FAMILY_AWA:
            object.__setattr__(self, "screening", self._default_screening())

    def _default_screening(self) -> str:
        if self.family == FAMILY_RMNC:
            return SCREEN_NMCP
        # correction-based screens match the base procedure's flavor
        return SCREEN_LSU if self.base == BASE_LSU else SCREEN_BONFERRONI

    def base_procedure(self, p: np.ndarray) -> np.ndarray:
        if self.base == BASE_BONFERRONI:
            return bonferroni(p, self.alpha)
        if self.base == BASE_LSU:
            return linear_step_up(p, self.alpha)
        return scaled_step_up(p, self.alpha, ScalingFunction(gamma=self.gamma))


@dataclass(frozen=True)
class CalibrationOverride:
    """Diagnostic overrides for the two-step runner.

    With ``u = 1, r = 1, rbar = 1`` the two-step run reproduces the
    atom-wise baseline decision for decision.
    """

    u: float | None = None
    r: float | None = None
    rbar: float | None = None


@dataclass(frozen=True)
class AnalysisResult:
    decisions: np.ndarray
    pvalues: np.ndarray
    spec: MethodSpec
    modified_p: np.ndarray | None = None
    screening: ScreeningOutcome | None = None
    coefficients: RelaxationCoefficients | None = None
    r_calibrated: float | None = None
    weight_sum: float | None = None
    weight_limit: float | None = None
    warnings: tuple[str, ...] = ()

    @property
    def n_rejected(self) -> int:
        return int(self.decisions.sum())

    def rejected_indices(self) -> np.ndarray:
        return np.nonzero(self.decisions)[0]


@dataclass(frozen=True)
class DataMatrix:
    """Two-group observation matrix; columns are atoms."""

    group_x: np.ndarray
    group_y: np.ndarray
    atom_ids: tuple[str, ...]

    def __post_init__(self):
        x = np.asarray(self.group_x, dtype=float)
        y = np.asarray(self.group_y, dtype=float)
        if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
            raise InputError("group matrices must be 2-D with equal column counts")
        if x.shape[0] < 2 or y.shape[0] < 2:
            raise InputError("each group needs at least two rows")
        if len(self.atom_ids) != x.shape[1]:
            raise InputError("atom_ids length does not match the column count")
        object.__setattr__(self, "group_x", x)
        object.__setattr__(self, "group_y", y)

    @property
    def n_atoms(self) -> int:
        return int(self.group_x.shape[1])


def load_data_matrix(path) -> DataMatrix:
    """Read a ``group,atom_1,...,atom_M`` CSV with group labels X and Y."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty data file") from None
        if len(header) < 2 or header[0].strip() != "group":
            raise SchemaError(
                f"{path}: first header field must be 'group', got {header[:1]!r}")
        atom_ids = tuple(h.strip() for h in header[1:])
        if any(not a for a in atom_ids):
            raise SchemaError(f"{path}: blank atom id in header")
        rows_x, rows_y = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(header):
                raise SchemaError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            label = row[0].strip().upper()
            if label not in ("X", "Y"):
                raise SchemaError(
                    f"{path}:{lineno}: group must be X or Y, got {row[0]!r}")
            try:
                values = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise SchemaError(f"{path}:{lineno}: non-numeric value ({exc})") from None
            (rows_x if label == "X" else rows_y).append(values)
    if len(rows_x) < 2 or len(rows_y) < 2:
        raise SchemaError(
            f"{path}: need at least two rows per group "
            f"(got {len(rows_x)} X, {len(rows_y)} Y)")
    return DataMatrix(group_x=np.array(rows_x), group_y=np.array(rows_y),
                      atom_ids=atom_ids)


@dataclass(frozen=True)
class ScoreResult:
    scores: np.ndarray
    zero_variance: np.ndarray

    @property
    def flagged_atoms(self) -> np.ndarray:
        return np.nonzero(self.zero_variance)[0]


def two_sample_scores(data: DataMatrix, transform: str = "normal") -> ScoreResult:
    """Per-column two-sample scores; positive means group X exceeds group Y.

    ``transform='normal'`` is the pooled-variance z statistic.
    ``transform='student'`` maps the exact one-sided t p-value back to the
    normal scale (useful for small groups).  Zero-variance columns are
    flagged and given score 0 rather than failing the run, since real
    connectivity matrices contain structurally absent entries.
    """
    x, y = data.group_x, data.group_y
    n1, n2 = x.shape[0], y.shape[0]
    diff = x.mean(axis=0) - y.mean(axis=0)
    ss = ((x - x.mean(axis=0)) ** 2).sum(axis=0) + ((y - y.mean(axis=0)) ** 2).sum(axis=0)
    dof = n1 + n2 - 2
    pooled_var = ss / dof
    zero = pooled_var <= 0.0
    denom = np.sqrt(np.where(zero, 1.0, pooled_var) * (1.0 / n1 + 1.0 / n2))
    t_stat = np.where(zero, 0.0, diff / denom)
    if transform == "normal":
        scores = t_stat
    elif transform == "student":
        from scipy.stats import t as student_t
        pvals = student_t.sf(t_stat, dof)
        pvals = np.clip(pvals, 1e-300, 1.0 - 1e-16)
        scores = np.array([-std_normal_quantile(p) for p in pvals])
        scores = np.where(zero, 0.0, scores)
    else:
        raise InputError(f"unknown score transform {transform!r}")
    return ScoreResult(scores=scores, zero_variance=zero)


def run_awa(pvalues, spec: MethodSpec) -> AnalysisResult:
    """Atom-wise approach: the base procedure straight on the p-values."""
    p = np.asarray(pvalues, dtype=float)
    return AnalysisResult(decisions=spec.base_procedure(p), pvalues=p, spec=spec)


def _calibration_threshold(spec: MethodSpec, m: int) -> tuple[float, tuple[str, ...]]:
    """Data-independent screening threshold used for calibration."""
    if spec.screening == SCREEN_NMCP:
        return spec.alpha, ()
    if spec.screening == SCREEN_BONFERRONI:
        return spec.alpha / m, ()
    # the step-up screen has no analytic calibration; fall back to the
    # per-subset corrected threshold, which is the conservative stand-in
    return spec.alpha / m, (
        "step-up screening threshold is data dependent; calibrated with "
        "the per-subset threshold alpha/m instead",)


def run_two_step(scores, decomposition: Decomposition, spec: MethodSpec,
                 override: CalibrationOverride | None = None) -> AnalysisResult:
    """Screen subsets, calibrate and cap the relaxation, modify p-values,
    then run the base procedure on the modified values."""
    if spec.family == FAMILY_AWA:
        raise InputError("run_two_step needs a two-step family, not 'awa'")
    z = np.asarray(scores, dtype=float)
    p = np.asarray(one_sided_pvalue(z), dtype=float)
    m_atoms = decomposition.n_atoms
    warnings: list[str] = []

    summary = summarize_subsets(z, decomposition)
    if override is not None and override.u is not None:
        u_screen = float(override.u)
    else:
        rule = ScreeningRule(kind=spec.screening, alpha=spec.alpha)
        u_screen = resolve_threshold(summary, rule, decomposition.n_subsets)
    outcome = screen_at_threshold(summary, decomposition, u_screen)

    rbar = spec.rbar if override is None or override.rbar is None else float(override.rbar)

    r_calibrated: float
    if override is not None and override.r is not None:
        r_calibrated = float(override.r)
    else:
        u_cal, cal_warnings = _calibration_threshold(spec, decomposition.n_subsets)
        warnings.extend(cal_warnings)
        delta_value = spec.delta_value
        if spec.delta_mode == DELTA_VALUE and delta_value is None:
            if spec.m1_guess is None:
                raise InputError(
                    "delta mode 'value' needs delta_value or m1_guess to "
                    "estimate the shift from the scores")
            delta_value = estimate_delta(z, spec.m1_guess,
                                         int(decomposition.sizes.max()))
        sizes = decomposition.sizes
        result = calibrate_cached(
            m=decomposition.n_subsets,
            s=int(sizes.max()),                 # equal-size model mapping
            alpha=spec.alpha, rbar=rbar, u=u_cal,
            delta_mode=spec.delta_mode, delta_value=delta_value)
        r_calibrated = result.r
        if sizes.min() != sizes.max():
            # transferring the equal-size coefficient across mixed sizes is
            # not reliably conservative; the exact fully-null solution over
            # the real size multiset restores the expected-count guarantee
            r_exact = exact_allnull_relaxation(sizes, spec.alpha, u_cal, rbar)
            r_calibrated = min(r_calibrated, r_exact)

    # realized weight budget: M+ * r + M- * rbar <= M
    if outcome.m_plus_atoms > 0:
        r_cap = (m_atoms - rbar * outcome.m_minus_atoms) / outcome.m_plus_atoms
        r_applied = min(r_calibrated, r_cap)
    else:
        r_applied = r_calibrated
        if rbar == 0.0:
            warnings.append("screening selected no subsets; nothing can be rejected")

    modified, weights = modify_pvalues(p, decomposition, outcome, r_applied, rbar)
    decisions = spec.base_procedure(modified)

    weight_sum = float(weights.sum())
    if weight_sum > m_atoms + _WEIGHT_CERT_SLACK:
        raise RelaxError(
            f"weight budget violated: M+ r + M- rbar = {weight_sum:.6g} "
            f"> M = {m_atoms}", code="E_WEIGHT_BUDGET")

    coeffs = RelaxationCoefficients(
        r=r_applied, rbar=rbar,
        c=upper_tail_cutoff(r_applied * spec.alpha / m_atoms),
        cbar=upper_tail_cutoff(rbar * spec.alpha / m_atoms) if rbar > 0 else math.inf)
    return AnalysisResult(
        decisions=decisions, pvalues=p, spec=spec, modified_p=modified,
        screening=outcome, coefficients=coeffs, r_calibrated=r_calibrated,
        weight_sum=weight_sum, weight_limit=float(m_atoms),
        warnings=tuple(warnings))


def run_method(scores, pvalues, decomposition: Decomposition | None,
               spec: MethodSpec,
               override: CalibrationOverride | None = None) -> AnalysisResult:
    """Dispatch to the baseline or the two-step runner."""
    if spec.family == FAMILY_AWA:
        return run_awa(pvalues, spec)
    if decomposition is None:
        raise InputError(f"method {spec.family!r} needs a decomposition")
    return run_two_step(scores, decomposition, spec, override=override)


def align_decomposition(data: DataMatrix, mapping: dict[str, str]) -> Decomposition:
    """Order the atom->subset mapping by the data columns, or fail loudly."""
    missing = [a for a in data.atom_ids if a not in mapping]
    extra = [a for a in mapping if a not in set(data.atom_ids)]
    if missing or extra:
        parts = []
        if missing:
            parts.append(f"atoms in data but not in decomposition: {missing}")
        if extra:
            parts.append(f"atoms in decomposition but not in data: {extra}")
        raise ConsistencyError("; ".join(parts))
    labels = [mapping[a] for a in data.atom_ids]
    return Decomposition.from_labels(labels, atom_ids=data.atom_ids)
